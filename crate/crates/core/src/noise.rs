//! Synthetic clean images and the low-light capture model used to pair them
//! with noisy, enhanced counterparts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imaging::ImagePatch;
use crate::tensor::Tensor;

/// Heteroscedastic Gaussian noise: per-pixel std `sqrt(a·x + b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    pub a: f64,
    pub b: f64,
    pub seed: u64,
}

impl NoiseParams {
    pub fn new(a: f64, b: f64, seed: u64) -> Result<Self> {
        let p = Self { a, b, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.b >= 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::param(format!(
                "noise variances must be finite and ≥ 0 (a = {}, b = {})",
                self.a, self.b
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Exposure and gamma of the analytic capture/enhancement pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnhanceParams {
    pub gain: f64,
    pub gamma: f64,
}

impl EnhanceParams {
    pub fn new(gain: f64, gamma: f64) -> Result<Self> {
        let p = Self { gain, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::param(format!("gain {} outside (0, 1]", self.gain)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::param(format!("gamma {} must be > 0", self.gamma)));
        }
        Ok(())
    }
}

/// Smoothly interpolated lattice noise with cells of `cell` pixels.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
            let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Procedural RGB image: colour gradient, two octaves of value noise and a
/// few flat shapes, stretched to the full `[0, 1]` range.
pub fn gen_clean_patch(height: usize, width: usize, seed: u64) -> Result<ImagePatch> {
    if height < 8 || width < 8 {
        return Err(Error::dim(format!("clean patch must be at least 8×8, got {height}×{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    let mut data = vec![0.0f64; 3 * n];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let coarse = (height.min(width) / 3).max(2);
    let fine = (coarse / 3).max(1);
    for c in 0..3 {
        let g_amp: f64 = rng.random_range(0.2..0.6);
        let n1 = value_noise(height, width, coarse, &mut rng);
        let n2 = value_noise(height, width, fine, &mut rng);
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 / width as f64 - 0.5) * ca + (y as f64 / height as f64 - 0.5) * sa;
                let i = y * width + x;
                data[c * n + i] = g_amp * u + 0.6 * n1[i] + 0.25 * n2[i];
            }
        }
    }
    let shapes = rng.random_range(2..5);
    for _ in 0..shapes {
        let colour: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let r = rng.random_range(0.1..0.3) * height.min(width) as f64;
        let disc = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= 0.7 * r
                };
                if inside {
                    for (c, &v) in colour.iter().enumerate() {
                        data[c * n + y * width + x] = v;
                    }
                }
            }
        }
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let t = Tensor::new(&[3, height, width], data.iter().map(|v| ((v - lo) / span) as f32).collect())?;
    ImagePatch::new(t)
}

/// `clamp(clean + sqrt(a·clean + b)·ε)` with `ε ~ N(0, 1)` seeded by `p.seed`.
pub fn add_signal_noise(clean: &ImagePatch, p: &NoiseParams) -> Result<ImagePatch> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let data = clean
        .data()
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(&mut rng);
            let x = x as f64;
            let std = (p.a * x + p.b).max(0.0).sqrt();
            (x + std * e).clamp(0.0, 1.0) as f32
        })
        .collect();
    ImagePatch::new(Tensor::new(clean.tensor().shape(), data)?)
}

/// Simulates a low-light capture of `clean` followed by gamma enhancement.
///
/// The scene is darkened to `gain·clean^γ` (linear sensor response), noised
/// there with [`add_signal_noise`], and mapped back by the exact inverse
/// `(·/gain)^(1/γ)`. Without noise the enhanced image equals `clean`; with
/// noise the inverse curve amplifies it most in the shadows.
pub fn darken_enhance(
    clean: &ImagePatch,
    np: &NoiseParams,
    ep: &EnhanceParams,
) -> Result<(ImagePatch, ImagePatch)> {
    ep.validate()?;
    let dark = ImagePatch::new(
        clean
            .tensor()
            .map(|x| (ep.gain * (x as f64).powf(ep.gamma)) as f32),
    )?;
    let dark_noisy = add_signal_noise(&dark, np)?;
    let enhanced = dark_noisy
        .tensor()
        .map(|v| ((v as f64 / ep.gain).clamp(0.0, 1.0).powf(1.0 / ep.gamma)) as f32);
    Ok((dark_noisy, ImagePatch::new(enhanced)?))
}
