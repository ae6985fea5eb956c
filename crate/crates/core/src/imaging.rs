//! Image tensors, pixel (un)shuffle, depthwise convolution and the
//! restoration/tracking metrics.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// PSNR reported for identical images. Keeps test-set averages finite.
pub const PSNR_CAP_DB: f64 = 100.0;

/// A 3-channel `[C, H, W]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch(Tensor<f32>);

impl ImagePatch {
    /// Wraps a tensor, clamping into `[0, 1]`. Rejects non-finite values and
    /// anything that is not `3×H×W`.
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "image patch must be 3×H×W with H, W ≥ 1, got {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::param("image patch contains non-finite values"));
        }
        Ok(Self(t.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::new(&[3, height, width], data)?)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self(Tensor::full(&[3, height, width], value.clamp(0.0, 1.0)))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.0.at3(c, y, x)
    }

    /// Crop `height × width` starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() || height == 0 || width == 0
        {
            return Err(Error::dim(format!(
                "crop {height}×{width} at ({top}, {left}) exceeds {}×{}",
                self.height(),
                self.width()
            )));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in top..top + height {
                for x in left..left + width {
                    data.push(self.get(c, y, x));
                }
            }
        }
        Ok(Self(Tensor::new(&[3, height, width], data)?))
    }

    /// Replicate-pad on the bottom/right edges up to `height × width`.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Self {
        let (h0, w0) = (self.height(), self.width());
        let t = Tensor::from_fn(&[3, height, width], |i| {
            let c = i / (height * width);
            let y = (i / width) % height;
            let x = i % width;
            self.get(c, y.min(h0 - 1), x.min(w0 - 1))
        });
        Self(t)
    }

    pub fn mean(&self) -> f64 {
        self.0.data().iter().map(|&v| v as f64).sum::<f64>() / self.0.len() as f64
    }
}

/// Rearranges `alpha × alpha` spatial blocks into channels.
/// Output channel `c * alpha² + dy * alpha + dx` holds block offset `(dy, dx)` of input channel `c`.
pub fn pixel_unshuffle<T: Real>(t: &Tensor<T>, alpha: usize) -> Result<Tensor<T>> {
    let (c, h, w) = t.dims3()?;
    if alpha < 1 || h % alpha != 0 || w % alpha != 0 {
        return Err(Error::dim(format!(
            "pixel_unshuffle: {h}×{w} not divisible by factor {alpha}"
        )));
    }
    let (ho, wo) = (h / alpha, w / alpha);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for ci in 0..c {
        for dy in 0..alpha {
            for dx in 0..alpha {
                for y in 0..ho {
                    let row = (ci * h + y * alpha + dy) * w;
                    out.extend((0..wo).map(|x| src[row + x * alpha + dx]));
                }
            }
        }
    }
    Tensor::new(&[c * alpha * alpha, ho, wo], out)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Real>(t: &Tensor<T>, alpha: usize) -> Result<Tensor<T>> {
    let (cin, h, w) = t.dims3()?;
    let a2 = alpha * alpha;
    if alpha < 1 || cin % a2 != 0 {
        return Err(Error::dim(format!(
            "pixel_shuffle: {cin} channels not divisible by {a2}"
        )));
    }
    let c = cin / a2;
    let (ho, wo) = (h * alpha, w * alpha);
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for ci in 0..c {
        for dy in 0..alpha {
            for dx in 0..alpha {
                let plane = ((ci * a2 + dy * alpha + dx) * h) * w;
                for y in 0..h {
                    let orow = (ci * ho + y * alpha + dy) * wo;
                    for x in 0..w {
                        out[orow + x * alpha + dx] = src[plane + y * w + x];
                    }
                }
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

/// Depthwise "same" cross-correlation with replicate padding: output channel
/// `c` is input channel `c` correlated with `kernel[c]` (`[C, s, s]`, `s` odd).
pub fn conv_same<T: Real>(t: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = t.dims3()?;
    let (kc, s, s2) = kernel.dims3()?;
    if s != s2 || s % 2 == 0 {
        return Err(Error::param(format!("kernel must be odd and square, got {s}×{s2}")));
    }
    if kc != c {
        return Err(Error::dim(format!(
            "kernel has {kc} slices for a {c}-channel input"
        )));
    }
    let mut out = vec![T::zero(); t.len()];
    depthwise_replicate_acc(t.data(), kernel.data(), c, h, w, s, T::one(), &mut out);
    Tensor::new(&[c, h, w], out)
}

/// Builds per-axis clamped index tables for replicate padding.
pub(crate) fn replicate_index(len: usize, s: usize) -> Vec<usize> {
    let r = s / 2;
    (0..len + s - 1)
        .map(|i| (i as isize - r as isize).clamp(0, len as isize - 1) as usize)
        .collect()
}

/// `out += scale * conv_same(src, kernel)` on raw buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_replicate_acc<T: Real>(
    src: &[T],
    kernel: &[T],
    c: usize,
    h: usize,
    w: usize,
    s: usize,
    scale: T,
    out: &mut [T],
) {
    let ys = replicate_index(h, s);
    let xs = replicate_index(w, s);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        let o = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..s {
            for kx in 0..s {
                let tap = kernel[(ci * s + ky) * s + kx] * scale;
                if tap == T::zero() {
                    continue;
                }
                for y in 0..h {
                    let row = ys[y + ky] * w;
                    let orow = &mut o[y * w..(y + 1) * w];
                    for (x, ov) in orow.iter_mut().enumerate() {
                        *ov += tap * plane[row + xs[x + kx]];
                    }
                }
            }
        }
    }
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`] (returned for identical inputs).
pub fn psnr(a: &ImagePatch, b: &ImagePatch, peak: f64) -> Result<f64> {
    psnr_tensors(a.tensor(), b.tensor(), peak)
}

pub fn psnr_tensors<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "psnr shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len().max(1) as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Axis-aligned box given by its center and extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) || w <= 0.0 || h <= 0.0
        {
            return Err(Error::param(format!(
                "invalid box center ({cx}, {cy}) size {w}×{h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.left() + a.w).min(b.left() + b.w) - a.left().max(b.left());
    let iy = (a.top() + a.h).min(b.top() + b.h) - a.top().max(b.top());
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Center location error: Euclidean distance between box centers.
pub fn cle(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unshuffle_layout_on_2x2() {
        let t = Tensor::new(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let u = pixel_unshuffle(&t, 2).unwrap();
        assert_eq!(u.shape(), &[4, 1, 1]);
        assert_eq!(u.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_shuffle(&u, 2).unwrap(), t);
    }

    #[test]
    fn unshuffle_constant_stays_constant() {
        let t = Tensor::full(&[2, 8, 4], 0.25f64);
        let u = pixel_unshuffle(&t, 4).unwrap();
        assert_eq!(u.shape(), &[32, 2, 1]);
        assert!(u.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn unshuffle_matches_index_loop() {
        let t = random(&[3, 8, 8], 1);
        let a = 2;
        let u = pixel_unshuffle(&t, a).unwrap();
        for c in 0..3 {
            for dy in 0..a {
                for dx in 0..a {
                    for y in 0..4 {
                        for x in 0..4 {
                            let oc = c * a * a + dy * a + dx;
                            assert_eq!(u.at3(oc, y, x), t.at3(c, y * a + dy, x * a + dx));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn shuffle_matches_index_loop_alpha4() {
        let t = random(&[16, 3, 3], 2);
        let s = pixel_shuffle(&t, 4).unwrap();
        assert_eq!(s.shape(), &[1, 12, 12]);
        for y in 0..12 {
            for x in 0..12 {
                assert_eq!(s.at3(0, y, x), t.at3((y % 4) * 4 + x % 4, y / 4, x / 4));
            }
        }
    }

    #[test]
    fn shuffle_rejects_bad_dims() {
        let t = Tensor::<f64>::zeros(&[3, 6, 5]);
        assert!(matches!(pixel_unshuffle(&t, 2), Err(Error::Dimension(_))));
        assert!(matches!(pixel_shuffle(&t, 2), Err(Error::Dimension(_))));
    }

    fn delta(c: usize, s: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, s, s], |i| {
            if i % (s * s) == (s * s) / 2 {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn conv_delta_is_identity() {
        let t = random(&[3, 7, 5], 3);
        assert_eq!(conv_same(&t, &delta(3, 3)).unwrap(), t);
        assert_eq!(conv_same(&t, &delta(3, 5)).unwrap(), t);
    }

    #[test]
    fn conv_constant_image_scales_by_tap_sum() {
        let t = Tensor::full(&[3, 6, 6], 0.5f64);
        let k = random(&[3, 3, 3], 4);
        let out = conv_same(&t, &k).unwrap();
        for c in 0..3 {
            let sigma: f64 = k.data()[c * 9..(c + 1) * 9].iter().sum();
            for y in 0..6 {
                for x in 0..6 {
                    assert!((out.at3(c, y, x) - 0.5 * sigma).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let t = random(&[3, 4, 4], 5);
        let k = Tensor::zeros(&[3, 2, 2]);
        assert!(matches!(conv_same(&t, &k), Err(Error::Parameter(_))));
    }

    #[test]
    fn psnr_reference_values() {
        let a = ImagePatch::filled(4, 4, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b = ImagePatch::filled(4, 4, 0.6);
        // f32 storage of 0.6 - 0.5 is off by ~2e-8
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let ta = Tensor::<f64>::full(&[3, 4, 4], 0.25);
        let tb = ta.map(|v| v + 0.1);
        assert!((psnr_tensors(&ta, &tb, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let c = ImagePatch::filled(4, 5, 0.6);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn iou_and_cle_reference_values() {
        let a = BoundingBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let far = BoundingBox::new(5.0, 5.0, 1.0, 1.0).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
        let half = BoundingBox::new(1.0, 0.5, 1.0, 1.0).unwrap();
        assert!((iou(&a, &half) - 1.0 / 3.0).abs() < 1e-12);
        let off = BoundingBox::new(3.5, 4.5, 2.0, 2.0).unwrap();
        assert_eq!(cle(&a, &a), 0.0);
        assert!((cle(&a, &off) - 5.0).abs() < 1e-12);
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn crop_and_pad() {
        let p = ImagePatch::new(random(&[3, 6, 6], 9).map(|v| v.abs() as f64).cast()).unwrap();
        let c = p.crop(1, 2, 3, 4).unwrap();
        assert_eq!(c.get(2, 0, 0), p.get(2, 1, 2));
        assert!(p.crop(4, 4, 3, 3).is_err());
        let padded = p.pad_replicate(8, 7);
        assert_eq!(padded.get(1, 7, 6), p.get(1, 5, 5));
        assert_eq!(padded.crop(0, 0, 6, 6).unwrap(), p);
    }

    proptest! {
        #[test]
        fn shuffle_unshuffle_roundtrip(c in 1usize..4, hb in 1usize..4, wb in 1usize..4, a in prop::sample::select(vec![2usize, 4]), seed in 0u64..1000) {
            let t = random(&[c, hb * a, wb * a], seed);
            let back = pixel_shuffle(&pixel_unshuffle(&t, a).unwrap(), a).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn conv_is_linear(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let t1 = random(&[3, 5, 6], seed);
            let t2 = random(&[3, 5, 6], seed + 7);
            let k = random(&[3, 3, 3], seed + 13);
            let mix = t1.zip_map(&t2, |a, b| alpha * a + beta * b).unwrap();
            let lhs = conv_same(&mix, &k).unwrap();
            let rhs = conv_same(&t1, &k).unwrap()
                .zip_map(&conv_same(&t2, &k).unwrap(), |a, b| alpha * a + beta * b).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-8);
        }

        #[test]
        fn metrics_are_symmetric(ax in 0.0f64..50.0, ay in 0.0f64..50.0, bx in 0.0f64..50.0, by in 0.0f64..50.0,
                                 aw in 1.0f64..20.0, ah in 1.0f64..20.0, bw in 1.0f64..20.0, bh in 1.0f64..20.0) {
            let a = BoundingBox::new(ax, ay, aw, ah).unwrap();
            let b = BoundingBox::new(bx, by, bw, bh).unwrap();
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!(cle(&a, &b) >= 0.0);
            prop_assert_eq!(cle(&a, &b), cle(&b, &a));
        }

        #[test]
        fn psnr_is_symmetric(seed in 0u64..1000) {
            let a = ImagePatch::new(random(&[3, 4, 4], seed).map(|v| v.abs()).cast()).unwrap();
            let b = ImagePatch::new(random(&[3, 4, 4], seed + 1).map(|v| v.abs()).cast()).unwrap();
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }
    }
}
