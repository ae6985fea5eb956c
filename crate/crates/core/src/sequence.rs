//! Synthetic tracking sequences: a textured target translating over a
//! textured background, with exact ground-truth boxes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{BoundingBox, ImagePatch};
use crate::noise::gen_clean_patch;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub target_h: usize,
    pub target_w: usize,
    /// Target top-left corner on frame 0.
    pub start: (i64, i64),
    /// Per-frame displacement `(dx, dy)` in whole pixels.
    pub velocity: (i64, i64),
    /// Target texture amplitude around mid-grey; the background uses half of it.
    pub contrast: f64,
    pub seed: u64,
}

impl SequenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 || self.target_h == 0 || self.target_w == 0 {
            return Err(Error::Config("sequence needs ≥ 1 frame and a non-empty target".into()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config(format!("contrast {} outside (0, 1]", self.contrast)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("frames must be at least 8×8".into()));
        }
        for f in [0, self.num_frames - 1] {
            let (x, y) = self.top_left(f);
            if x < 0 || y < 0 || x as usize + self.target_w > self.width || y as usize + self.target_h > self.height {
                return Err(Error::Config(format!(
                    "target leaves the {}×{} frame at frame {f} (top-left {x}, {y})",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    fn top_left(&self, frame: usize) -> (i64, i64) {
        let f = frame as i64;
        (self.start.0 + f * self.velocity.0, self.start.1 + f * self.velocity.1)
    }

    /// Ground-truth box on `frame`.
    pub fn box_at(&self, frame: usize) -> BoundingBox {
        let (x, y) = self.top_left(frame);
        BoundingBox {
            cx: x as f64 + self.target_w as f64 / 2.0,
            cy: y as f64 + self.target_h as f64 / 2.0,
            w: self.target_w as f64,
            h: self.target_h as f64,
        }
    }

    /// Random spec whose straight-line trajectory stays inside the frame.
    ///
    /// Speeds are drawn from `1..=max_speed` pixels per frame on each axis with random sign.
    pub fn random(
        num_frames: usize,
        frame: usize,
        target: usize,
        max_speed: i64,
        contrast: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7365_71));
        let travel = (frame - target) as i64;
        let steps = num_frames.saturating_sub(1) as i64;
        let axis = |rng: &mut ChaCha8Rng| {
            let cap = if steps == 0 { max_speed } else { (travel / steps).min(max_speed) };
            let speed = if cap >= 1 { rng.random_range(1..=cap) } else { 0 };
            let span = travel - speed * steps;
            let offset = rng.random_range(0..=span.max(0));
            if rng.random_bool(0.5) {
                (offset, speed)
            } else {
                (travel - offset, -speed)
            }
        };
        let (x0, vx) = axis(&mut rng);
        let (y0, vy) = axis(&mut rng);
        let spec = Self {
            num_frames,
            height: frame,
            width: frame,
            target_h: target,
            target_w: target,
            start: (x0, y0),
            velocity: (vx, vy),
            contrast,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub spec: SequenceSpec,
    pub frames: Vec<ImagePatch>,
    pub boxes: Vec<BoundingBox>,
}

/// Renders `spec`: a textured target pasted over a background texture of half its amplitude.
pub fn gen_sequence(spec: &SequenceSpec) -> Result<Sequence> {
    spec.validate()?;
    let bg = gen_clean_patch(spec.height, spec.width, derive_seed(spec.seed, 1))?;
    let amp = spec.contrast as f32;
    let bg = bg.tensor().map(|v| 0.5 + 0.5 * amp * (v - 0.5));
    let target = gen_clean_patch(spec.target_h.max(8), spec.target_w.max(8), derive_seed(spec.seed, 2))?;
    let target = ImagePatch::new(target.tensor().map(|v| 0.5 + amp * (v - 0.5)))?;
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut boxes = Vec::with_capacity(spec.num_frames);
    for f in 0..spec.num_frames {
        let (x0, y0) = spec.top_left(f);
        let mut data = bg.data().to_vec();
        for c in 0..3 {
            for ty in 0..spec.target_h {
                for tx in 0..spec.target_w {
                    let (y, x) = (y0 as usize + ty, x0 as usize + tx);
                    data[(c * h + y) * w + x] = target.get(c, ty, tx);
                }
            }
        }
        frames.push(ImagePatch::new(Tensor::new(&[3, h, w], data)?)?);
        boxes.push(spec.box_at(f));
    }
    Ok(Sequence {
        spec: spec.clone(),
        frames,
        boxes,
    })
}

impl Sequence {
    /// Writes `spec.txt`, `boxes.csv` and `frame_<idx>.f32` (little-endian `f32`, CHW).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let s = &self.spec;
        let mut t = String::new();
        let _ = writeln!(t, "num_frames = {}", s.num_frames);
        let _ = writeln!(t, "height = {}", s.height);
        let _ = writeln!(t, "width = {}", s.width);
        let _ = writeln!(t, "target_h = {}", s.target_h);
        let _ = writeln!(t, "target_w = {}", s.target_w);
        let _ = writeln!(t, "start = {} {}", s.start.0, s.start.1);
        let _ = writeln!(t, "velocity = {} {}", s.velocity.0, s.velocity.1);
        let _ = writeln!(t, "contrast = {}", s.contrast);
        let _ = writeln!(t, "seed = {}", s.seed);
        fs::write(dir.join("spec.txt"), t)?;
        let mut csv = String::from("frame,cx,cy,w,h\n");
        for (i, b) in self.boxes.iter().enumerate() {
            let _ = writeln!(csv, "{i},{},{},{},{}", b.cx, b.cy, b.w, b.h);
        }
        fs::write(dir.join("boxes.csv"), csv)?;
        for (i, f) in self.frames.iter().enumerate() {
            let bytes: Vec<u8> = f.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(dir.join(format!("frame_{i}.f32")), bytes)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Sequence::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("spec.txt"))?;
        let field = |k: &str| -> Result<Vec<i64>> {
            let line = text
                .lines()
                .find_map(|l| l.split_once('=').filter(|(a, _)| a.trim() == k))
                .ok_or_else(|| Error::format(k, "missing"))?;
            line.1
                .split_whitespace()
                .map(|v| v.parse().map_err(|e: std::num::ParseIntError| Error::format(k, e.to_string())))
                .collect()
        };
        let one = |k: &str| -> Result<usize> {
            match field(k)?.as_slice() {
                &[v] if v >= 0 => Ok(v as usize),
                _ => Err(Error::format(k, "expected one non-negative integer")),
            }
        };
        let two = |k: &str| -> Result<(i64, i64)> {
            match field(k)?.as_slice() {
                &[a, b] => Ok((a, b)),
                _ => Err(Error::format(k, "expected two integers")),
            }
        };
        let raw = |k: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.split_once('=').filter(|(a, _)| a.trim() == k))
                .map(|(_, v)| v.trim())
                .ok_or_else(|| Error::format(k, "missing"))
        };
        let spec = SequenceSpec {
            num_frames: one("num_frames")?,
            height: one("height")?,
            width: one("width")?,
            target_h: one("target_h")?,
            target_w: one("target_w")?,
            start: two("start")?,
            velocity: two("velocity")?,
            contrast: raw("contrast")?
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::format("contrast", e.to_string()))?,
            seed: raw("seed")?
                .parse()
                .map_err(|e: std::num::ParseIntError| Error::format("seed", e.to_string()))?,
        };
        spec.validate()?;
        let mut frames = Vec::with_capacity(spec.num_frames);
        for i in 0..spec.num_frames {
            let name = format!("frame_{i}.f32");
            let bytes = fs::read(dir.join(&name))?;
            if bytes.len() != 12 * spec.height * spec.width {
                return Err(Error::format(name, "unexpected size"));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            frames.push(ImagePatch::new(Tensor::new(&[3, spec.height, spec.width], data)?)?);
        }
        let boxes = (0..spec.num_frames).map(|f| spec.box_at(f)).collect();
        Ok(Self { spec, frames, boxes })
    }
}
