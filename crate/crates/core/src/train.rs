//! Training loop, learning-rate schedule, evaluation and throughput benchmark.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::Pair;
use crate::error::{Error, Result};
use crate::imaging::{psnr, ImagePatch};
use crate::model::{Denoiser, LossBreakdown};
use crate::nn::InitMode;
use crate::noise::gen_clean_patch;
use crate::optim::AdamW;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Header of the training log CSV.
pub const LOG_HEADER: &str = "iter,lr,rec,kl_x,kl_k,total";

/// Patch side used by [`bench_throughput`] when none is given.
pub const BENCH_PATCH: usize = 287;

const DATA_STREAM: u64 = 0x6461_7461;
const CROP_STREAM: u64 = 0x6372_6f70;
const NOISE_STREAM: u64 = 0x6e6f_6973;

/// Cosine annealing from `lr_start` at 0 to `lr_end` at `total_iters`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::param(format!("iteration {iter} beyond total {}", cfg.total_iters)));
    }
    let t = iter as f64 / cfg.total_iters as f64;
    Ok(cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Dataset index of batch slot `slot` at `iter`, walking seeded per-epoch permutations.
fn sample_index(n: usize, cfg: &TrainConfig, iter: usize, slot: usize) -> usize {
    let k = iter * cfg.batch_size + slot;
    let epoch = (k / n) as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ DATA_STREAM, epoch)));
    perm[k % n]
}

/// The batch used at `iter`: a pure function of `(pairs, cfg.seed, iter)`.
pub fn sample_batch(pairs: &[Pair], cfg: &TrainConfig, iter: usize) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    if pairs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let size = cfg.patch_size_at(iter);
    (0..cfg.batch_size)
        .map(|slot| {
            let p = &pairs[sample_index(pairs.len(), cfg, iter, slot)];
            let (h, w) = (p.clean.height(), p.clean.width());
            if h < size || w < size {
                return Err(Error::Data(format!("{h}×{w} pair smaller than crop {size}")));
            }
            let k = (iter * cfg.batch_size + slot) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ CROP_STREAM, k));
            let top = rng.random_range(0..=h - size);
            let left = rng.random_range(0..=w - size);
            Ok((
                p.clean.crop(top, left, size, size)?.into_tensor(),
                p.noisy.crop(top, left, size, size)?.into_tensor(),
            ))
        })
        .collect()
}

/// Model, optimizer and iteration counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Denoiser<f32>,
    pub opt: AdamW<f32>,
    pub iter: usize,
}

impl Trainer {
    /// Fresh identity-anchored model seeded by `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Denoiser::new(cfg.model.clone(), InitMode::IdentityAnchored, cfg.seed)?;
        Ok(Self::with_model(cfg, model))
    }

    pub fn with_model(cfg: TrainConfig, model: Denoiser<f32>) -> Self {
        let shapes: Vec<&[usize]> = model.params().tensors().iter().map(Tensor::shape).collect();
        let opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, &shapes);
        Self {
            cfg,
            model,
            opt,
            iter: 0,
        }
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        ck.check_hash(t.cfg.hash());
        ck.apply(&mut t.model)?;
        if ck.has_optimizer() {
            ck.apply_optimizer(&t.model, &mut t.opt)?;
        }
        t.iter = ck.iteration as usize;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            Some(&self.opt),
            self.iter as u64,
            self.cfg.to_text(),
            self.cfg.hash(),
        )
    }

    /// One AdamW step on `batch` at the current iteration.
    pub fn train_step(&mut self, batch: &[(Tensor<f32>, Tensor<f32>)]) -> Result<LossBreakdown> {
        let iter = self.iter;
        let lr = lr_at(iter, &self.cfg)?;
        let beta = self.cfg.kl_weight_at(iter);
        let seed = derive_seed(self.cfg.seed ^ NOISE_STREAM, iter as u64);
        let (loss, grads) = self.model.loss_and_grads(batch, seed, beta, true)?;
        for (term, v) in [("rec", loss.rec), ("kl_x", loss.kl_x), ("kl_k", loss.kl_k), ("total", loss.total)] {
            if !v.is_finite() {
                log::error!("iteration {iter}: {term} = {v} (lr {lr:e}, beta {beta})");
                return Err(Error::NonFinite { term, iter });
            }
        }
        let grads = grads.expect("gradients requested");
        self.opt.step(self.model.params_mut().tensors_mut(), &grads, lr)?;
        self.iter += 1;
        Ok(loss)
    }

    /// Trains until `until` iterations (capped at `total_iters`), appending
    /// log rows to `log` and writing periodic checkpoints into `ckpt_dir`.
    pub fn run(
        &mut self,
        pairs: &[Pair],
        until: usize,
        mut log: Option<&mut dyn Write>,
        ckpt_dir: Option<&Path>,
    ) -> Result<Vec<LossBreakdown>> {
        let until = until.min(self.cfg.total_iters);
        let mut trace = Vec::with_capacity(until.saturating_sub(self.iter));
        let start = Instant::now();
        while self.iter < until {
            let iter = self.iter;
            let batch = sample_batch(pairs, &self.cfg, iter)?;
            let lr = lr_at(iter, &self.cfg)?;
            let loss = self.train_step(&batch)?;
            trace.push(loss);
            if let Some(w) = log.as_deref_mut() {
                if self.cfg.log_every > 0 && iter % self.cfg.log_every == 0 {
                    writeln!(w, "{iter},{lr:e},{},{},{},{}", loss.rec, loss.kl_x, loss.kl_k, loss.total)?;
                }
            }
            if (iter + 1) % 100 == 0 {
                log::info!(
                    "iter {} total {:.5} rec {:.5} kl_x {:.4} kl_k {:.4} ({:.1}s)",
                    iter + 1,
                    loss.total,
                    loss.rec,
                    loss.kl_x,
                    loss.kl_k,
                    start.elapsed().as_secs_f64()
                );
            }
            if let Some(dir) = ckpt_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.iter % every == 0 {
                    let path = dir.join(format!("ckpt_{:06}.bin", self.iter));
                    self.checkpoint().save(&path)?;
                    log::info!("wrote {}", path.display());
                }
            }
        }
        Ok(trace)
    }
}

/// Output of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub model: Denoiser<f32>,
    pub trace: Vec<LossBreakdown>,
}

/// Full training run from scratch, writing the CSV log to `log_path` when given.
pub fn train_loop(
    pairs: &[Pair],
    cfg: &TrainConfig,
    log_path: Option<&Path>,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut t = Trainer::new(cfg.clone())?;
    let mut file = match log_path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let trace = t.run(pairs, cfg.total_iters, file.as_mut().map(|w| w as &mut dyn Write), ckpt_dir)?;
    if let Some(mut w) = file {
        w.flush()?;
    }
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        model: t.model,
        trace,
    })
}

/// Mean of `values` over consecutive windows of `window`.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsnrReport {
    pub denoised: f64,
    pub noisy: f64,
    pub delta: f64,
    pub count: usize,
}

/// Mean PSNR of prior-mean denoised outputs and of the raw noisy inputs.
pub fn evaluate_psnr(pairs: &[Pair], model: &Denoiser<f32>) -> Result<PsnrReport> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let (mut den, mut noi) = (0.0, 0.0);
    for p in pairs {
        let out = model.denoise(&p.noisy)?;
        den += psnr(&out, &p.clean, 1.0)?;
        noi += psnr(&p.noisy, &p.clean, 1.0)?;
    }
    let n = pairs.len() as f64;
    Ok(PsnrReport {
        denoised: den / n,
        noisy: noi / n,
        delta: (den - noi) / n,
        count: pairs.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub fps: f64,
    pub patch_size: usize,
    pub frames: usize,
    pub hardware: String,
}

/// Best-effort CPU description.
pub fn hardware_string() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string())
}

/// Frames per second of deterministic inference on `size × size` patches,
/// after one warm-up frame.
pub fn bench_throughput(model: &Denoiser<f32>, size: usize, n_frames: usize) -> Result<BenchReport> {
    if n_frames == 0 {
        return Err(Error::param("n_frames must be ≥ 1"));
    }
    let frame: ImagePatch = gen_clean_patch(size.max(8), size.max(8), 0)?;
    model.denoise(&frame)?;
    let start = Instant::now();
    for _ in 0..n_frames {
        std::hint::black_box(model.denoise(std::hint::black_box(&frame))?);
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(BenchReport {
        fps: n_frames as f64 / secs,
        patch_size: size,
        frames: n_frames,
        hardware: hardware_string(),
    })
}

/// Path of the log CSV inside an output directory.
pub fn log_path(dir: &Path) -> PathBuf {
    dir.join("train_log.csv")
}
