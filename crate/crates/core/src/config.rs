//! Model/training configuration and the flat `key = value` config format.
//!
//! ```text
//! # comments start with '#'
//! total_iters = 2000
//! schedule = 0:16, 800:24, 1600:32
//! ```
//! Unknown keys are rejected. Every key can also be set from the command line
//! (`--set key=value`), which takes precedence over the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels after the channel-expansion layer.
    pub c_base: usize,
    pub blocks_per_extractor: usize,
    pub attention_heads: usize,
    pub ffn_mult: usize,
    /// Channels of the spatial noise latent.
    pub c_z: usize,
    /// Dimension of the kernel latent vector.
    pub d_k: usize,
    pub num_k: usize,
    pub size_k: usize,
    pub dpe_width: usize,
    pub decoder_width: usize,
    pub kernel_hidden: usize,
    /// `false` swaps the Transformer conditionalizer for a plain unshuffle + conv.
    pub use_nrtc: bool,
    /// `false` returns the preliminary subtraction result without refinement.
    pub use_mkcr: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_base: 16,
            blocks_per_extractor: 2,
            attention_heads: 2,
            ffn_mult: 2,
            c_z: 8,
            d_k: 64,
            num_k: 20,
            size_k: 3,
            dpe_width: 16,
            decoder_width: 16,
            kernel_hidden: 64,
            use_nrtc: true,
            use_mkcr: true,
        }
    }
}

impl ModelConfig {
    pub fn cond_channels(&self) -> usize {
        4 * self.c_base
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_base < 4 || self.attention_heads == 0 || self.c_base % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "c_base = {} must be ≥ 4 and divisible by attention_heads = {}",
                self.c_base, self.attention_heads
            )));
        }
        if self.blocks_per_extractor == 0 {
            return Err(Error::Config("blocks_per_extractor must be ≥ 1".into()));
        }
        if self.size_k % 2 == 0 {
            return Err(Error::Parameter(format!("size_k = {} must be odd", self.size_k)));
        }
        for (name, v) in [
            ("ffn_mult", self.ffn_mult),
            ("c_z", self.c_z),
            ("d_k", self.d_k),
            ("num_k", self.num_k),
            ("dpe_width", self.dpe_width),
            ("decoder_width", self.decoder_width),
            ("kernel_hidden", self.kernel_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// KL weight reached after warmup.
    pub kl_weight: f64,
    /// Fraction of `total_iters` over which the KL weight ramps linearly from 0.
    pub kl_warmup: f64,
    pub batch_size: usize,
    /// `(iteration, crop size)` pairs, sorted by iteration.
    pub schedule: Vec<(usize, usize)>,
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 2000,
            lr_start: 3e-4,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            kl_weight: 0.01,
            kl_warmup: 0.1,
            batch_size: 8,
            schedule: vec![(0, 16), (800, 24), (1600, 32)],
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Progressive schedule at 0 / 0.4 / 0.8 of `total_iters` with crops 16 → 24 → 32.
    /// Stages that would start on the same iteration keep only the last one.
    pub fn default_schedule(total_iters: usize) -> Vec<(usize, usize)> {
        let mut s: Vec<(usize, usize)> = Vec::new();
        for stage in [(0, 16), (total_iters * 2 / 5, 24), (total_iters * 4 / 5, 32)] {
            if s.last().is_some_and(|l| l.0 == stage.0) {
                s.pop();
            }
            s.push(stage);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "need lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.total_iters == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_iters and batch_size must be ≥ 1".into()));
        }
        if self.schedule.is_empty() || self.schedule[0].0 != 0 {
            return Err(Error::Config("schedule must start at iteration 0".into()));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("schedule iterations must be strictly increasing".into()));
        }
        if let Some(&(_, s)) = self.schedule.iter().find(|(_, s)| *s == 0 || s % 4 != 0) {
            return Err(Error::Config(format!("patch size {s} is not a positive multiple of 4")));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup) || self.kl_weight < 0.0 {
            return Err(Error::Config("kl_warmup must lie in [0, 1] and kl_weight ≥ 0".into()));
        }
        Ok(())
    }

    /// Crop size in effect at `iter`.
    pub fn patch_size_at(&self, iter: usize) -> usize {
        self.schedule
            .iter()
            .take_while(|(start, _)| *start <= iter)
            .last()
            .map(|&(_, s)| s)
            .unwrap_or(self.schedule[0].1)
    }

    /// KL weight in effect at `iter` (linear warmup, then constant).
    pub fn kl_weight_at(&self, iter: usize) -> f64 {
        let warm = self.kl_warmup * self.total_iters as f64;
        if warm <= 0.0 {
            self.kl_weight
        } else {
            self.kl_weight * ((iter as f64 + 1.0) / warm).min(1.0)
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key} = {value}: {e}"));
        macro_rules! parse {
            ($field:expr) => {
                $field = value.trim().parse().map_err(|e| bad(&e))?
            };
        }
        let m = &mut self.model;
        match key.trim() {
            "total_iters" => parse!(self.total_iters),
            "lr_start" => parse!(self.lr_start),
            "lr_end" => parse!(self.lr_end),
            "beta1" => parse!(self.beta1),
            "beta2" => parse!(self.beta2),
            "eps" => parse!(self.eps),
            "weight_decay" => parse!(self.weight_decay),
            "kl_weight" => parse!(self.kl_weight),
            "kl_warmup" => parse!(self.kl_warmup),
            "batch_size" => parse!(self.batch_size),
            "seed" => parse!(self.seed),
            "log_every" => parse!(self.log_every),
            "checkpoint_every" => parse!(self.checkpoint_every),
            "schedule" => self.schedule = parse_schedule(value)?,
            "c_base" => parse!(m.c_base),
            "blocks_per_extractor" => parse!(m.blocks_per_extractor),
            "attention_heads" => parse!(m.attention_heads),
            "ffn_mult" => parse!(m.ffn_mult),
            "c_z" => parse!(m.c_z),
            "d_k" => parse!(m.d_k),
            "num_k" => parse!(m.num_k),
            "size_k" => parse!(m.size_k),
            "dpe_width" => parse!(m.dpe_width),
            "decoder_width" => parse!(m.decoder_width),
            "kernel_hidden" => parse!(m.kernel_hidden),
            "use_nrtc" => parse!(m.use_nrtc),
            "use_mkcr" => parse!(m.use_mkcr),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut map = BTreeMap::new();
        let m = &self.model;
        let schedule = self
            .schedule
            .iter()
            .map(|(i, s)| format!("{i}:{s}"))
            .collect::<Vec<_>>()
            .join(", ");
        for (k, v) in [
            ("total_iters", self.total_iters.to_string()),
            ("lr_start", format!("{:e}", self.lr_start)),
            ("lr_end", format!("{:e}", self.lr_end)),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", format!("{:e}", self.eps)),
            ("weight_decay", format!("{:e}", self.weight_decay)),
            ("kl_weight", self.kl_weight.to_string()),
            ("kl_warmup", self.kl_warmup.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("schedule", schedule),
            ("seed", self.seed.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("c_base", m.c_base.to_string()),
            ("blocks_per_extractor", m.blocks_per_extractor.to_string()),
            ("attention_heads", m.attention_heads.to_string()),
            ("ffn_mult", m.ffn_mult.to_string()),
            ("c_z", m.c_z.to_string()),
            ("d_k", m.d_k.to_string()),
            ("num_k", m.num_k.to_string()),
            ("size_k", m.size_k.to_string()),
            ("dpe_width", m.dpe_width.to_string()),
            ("decoder_width", m.decoder_width.to_string()),
            ("kernel_hidden", m.kernel_hidden.to_string()),
            ("use_nrtc", m.use_nrtc.to_string()),
            ("use_mkcr", m.use_mkcr.to_string()),
        ] {
            map.insert(k, v);
        }
        let mut out = String::new();
        for (k, v) in map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a hash of the canonical text form.
    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn parse_schedule(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (i, s) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("schedule entry `{pair}` is not iter:size")))?;
            let i = i.trim().parse().map_err(|e| Error::Config(format!("schedule `{pair}`: {e}")))?;
            let s = s.trim().parse().map_err(|e| Error::Config(format!("schedule `{pair}`: {e}")))?;
            Ok((i, s))
        })
        .collect()
}
