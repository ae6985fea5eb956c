//! Dual-branch posterior estimator and the diagonal-Gaussian helpers shared
//! with the prior heads.
//!
//! The estimator only runs during training: it encodes the clean patch into
//! a spatial posterior for the noise latent and a vector posterior for the
//! kernel latent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{kl_elem, Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Conv, Linear};
use crate::real::Real;
use crate::tensor::Tensor;

/// Log-variances are clamped to this range before exponentiation.
pub const LOG_VAR_LIMIT: f64 = 20.0;

/// Diagonal Gaussian in mean / log-variance form.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent<T: Real> {
    pub mean: Tensor<T>,
    pub log_variance: Tensor<T>,
}

impl<T: Real> GaussianLatent<T> {
    pub fn new(mean: Tensor<T>, log_variance: Tensor<T>) -> Result<Self> {
        if mean.shape() != log_variance.shape() {
            return Err(Error::dim(format!(
                "mean {:?} and log-variance {:?} differ in shape",
                mean.shape(),
                log_variance.shape()
            )));
        }
        if !log_variance.all_finite() {
            return Err(Error::param("log-variance must be finite"));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn standard(shape: &[usize]) -> Self {
        Self {
            mean: Tensor::zeros(shape),
            log_variance: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }
}

/// Latent samples for the noise map (`[C_z, H/4, W/4]`) and the kernels (`[d_k]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair<T: Real> {
    pub z_x: Tensor<T>,
    pub z_k: Tensor<T>,
}

/// Graph handles of a Gaussian latent.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mean: Var,
    pub log_var: Var,
}

impl LatentVars {
    /// Splits a head output whose leading axis stacks `[mean; log_var]`, clamping the log-variance.
    pub(crate) fn split<T: Real>(g: &mut Graph<T>, head: Var) -> Self {
        let c = g.shape(head)[0] / 2;
        let mean = g.slice(head, 0, c);
        let lv = g.slice(head, c, c);
        let log_var = g.clamp(lv, T::lit(-LOG_VAR_LIMIT), T::lit(LOG_VAR_LIMIT));
        Self { mean, log_var }
    }

    pub fn read<T: Real>(&self, g: &Graph<T>) -> GaussianLatent<T> {
        GaussianLatent {
            mean: g.value(self.mean).clone(),
            log_variance: g.value(self.log_var).clone(),
        }
    }

    /// `mean + exp(0.5·log_var) ⊙ eps`, differentiable in mean and log-variance.
    pub fn sample<T: Real>(&self, g: &mut Graph<T>, eps: Tensor<T>) -> Var {
        let e = g.constant(eps);
        let half = g.scale(self.log_var, T::lit(0.5));
        let std = g.exp(half);
        let noise = g.mul(std, e);
        g.add(self.mean, noise)
    }
}

/// Standard-normal tensor drawn from a ChaCha8 stream seeded by `seed`.
pub fn standard_normal<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::lit(v)
    })
}

/// Draws `mean + exp(0.5·clamp(log_variance)) ⊙ ε` with `ε ~ N(0, I)` from `seed`.
pub fn reparameterize<T: Real>(g: &GaussianLatent<T>, seed: u64) -> Tensor<T> {
    let eps = standard_normal::<T>(g.shape(), seed);
    let lim = T::lit(LOG_VAR_LIMIT);
    let data = g
        .mean
        .data()
        .iter()
        .zip(g.log_variance.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (T::lit(0.5) * lv.max(-lim).min(lim)).exp() * e)
        .collect();
    Tensor::new(g.shape(), data).expect("same shape")
}

/// `KL(q ‖ p)` summed over all elements of two diagonal Gaussians.
pub fn kl_divergence<T: Real>(q: &GaussianLatent<T>, p: &GaussianLatent<T>) -> Result<f64> {
    if q.shape() != p.shape() {
        return Err(Error::dim(format!(
            "kl_divergence shape mismatch {:?} vs {:?}",
            q.shape(),
            p.shape()
        )));
    }
    let f = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let (mq, lq, mp, lp) = (f(&q.mean), f(&q.log_variance), f(&p.mean), f(&p.log_variance));
    Ok((0..mq.len()).map(|i| kl_elem(mq[i], lq[i], mp[i], lp[i])).sum())
}

#[derive(Clone, Debug)]
pub struct Dpe {
    x_convs: [Conv; 2],
    x_head: Conv,
    k_convs: [Conv; 2],
    k_head: Linear,
}

impl Dpe {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let w = cfg.dpe_width;
        b.scoped("dpe", |b| Dpe {
            x_convs: [
                Conv::new(b, "x.conv0", 3, w, 3, 2),
                Conv::new(b, "x.conv1", w, w, 3, 2),
            ],
            x_head: Conv::head(b, "x.head", w, 2 * cfg.c_z, 1),
            k_convs: [
                Conv::new(b, "k.conv0", 3, w, 3, 2),
                Conv::new(b, "k.conv1", w, 2 * w, 3, 2),
            ],
            k_head: Linear::head(b, "k.head", 2 * w, 2 * cfg.d_k),
        })
    }

    /// Posterior over the noise latent: two stride-2 conv stages then a 1×1 head.
    pub fn encode_x<T: Real>(&self, g: &mut Graph<T>, p: &Bound, clean: Var) -> LatentVars {
        let mut h = clean;
        for conv in &self.x_convs {
            let c = conv.forward(g, p, h);
            h = g.gelu(c);
        }
        let head = self.x_head.forward(g, p, h);
        LatentVars::split(g, head)
    }

    /// Posterior over the kernel latent: two stride-2 conv stages, global pooling, linear head.
    pub fn encode_k<T: Real>(&self, g: &mut Graph<T>, p: &Bound, clean: Var) -> LatentVars {
        let mut h = clean;
        for conv in &self.k_convs {
            let c = conv.forward(g, p, h);
            h = g.gelu(c);
        }
        let pooled = g.global_avg_pool(h);
        let head = self.k_head.forward(g, p, pooled);
        LatentVars::split(g, head)
    }
}
