//! Conditional dual-branch generator.
//!
//! Given the condition map it produces a Gaussian prior over both latents,
//! decodes the noise latent into a full-resolution noise map and turns the
//! kernel latent into a softmax-weighted stack of small refinement kernels.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::dpe::{reparameterize, GaussianLatent, LatentPair, LatentVars};
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Conv, Linear, ParamStore};
use crate::nrtc::ConditionMap;
use crate::real::Real;
use crate::tensor::Tensor;

/// Tolerance used when validating that kernel weights lie on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-5;

/// `num_k` depthwise kernels (`[num_k, 3, s, s]`) and their mixing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelStack<T: Real> {
    kernels: Tensor<T>,
    weights: Tensor<T>,
}

impl<T: Real> KernelStack<T> {
    pub fn new(kernels: Tensor<T>, weights: Tensor<T>) -> Result<Self> {
        let &[n, c, s, s2] = kernels.shape() else {
            return Err(Error::dim(format!("kernel stack must be rank 4, got {:?}", kernels.shape())));
        };
        if c != 3 || s != s2 || n == 0 {
            return Err(Error::dim(format!("kernel stack shape {:?}", kernels.shape())));
        }
        if s % 2 == 0 {
            return Err(Error::param(format!("kernel size {s} must be odd")));
        }
        if weights.shape() != [n] {
            return Err(Error::dim(format!("{} weights for {n} kernels", weights.len())));
        }
        if !kernels.all_finite() {
            return Err(Error::param("kernels must be finite"));
        }
        let sum: f64 = weights.data().iter().map(|w| w.as_f64()).sum();
        if weights.data().iter().any(|w| !(w.as_f64() >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::param(format!("weights must be a probability vector (sum {sum})")));
        }
        Ok(Self { kernels, weights })
    }

    /// `num_k` delta kernels with uniform weights.
    pub fn identity(num_k: usize, size: usize) -> Result<Self> {
        let w = T::one() / T::from_usize(num_k.max(1)).unwrap();
        Self::new(delta_kernels(num_k, size), Tensor::full(&[num_k], w))
    }

    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn num_kernels(&self) -> usize {
        self.weights.len()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    /// Kernel `i` as a `[3, s, s]` depthwise kernel.
    pub fn kernel(&self, i: usize) -> Tensor<T> {
        let s = self.kernel_size();
        let step = 3 * s * s;
        Tensor::new(&[3, s, s], self.kernels.data()[i * step..(i + 1) * step].to_vec()).unwrap()
    }
}

/// `[num_k, 3, s, s]` stack of centred unit impulses.
pub fn delta_kernels<T: Real>(num_k: usize, size: usize) -> Tensor<T> {
    let centre = (size / 2) * size + size / 2;
    Tensor::from_fn(&[num_k, 3, size, size], |i| {
        if i % (size * size) == centre {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Generated noise map, same shape as the noisy input.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap<T: Real>(pub Tensor<T>);

impl<T: Real> NoiseMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// How latents are drawn from the prior at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SampleMode {
    Stochastic,
    #[default]
    Mean,
}

/// Draws both latents from the prior. `Mean` ignores the seed.
pub fn sample_prior<T: Real>(
    p_x: &GaussianLatent<T>,
    p_k: &GaussianLatent<T>,
    mode: SampleMode,
    seed: u64,
) -> LatentPair<T> {
    match mode {
        SampleMode::Mean => LatentPair {
            z_x: p_x.mean.clone(),
            z_k: p_k.mean.clone(),
        },
        SampleMode::Stochastic => LatentPair {
            z_x: reparameterize(p_x, seed),
            z_k: reparameterize(p_k, seed ^ 0x9e37_79b9_7f4a_7c15),
        },
    }
}

/// Graph handles of a generated kernel stack.
#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    /// Learned offsets from the delta kernel, `[num_k, 3, s, s]`.
    pub taps: Var,
    /// `taps + δ`
    pub kernels: Var,
    /// `[num_k]`, softmax-normalized
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cond_channels: usize,
    c_z: usize,
    d_k: usize,
    num_k: usize,
    size_k: usize,
    prior_x: Conv,
    prior_k: Linear,
    decoder: [Conv; 3],
    kernel_fc: [Linear; 2],
}

impl Generator {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let cc = cfg.cond_channels();
        let dw = cfg.decoder_width;
        let taps = cfg.num_k * 3 * cfg.size_k * cfg.size_k + cfg.num_k;
        b.scoped("cgen", |b| Generator {
            cond_channels: cc,
            c_z: cfg.c_z,
            d_k: cfg.d_k,
            num_k: cfg.num_k,
            size_k: cfg.size_k,
            prior_x: Conv::head(b, "prior_x", cc, 2 * cfg.c_z, 3),
            prior_k: Linear::head(b, "prior_k", cc, 2 * cfg.d_k),
            decoder: [
                Conv::new(b, "decoder.conv0", cfg.c_z + cc, 4 * dw, 3, 1),
                Conv::new(b, "decoder.conv1", dw, 4 * dw, 3, 1),
                Conv::head(b, "decoder.out", dw, 3, 3),
            ],
            kernel_fc: [
                Linear::new(b, "kernel.fc0", cc + cfg.d_k, cfg.kernel_hidden),
                Linear::head(b, "kernel.fc1", cfg.kernel_hidden, taps),
            ],
        })
    }

    pub fn prior_encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, cond: Var) -> (LatentVars, LatentVars) {
        let hx = self.prior_x.forward(g, p, cond);
        let px = LatentVars::split(g, hx);
        let pooled = g.global_avg_pool(cond);
        let hk = self.prior_k.forward(g, p, pooled);
        (px, LatentVars::split(g, hk))
    }

    /// `concat(z_x, cond) → conv → gelu → shuffle×2 → conv → gelu → shuffle×2 → conv`.
    pub fn decode_noise<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z_x: Var, cond: Var) -> Var {
        let h = g.concat(&[z_x, cond]);
        let h = self.decoder[0].forward(g, p, h);
        let h = g.gelu(h);
        let h = g.pixel_shuffle(h, 2);
        let h = self.decoder[1].forward(g, p, h);
        let h = g.gelu(h);
        let h = g.pixel_shuffle(h, 2);
        self.decoder[2].forward(g, p, h)
    }

    pub fn learn_kernels<T: Real>(&self, g: &mut Graph<T>, p: &Bound, z_k: Var, cond: Var) -> KernelVars {
        let pooled = g.global_avg_pool(cond);
        let h = g.concat(&[pooled, z_k]);
        let h = self.kernel_fc[0].forward(g, p, h);
        let h = g.gelu(h);
        let out = self.kernel_fc[1].forward(g, p, h);
        let s = self.size_k;
        let n_taps = self.num_k * 3 * s * s;
        let taps = g.slice(out, 0, n_taps);
        let taps = g.reshape(taps, &[self.num_k, 3, s, s]);
        let delta = g.constant(delta_kernels(self.num_k, s));
        let kernels = g.add(taps, delta);
        let logits = g.slice(out, n_taps, self.num_k);
        let logits = g.reshape(logits, &[1, self.num_k]);
        let w = g.row_softmax(logits);
        let weights = g.reshape(w, &[self.num_k]);
        KernelVars { taps, kernels, weights }
    }

    fn check_cond<T: Real>(&self, cond: &ConditionMap<T>) -> Result<(usize, usize)> {
        let (c, h, w) = cond.0.dims3()?;
        if c != self.cond_channels {
            return Err(Error::Config(format!(
                "condition map has {c} channels, generator expects {}",
                self.cond_channels
            )));
        }
        Ok((h, w))
    }

    /// Prior over `(z_x, z_k)` given a condition map.
    pub fn prior<T: Real>(
        &self,
        params: &ParamStore<T>,
        cond: &ConditionMap<T>,
    ) -> Result<(GaussianLatent<T>, GaussianLatent<T>)> {
        self.check_cond(cond)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let c = g.constant(cond.0.clone());
        let (px, pk) = self.prior_encode(&mut g, &p, c);
        Ok((px.read(&g), pk.read(&g)))
    }

    pub fn noise_map<T: Real>(
        &self,
        params: &ParamStore<T>,
        z_x: &Tensor<T>,
        cond: &ConditionMap<T>,
    ) -> Result<NoiseMap<T>> {
        let (h, w) = self.check_cond(cond)?;
        if z_x.shape() != [self.c_z, h, w] {
            return Err(Error::dim(format!(
                "z_x {:?} does not match condition map {h}×{w} with {} channels",
                z_x.shape(),
                self.c_z
            )));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let (z, c) = (g.constant(z_x.clone()), g.constant(cond.0.clone()));
        let out = self.decode_noise(&mut g, &p, z, c);
        Ok(NoiseMap(g.value(out).clone()))
    }

    pub fn kernels<T: Real>(
        &self,
        params: &ParamStore<T>,
        z_k: &Tensor<T>,
        cond: &ConditionMap<T>,
    ) -> Result<KernelStack<T>> {
        self.check_cond(cond)?;
        if z_k.shape() != [self.d_k] {
            return Err(Error::dim(format!("z_k {:?}, expected [{}]", z_k.shape(), self.d_k)));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let (z, c) = (g.constant(z_k.clone()), g.constant(cond.0.clone()));
        let kv = self.learn_kernels(&mut g, &p, z, c);
        KernelStack::new(g.value(kv.kernels).clone(), g.value(kv.weights).clone())
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (self.c_z, self.d_k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InitMode;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            c_base: 4,
            blocks_per_extractor: 1,
            attention_heads: 1,
            c_z: 3,
            d_k: 5,
            num_k: 4,
            dpe_width: 4,
            decoder_width: 4,
            kernel_hidden: 6,
            ..ModelConfig::default()
        }
    }

    fn build(mode: InitMode) -> (Generator, ParamStore<f64>) {
        let mut b = Builder::new(mode, 7);
        let gen = Generator::new(&mut b, &small_cfg());
        (gen, b.finish())
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        crate::dpe::standard_normal(shape, seed)
    }

    #[test]
    fn anchored_heads_give_standard_prior_and_identity_kernels() {
        let (gen, params) = build(InitMode::IdentityAnchored);
        let cond = ConditionMap(rand_tensor(&[16, 2, 2], 1));
        let (px, pk) = gen.prior(&params, &cond).unwrap();
        assert_eq!(px.shape(), [3, 2, 2]);
        assert_eq!(pk.shape(), [5]);
        assert!(px.mean.data().iter().chain(pk.log_variance.data()).all(|&v| v == 0.0));
        let ks = gen.kernels(&params, &rand_tensor(&[5], 2), &cond).unwrap();
        assert_eq!(ks.kernels(), &delta_kernels(4, 3));
        assert!(ks.weights().data().iter().all(|&w| w == 0.25));
        let nm = gen.noise_map(&params, &rand_tensor(&[3, 2, 2], 3), &cond).unwrap();
        assert_eq!(nm.tensor().shape(), [3, 8, 8]);
        assert!(nm.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_weights_stay_on_simplex() {
        let (gen, params) = build(InitMode::Random);
        for seed in 0..5 {
            let cond = ConditionMap(rand_tensor(&[16, 3, 2], seed));
            let ks = gen.kernels(&params, &rand_tensor(&[5], seed + 100), &cond).unwrap();
            assert!((ks.weights().sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (gen, params) = build(InitMode::Random);
        let bad = ConditionMap(rand_tensor(&[8, 2, 2], 0));
        assert!(matches!(gen.prior(&params, &bad), Err(Error::Config(_))));
        let cond = ConditionMap(rand_tensor(&[16, 2, 2], 0));
        assert!(matches!(
            gen.noise_map(&params, &rand_tensor(&[3, 4, 4], 1), &cond),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sample_modes() {
        let px = GaussianLatent::new(rand_tensor(&[3, 2, 2], 1), Tensor::full(&[3, 2, 2], -20.0)).unwrap();
        let pk = GaussianLatent::new(rand_tensor(&[5], 2), Tensor::full(&[5], -20.0)).unwrap();
        let m = sample_prior(&px, &pk, SampleMode::Mean, 0);
        assert_eq!((&m.z_x, &m.z_k), (&px.mean, &pk.mean));
        let s = sample_prior(&px, &pk, SampleMode::Stochastic, 9);
        // deviation is exp(-10)·|ε|
        let bound = (-10.0f64).exp() * 6.0;
        assert!(s.z_x.max_abs_diff(&m.z_x) < bound && s.z_k.max_abs_diff(&m.z_k) < bound);
        let pk1 = GaussianLatent::new(pk.mean.clone(), Tensor::zeros(&[5])).unwrap();
        assert_eq!(
            sample_prior(&px, &pk1, SampleMode::Stochastic, 4),
            sample_prior(&px, &pk1, SampleMode::Stochastic, 4)
        );
    }

    #[test]
    fn gradients_reach_latents_and_condition() {
        let (gen, params) = build(InitMode::Random);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let zx = g.param(rand_tensor(&[3, 2, 2], 1));
        let zk = g.param(rand_tensor(&[5], 2));
        let cond = g.param(rand_tensor(&[16, 2, 2], 3));
        let nm = gen.decode_noise(&mut g, &p, zx, cond);
        let kv = gen.learn_kernels(&mut g, &p, zk, cond);
        let a = g.mean(nm);
        let kk = g.mean(kv.kernels);
        let b = g.add(a, kk);
        let w = g.slice(kv.weights, 0, 1);
        let loss = g.add(b, w);
        g.backward(loss);
        for v in [zx, zk, cond] {
            assert!(g.grad(v).unwrap().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn kernel_stack_validation() {
        assert!(KernelStack::<f64>::identity(3, 3).is_ok());
        assert!(matches!(
            KernelStack::new(delta_kernels::<f64>(2, 4), Tensor::full(&[2], 0.5)),
            Err(Error::Parameter(_))
        ));
        assert!(KernelStack::new(delta_kernels::<f64>(2, 3), Tensor::full(&[2], 0.6)).is_err());
    }
}
