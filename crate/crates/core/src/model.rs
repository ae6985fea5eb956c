//! The assembled denoiser: conditioner, posterior estimator, generator and refiner.

use crate::autograd::{Graph, Var};
use crate::cgen::{sample_prior, Generator, KernelStack, NoiseMap, SampleMode};
use crate::config::ModelConfig;
use crate::dpe::{standard_normal, Dpe, GaussianLatent, LatentPair, LatentVars};
use crate::error::{Error, Result};
use crate::imaging::ImagePatch;
use crate::mkcr::refine_unclamped;
use crate::nn::{Bound, Builder, InitMode, ParamStore};
use crate::nrtc::{check_divisible, ConditionMap, Conditioner, Nrtc, PlainConditioner};
use crate::real::Real;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Scalar loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kl_x: f64,
    pub kl_k: f64,
    pub total: f64,
}

/// Graph handles produced by one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainVars {
    pub refined: Var,
    pub rec: Var,
    pub kl_x: Var,
    pub kl_k: Var,
    pub total: Var,
}

/// Every intermediate of one inference pass.
#[derive(Clone, Debug)]
pub struct Inference<T: Real> {
    pub cond: ConditionMap<T>,
    pub prior_x: GaussianLatent<T>,
    pub prior_k: GaussianLatent<T>,
    pub latents: LatentPair<T>,
    pub noise: NoiseMap<T>,
    pub kernels: KernelStack<T>,
    /// `clamp(noisy − noise)`
    pub coarse: Tensor<T>,
    /// Final output.
    pub refined: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Denoiser<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    conditioner: Conditioner,
    dpe: Dpe,
    generator: Generator,
}

impl<T: Real> Denoiser<T> {
    pub fn new(config: ModelConfig, mode: InitMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(mode, seed);
        let conditioner = if config.use_nrtc {
            Conditioner::Nrtc(Nrtc::new(&mut b, &config))
        } else {
            Conditioner::Plain(PlainConditioner::new(&mut b, &config))
        };
        let dpe = Dpe::new(&mut b, &config);
        let generator = Generator::new(&mut b, &config);
        Ok(Self {
            config,
            params: b.finish(),
            conditioner,
            dpe,
            generator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.conditioner
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            config: self.config.clone(),
            params: self.params.cast(),
            conditioner: self.conditioner.clone(),
            dpe: self.dpe.clone(),
            generator: self.generator.clone(),
        }
    }

    /// Condition map of a `3×H×W` input (`H`, `W` divisible by 4).
    pub fn condition(&self, noisy: &Tensor<T>) -> Result<ConditionMap<T>> {
        check_divisible(noisy.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(noisy.clone());
        let c = self.conditioner.forward(&mut g, &p, x);
        Ok(ConditionMap(g.value(c).clone()))
    }

    /// Posterior latents of a clean `3×H×W` patch.
    pub fn posterior(&self, clean: &Tensor<T>) -> Result<(GaussianLatent<T>, GaussianLatent<T>)> {
        check_divisible(clean.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(clean.clone());
        let qx = self.dpe.encode_x(&mut g, &p, x);
        let qk = self.dpe.encode_k(&mut g, &p, x);
        Ok((qx.read(&g), qk.read(&g)))
    }

    pub fn infer(&self, noisy: &Tensor<T>, mode: SampleMode, seed: u64) -> Result<Inference<T>> {
        let cond = self.condition(noisy)?;
        let (prior_x, prior_k) = self.generator.prior(&self.params, &cond)?;
        let latents = sample_prior(&prior_x, &prior_k, mode, seed);
        let noise = self.generator.noise_map(&self.params, &latents.z_x, &cond)?;
        let kernels = self.generator.kernels(&self.params, &latents.z_k, &cond)?;
        let coarse = noisy.zip_map(noise.tensor(), |a, b| (a - b).max(T::zero()).min(T::one()))?;
        let refined = if self.config.use_mkcr {
            refine_unclamped(&coarse, &kernels)?.map(|v| v.max(T::zero()).min(T::one()))
        } else {
            coarse.clone()
        };
        Ok(Inference {
            cond,
            prior_x,
            prior_k,
            latents,
            noise,
            kernels,
            coarse,
            refined,
        })
    }

    /// Training forward pass for one `(clean, noisy)` pair.
    ///
    /// `seed` drives the reparameterization noise; `beta` weights both KL terms.
    pub fn train_forward(&self, g: &mut Graph<T>, p: &Bound, clean: Var, noisy: Var, seed: u64, beta: T) -> TrainVars {
        let cond = self.conditioner.forward(g, p, noisy);
        let qx = self.dpe.encode_x(g, p, clean);
        let (px, pk) = self.generator.prior_encode(g, p, cond);
        let zx = qx.sample(g, standard_normal(g.shape(qx.mean), derive_seed(seed, 0)));
        let noise = self.generator.decode_noise(g, p, zx, cond);
        let diff = g.sub(noisy, noise);
        let coarse = g.clamp(diff, T::zero(), T::one());
        let kl = |g: &mut Graph<T>, q: LatentVars, pr: LatentVars| g.kl_mean(q.mean, q.log_var, pr.mean, pr.log_var);
        let kl_x = kl(g, qx, px);
        let (refined, kl_k) = if self.config.use_mkcr {
            let qk = self.dpe.encode_k(g, p, clean);
            let zk = qk.sample(g, standard_normal(g.shape(qk.mean), derive_seed(seed, 1)));
            let kv = self.generator.learn_kernels(g, p, zk, cond);
            let offset = g.weighted_sum(kv.taps, kv.weights);
            let delta = g.depthwise_replicate(coarse, offset);
            let r = g.add(coarse, delta);
            (g.clamp(r, T::zero(), T::one()), kl(g, qk, pk))
        } else {
            (coarse, g.constant(Tensor::scalar(T::zero())))
        };
        let rec = g.mean_abs_diff(refined, clean);
        let kls = g.add(kl_x, kl_k);
        let weighted = g.scale(kls, beta);
        let total = g.add(rec, weighted);
        TrainVars {
            refined,
            rec,
            kl_x,
            kl_k,
            total,
        }
    }

    /// Batch-mean loss and, when `grads` is set, batch-mean parameter gradients.
    ///
    /// Each pair gets its own graph; sample `i` uses seed `derive_seed(seed, i)`.
    /// `total` is recomputed in double precision from the averaged terms.
    pub fn loss_and_grads(
        &self,
        batch: &[(Tensor<T>, Tensor<T>)],
        seed: u64,
        beta: f64,
        grads: bool,
    ) -> Result<(LossBreakdown, Option<Vec<Vec<T>>>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut acc = LossBreakdown::default();
        let mut sum: Option<Vec<Vec<T>>> = None;
        for (i, (clean, noisy)) in batch.iter().enumerate() {
            if clean.shape() != noisy.shape() {
                return Err(Error::Data(format!(
                    "pair {i}: clean {:?} vs noisy {:?}",
                    clean.shape(),
                    noisy.shape()
                )));
            }
            check_divisible(clean.shape())?;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, grads);
            let c = g.constant(clean.clone());
            let n = g.constant(noisy.clone());
            let tv = self.train_forward(&mut g, &p, c, n, derive_seed(seed, i as u64), T::lit(beta));
            let read = |v: Var| g.value(v).data()[0].as_f64();
            acc.rec += read(tv.rec);
            acc.kl_x += read(tv.kl_x);
            acc.kl_k += read(tv.kl_k);
            if grads {
                g.backward(tv.total);
                let gs = self.params.collect_grads(&g, &p);
                match sum.as_mut() {
                    None => sum = Some(gs),
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(gs) {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        acc.rec /= n;
        acc.kl_x /= n;
        acc.kl_k /= n;
        acc.total = acc.rec + beta * (acc.kl_x + acc.kl_k);
        let inv = T::lit(1.0 / n);
        if let Some(s) = sum.as_mut() {
            s.iter_mut().flatten().for_each(|v| *v *= inv);
        }
        Ok((acc, sum))
    }
}

impl Denoiser<f32> {
    /// Deterministic (prior-mean) denoising of an arbitrary-size patch.
    ///
    /// Inputs whose sides are not multiples of 4 are replicate-padded on the
    /// bottom/right and cropped back.
    pub fn denoise(&self, noisy: &ImagePatch) -> Result<ImagePatch> {
        let (h, w) = (noisy.height(), noisy.width());
        let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let input = if (ph, pw) == (h, w) {
            noisy.clone()
        } else {
            noisy.pad_replicate(ph, pw)
        };
        let out = self.infer(input.tensor(), SampleMode::Mean, 0)?;
        let out = ImagePatch::new(out.refined)?;
        if (ph, pw) == (h, w) {
            Ok(out)
        } else {
            out.crop(0, 0, h, w)
        }
    }
}
