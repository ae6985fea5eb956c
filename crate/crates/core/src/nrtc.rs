//! Nested residual Transformer conditionalizer.
//!
//! Compresses a noisy `3×H×W` patch into a `4·C×(H/4)×(W/4)` condition map:
//!
//! ```text
//! C0   = expand(n)
//! C1   = down0(extract0(C0) + C0) + skip0(unshuffle2(C0))
//! C2   = down1(extract1(C1) + C1) + skip1(unshuffle2(C1))
//! cond = C2 + skip4(unshuffle4(C0))
//! ```
//!
//! Pixel-unshuffle multiplies channels by 4 (or 16) while each downsampling
//! step only doubles them, so every skip path carries a learned 1×1
//! projection to make the sums shape-valid.

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, Conv, ParamStore, TransformerBlock};
use crate::real::Real;
use crate::tensor::Tensor;

/// Output of the conditionalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMap<T: Real>(pub Tensor<T>);

impl<T: Real> ConditionMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct Nrtc {
    c_base: usize,
    expand: Conv,
    extract: [Vec<TransformerBlock>; 2],
    down: [Conv; 2],
    skip2: [Conv; 2],
    skip4: Conv,
}

impl Nrtc {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let c = cfg.c_base;
        b.scoped("nrtc", |b| {
            let expand = Conv::new(b, "expand", 3, c, 3, 1);
            let level = |b: &mut Builder<T>, i: usize, ch: usize| {
                let blocks = (0..cfg.blocks_per_extractor)
                    .map(|j| TransformerBlock::new(b, &format!("extract{i}.block{j}"), ch, cfg.attention_heads, cfg.ffn_mult))
                    .collect::<Vec<_>>();
                let down = Conv::new(b, &format!("down{i}"), ch, 2 * ch, 3, 2);
                let skip = Conv::new(b, &format!("skip{i}"), 4 * ch, 2 * ch, 1, 1);
                (blocks, down, skip)
            };
            let (e0, d0, s0) = level(b, 0, c);
            let (e1, d1, s1) = level(b, 1, 2 * c);
            let skip4 = Conv::new(b, "skip4", 16 * c, 4 * c, 1, 1);
            Nrtc {
                c_base: c,
                expand,
                extract: [e0, e1],
                down: [d0, d1],
                skip2: [s0, s1],
                skip4,
            }
        })
    }

    /// `3×H×W → C×H×W` learned 3×3 convolution.
    pub fn channel_expand<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        self.expand.forward(g, p, x)
    }

    /// Stack of Transformer blocks at `level` (0 or 1); shape preserving.
    pub fn conditional_extract<T: Real>(&self, g: &mut Graph<T>, p: &Bound, level: usize, x: Var) -> Var {
        self.extract[level]
            .iter()
            .fold(x, |h, block| block.forward(g, p, h))
    }

    /// Stride-2 3×3 convolution: `C×H×W → 2C×(H/2)×(W/2)`.
    pub fn downsample<T: Real>(&self, g: &mut Graph<T>, p: &Bound, level: usize, x: Var) -> Var {
        self.down[level].forward(g, p, x)
    }

    /// Pixel-unshuffle by 2 followed by the level's 1×1 projection.
    pub fn skip<T: Real>(&self, g: &mut Graph<T>, p: &Bound, level: usize, x: Var) -> Var {
        let u = g.pixel_unshuffle(x, 2);
        self.skip2[level].forward(g, p, u)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let c0 = self.channel_expand(g, p, x);
        let mut h = c0;
        for level in 0..2 {
            let e = self.conditional_extract(g, p, level, h);
            let e = g.add(e, h);
            let d = self.downsample(g, p, level, e);
            let s = self.skip(g, p, level, h);
            h = g.add(d, s);
        }
        let u4 = g.pixel_unshuffle(c0, 4);
        let s4 = self.skip4.forward(g, p, u4);
        g.add(h, s4)
    }

    fn check_level<T: Real>(&self, level: usize, x: &Tensor<T>, need_even: bool) -> Result<()> {
        if level > 1 {
            return Err(Error::Parameter(format!("level {level} (expected 0 or 1)")));
        }
        let c = self.c_base << level;
        match x.shape() {
            &[ch, h, w] if ch == c && (!need_even || (h % 2 == 0 && w % 2 == 0)) => Ok(()),
            s if need_even => Err(Error::Dimension(format!("expected {c}×H×W with even H, W, got {s:?}"))),
            s => Err(Error::Dimension(format!("expected {c}×H×W, got {s:?}"))),
        }
    }

    /// [`Nrtc::channel_expand`] on a concrete tensor.
    pub fn expand_tensor<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match x.shape() {
            &[3, _, _] => Ok(eval(params, x, |g, p, v| self.channel_expand(g, p, v))),
            s => Err(Error::Dimension(format!("expected 3×H×W, got {s:?}"))),
        }
    }

    /// [`Nrtc::conditional_extract`] on a concrete tensor.
    pub fn extract_tensor<T: Real>(&self, params: &ParamStore<T>, level: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_level(level, x, false)?;
        Ok(eval(params, x, |g, p, v| self.conditional_extract(g, p, level, v)))
    }

    /// [`Nrtc::downsample`] on a concrete tensor.
    pub fn downsample_tensor<T: Real>(&self, params: &ParamStore<T>, level: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_level(level, x, true)?;
        Ok(eval(params, x, |g, p, v| self.downsample(g, p, level, v)))
    }

    /// [`Nrtc::skip`] on a concrete tensor.
    pub fn skip_tensor<T: Real>(&self, params: &ParamStore<T>, level: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_level(level, x, true)?;
        Ok(eval(params, x, |g, p, v| self.skip(g, p, level, v)))
    }

    /// Final `16C → 4C` projection applied after the 4× unshuffle of the expanded input.
    pub fn skip4_tensor<T: Real>(&self, params: &ParamStore<T>, unshuffled: &Tensor<T>) -> Result<Tensor<T>> {
        match unshuffled.shape() {
            &[c, _, _] if c == 16 * self.c_base => Ok(eval(params, unshuffled, |g, p, v| self.skip4.forward(g, p, v))),
            s => Err(Error::Dimension(format!("expected {}×H×W, got {s:?}", 16 * self.c_base))),
        }
    }

    /// Full conditionalizer on a `3×H×W` tensor with `H`, `W` divisible by 4.
    pub fn forward_tensor<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<ConditionMap<T>> {
        check_divisible(x.shape())?;
        Ok(ConditionMap(eval(params, x, |g, p, v| self.forward(g, p, v))))
    }
}

fn eval<T: Real>(
    params: &ParamStore<T>,
    x: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, &Bound, Var) -> Var,
) -> Tensor<T> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let v = g.constant(x.clone());
    let out = f(&mut g, &p, v);
    g.value(out).clone()
}

/// Non-Transformer conditioner used by the conditionalizer ablation:
/// pixel-unshuffle by 4 then a 3×3 convolution to the condition width.
#[derive(Clone, Debug)]
pub struct PlainConditioner {
    conv: Conv,
}

impl PlainConditioner {
    pub fn new<T: Real>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        b.scoped("plain_cond", |b| PlainConditioner {
            conv: Conv::new(b, "conv", 48, cfg.cond_channels(), 3, 1),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let u = g.pixel_unshuffle(x, 4);
        self.conv.forward(g, p, u)
    }
}

#[derive(Clone, Debug)]
pub enum Conditioner {
    Nrtc(Nrtc),
    Plain(PlainConditioner),
}

impl Conditioner {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        match self {
            Conditioner::Nrtc(n) => n.forward(g, p, x),
            Conditioner::Plain(c) => c.forward(g, p, x),
        }
    }
}

pub(crate) fn check_divisible(shape: &[usize]) -> Result<()> {
    match shape {
        &[3, h, w] if h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => Ok(()),
        s => Err(Error::Dimension(format!(
            "input must be 3×H×W with H and W divisible by 4, got {s:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Denoiser;
    use crate::nn::InitMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Denoiser<f64>, Nrtc) {
        let m = Denoiser::<f64>::new(ModelConfig::default(), InitMode::Random, 3).unwrap();
        let n = match m.conditioner() {
            Conditioner::Nrtc(n) => n.clone(),
            Conditioner::Plain(_) => unreachable!(),
        };
        (m, n)
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn stage_shapes() {
        let (m, n) = setup();
        let p = m.params();
        let c0 = n.expand_tensor(p, &rand_t(&[3, 32, 32], 0)).unwrap();
        assert_eq!(c0.shape(), &[16, 32, 32]);
        assert_eq!(n.extract_tensor(p, 0, &c0).unwrap().shape(), &[16, 32, 32]);
        assert_eq!(n.downsample_tensor(p, 0, &c0).unwrap().shape(), &[32, 16, 16]);
        assert_eq!(n.skip_tensor(p, 0, &c0).unwrap().shape(), &[32, 16, 16]);
        assert_eq!(n.forward_tensor(p, &rand_t(&[3, 32, 32], 1)).unwrap().tensor().shape(), &[64, 8, 8]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (mut m, n) = setup();
        for t in m.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = rand_t(&[3, 16, 16], 2);
        assert!(n.expand_tensor(m.params(), &x).unwrap().data().iter().all(|&v| v == 0.0));
        let c = rand_t(&[16, 16, 16], 3);
        assert!(n.downsample_tensor(m.params(), 0, &c).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_shapes_are_dimension_errors() {
        let (m, n) = setup();
        let p = m.params();
        assert!(matches!(n.expand_tensor(p, &rand_t(&[4, 8, 8], 0)), Err(Error::Dimension(_))));
        assert!(matches!(n.downsample_tensor(p, 0, &rand_t(&[16, 7, 8], 0)), Err(Error::Dimension(_))));
        assert!(matches!(n.extract_tensor(p, 1, &rand_t(&[16, 8, 8], 0)), Err(Error::Dimension(_))));
        assert!(matches!(n.forward_tensor(p, &rand_t(&[3, 30, 32], 0)), Err(Error::Dimension(_))));
    }

    #[test]
    fn deterministic() {
        let (m, n) = setup();
        let x = rand_t(&[3, 16, 16], 9);
        assert_eq!(n.forward_tensor(m.params(), &x).unwrap(), n.forward_tensor(m.params(), &x).unwrap());
    }
}
