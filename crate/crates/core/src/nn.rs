//! Named parameter storage and the small set of layers the denoiser is built from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// How freshly built weights are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Every weight random (biases and norm affines at their neutral values).
    Random,
    /// Output heads and residual-branch projections zeroed, so the whole
    /// denoiser starts as the identity map.
    IdentityAnchored,
}

#[derive(Clone, Copy, Debug)]
enum Fill {
    Uniform { fan_in: usize },
    /// Random under [`InitMode::Random`], zero under [`InitMode::IdentityAnchored`].
    Anchored { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Adds every parameter to `g` as a leaf. With `trainable = false` the
    /// leaves are constants and the graph keeps no backward caches.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradient of every parameter after `g.backward`, zeros where none flowed.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| {
                g.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); t.len()])
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<T: Real> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    mode: InitMode,
    prefix: Vec<String>,
}

impl<T: Real> Builder<T> {
    pub fn new(mode: InitMode, seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            mode,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn add(&mut self, name: &str, shape: &[usize], fill: Fill) -> ParamId {
        let full = self
            .prefix
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(name))
            .collect::<Vec<_>>()
            .join(".");
        let zero_anchor = matches!(fill, Fill::Anchored { .. }) && self.mode == InitMode::IdentityAnchored;
        let t = match fill {
            Fill::Zeros => Tensor::zeros(shape),
            Fill::Ones => Tensor::full(shape, T::one()),
            Fill::Anchored { .. } if zero_anchor => Tensor::zeros(shape),
            Fill::Uniform { fan_in } | Fill::Anchored { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
            }
        };
        assert!(!self.store.index.contains_key(&full), "duplicate parameter {full}");
        self.store.index.insert(full.clone(), self.store.len());
        self.store.names.push(full);
        self.store.tensors.push(t);
        ParamId(self.store.len() - 1)
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

/// Zero-padded 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    fn build<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, anchored: bool) -> Self {
        b.scoped(name, |b| {
            let fan_in = cin * k * k;
            let fill = if anchored {
                Fill::Anchored { fan_in }
            } else {
                Fill::Uniform { fan_in }
            };
            Conv {
                weight: b.add("weight", &[cout, cin, k, k], fill),
                bias: b.add("bias", &[cout], Fill::Zeros),
                stride,
                pad: k / 2,
            }
        })
    }

    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::build(b, name, cin, cout, k, stride, false)
    }

    /// Convolution whose weights are zeroed under identity-anchored initialization.
    pub fn head<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::build(b, name, cin, cout, k, 1, true)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

/// Fully connected layer on rank-1 inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    conv: Conv,
    out: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv::build(b, name, cin, cout, 1, 1, false),
            out: cout,
        }
    }

    pub fn head<T: Real>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv::build(b, name, cin, cout, 1, 1, true),
            out: cout,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let n = g.value(x).len();
        let x3 = g.reshape(x, &[n, 1, 1]);
        let y = self.conv.forward(g, p, x3);
        g.reshape(y, &[self.out])
    }

    pub fn weight(&self) -> ParamId {
        self.conv.weight
    }

    pub fn bias(&self) -> ParamId {
        self.conv.bias
    }
}

/// Per-pixel normalization across channels.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, c: usize) -> Self {
        b.scoped(name, |b| ChannelNorm {
            gamma: b.add("gamma", &[c], Fill::Ones),
            beta: b.add("beta", &[c], Fill::Zeros),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Transformer block with channel-wise multi-head self-attention and a gated
/// feed-forward network, both residual:
///
/// ```text
/// x = x + proj(attn(norm1(x)))
/// x = x + ffn_out(gelu(a) ⊙ b),  [a, b] = ffn_in(norm2(x))
/// ```
///
/// Attention runs across channels, so an `N`-pixel input costs `O(N·C²)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    channels: usize,
    heads: usize,
    hidden: usize,
    norm1: ChannelNorm,
    qkv: Conv,
    temperature: ParamId,
    proj: Conv,
    norm2: ChannelNorm,
    ffn_in: Conv,
    ffn_out: Conv,
}

impl TransformerBlock {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, channels: usize, heads: usize, ffn_mult: usize) -> Self {
        assert!(heads > 0 && channels % heads == 0, "{channels} channels not divisible by {heads} heads");
        let hidden = channels * ffn_mult;
        b.scoped(name, |b| TransformerBlock {
            channels,
            heads,
            hidden,
            norm1: ChannelNorm::new(b, "norm1", channels),
            qkv: Conv::new(b, "qkv", channels, 3 * channels, 1, 1),
            temperature: b.add("temperature", &[heads], Fill::Ones),
            proj: Conv::head(b, "proj", channels, channels, 1),
            norm2: ChannelNorm::new(b, "norm2", channels),
            ffn_in: Conv::new(b, "ffn_in", channels, 2 * hidden, 1, 1),
            ffn_out: Conv::head(b, "ffn_out", hidden, channels, 1),
        })
    }

    /// Returns the attention output (before projection) and, when requested,
    /// the per-head `d × d` attention matrices.
    fn attention<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, keep: Option<&mut Vec<Tensor<T>>>) -> Var {
        let (c, h, w) = g.value(x).dims3().expect("block input must be C×H×W");
        let n = h * w;
        let d = c / self.heads;
        let qkv = self.qkv.forward(g, p, x);
        let qkv = g.reshape(qkv, &[3 * c, n]);
        let temp = p.var(self.temperature);
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::new();
        for head in 0..self.heads {
            let q = g.slice(qkv, head * d, d);
            let k = g.slice(qkv, c + head * d, d);
            let v = g.slice(qkv, 2 * c + head * d, d);
            let q = g.row_l2_normalize(q);
            let k = g.row_l2_normalize(k);
            let logits = g.matmul(q, k, false, true);
            let t = g.slice(temp, head, 1);
            let logits = g.scale_by(logits, t);
            let attn = g.row_softmax(logits);
            if keep.is_some() {
                maps.push(g.value(attn).clone());
            }
            outs.push(g.matmul(attn, v, false, false));
        }
        if let Some(k) = keep {
            *k = maps;
        }
        let out = g.concat(&outs);
        g.reshape(out, &[c, h, w])
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        self.forward_inner(g, p, x, None)
    }

    fn forward_inner<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, keep: Option<&mut Vec<Tensor<T>>>) -> Var {
        debug_assert_eq!(g.shape(x)[0], self.channels);
        let n1 = self.norm1.forward(g, p, x);
        let a = self.attention(g, p, n1, keep);
        let a = self.proj.forward(g, p, a);
        let x = g.add(x, a);
        let n2 = self.norm2.forward(g, p, x);
        let f = self.ffn_in.forward(g, p, n2);
        let gate = g.slice(f, 0, self.hidden);
        let value = g.slice(f, self.hidden, self.hidden);
        let gate = g.gelu(gate);
        let f = g.mul(gate, value);
        let f = self.ffn_out.forward(g, p, f);
        g.add(x, f)
    }

    /// Per-head attention matrices for `x` (rows are queries).
    pub fn attention_maps<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut maps = Vec::new();
        self.forward_inner(&mut g, &p, xv, Some(&mut maps));
        maps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn builder_names_are_dotted_and_unique() {
        let mut b = Builder::<f32>::new(InitMode::Random, 0);
        b.scoped("enc", |b| Conv::new(b, "c1", 3, 4, 3, 1));
        let store = b.finish();
        assert_eq!(store.names(), &["enc.c1.weight", "enc.c1.bias"]);
        assert_eq!(store.by_name("enc.c1.weight").unwrap().shape(), &[4, 3, 3, 3]);
    }

    #[test]
    fn anchored_heads_are_zero_only_in_identity_mode() {
        for (mode, zero) in [(InitMode::Random, false), (InitMode::IdentityAnchored, true)] {
            let mut b = Builder::<f32>::new(mode, 1);
            let head = Conv::head(&mut b, "h", 4, 2, 3);
            let store = b.finish();
            assert_eq!(store.get(head.weight).data().iter().all(|&v| v == 0.0), zero);
        }
    }

    #[test]
    fn block_preserves_shape_and_attention_rows_sum_to_one() {
        let mut b = Builder::<f64>::new(InitMode::Random, 2);
        let block = TransformerBlock::new(&mut b, "blk", 16, 2, 2);
        let store = b.finish();
        let x = random_input(&[16, 16, 16], 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &p, xv);
        assert_eq!(g.shape(y), &[16, 16, 16]);
        let maps = block.attention_maps(&store, &x);
        assert_eq!(maps.len(), 2);
        for m in maps {
            assert_eq!(m.shape(), &[8, 8]);
            for row in m.data().chunks(8) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let mut b = Builder::<f64>::new(InitMode::Random, 4);
        let block = TransformerBlock::new(&mut b, "blk", 8, 2, 2);
        let mut store = b.finish();
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_input(&[8, 4, 4], 5);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &p, xv);
        assert_eq!(g.value(y), &x);
    }
}
