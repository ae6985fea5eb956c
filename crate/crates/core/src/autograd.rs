//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep in
//! [`Graph::backward`] visits each node after all of its consumers.
//! Inputs that carry no gradient (images, noise draws) are added with
//! [`Graph::constant`]; nothing is cached for subgraphs built only from
//! constants.

use crate::imaging::{self, replicate_index};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Option<Vec<T>>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy {
        x: Var,
        s: Var,
    },
    Exp(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Gelu(Var),
    Reshape(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Unshuffle {
        x: Var,
        alpha: usize,
    },
    Shuffle {
        x: Var,
        alpha: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    RowL2Norm {
        x: Var,
        norms: Vec<T>,
    },
    RowSoftmax(Var),
    GlobalAvgPool(Var),
    WeightedSum {
        stack: Var,
        w: Var,
    },
    DepthwiseReplicate {
        x: Var,
        k: Var,
    },
    KlMean {
        mq: Var,
        lq: Var,
        mp: Var,
        lp: Var,
    },
    MeanAbsDiff(Var, Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let n = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let n = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let s = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = s * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + T::lit(3.0) * c * x * x);
    (y, dy)
}

/// Elementwise KL(q ‖ p) between diagonal Gaussians in log-variance form.
pub fn kl_elem<T: Real>(mq: T, lq: T, mp: T, lp: T) -> T {
    let d = mq - mp;
    let r = lq - lp;
    // expm1(r) ≥ r holds after rounding, so the sum stays nonnegative.
    T::lit(0.5) * ((r.exp_m1() - r) + d * d * (-lp).exp())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Zero-padded 2-D convolution of a `[C, H, W]` input with `[O, C, k, k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).dims3().expect("conv2d input must be C×H×W");
        let ws = self.shape(w).to_vec();
        assert!(ws.len() == 4 && ws[1] == c && ws[2] == ws[3], "conv2d weight {ws:?} for {c} channels");
        let (o, k) = (ws[0], ws[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let n = ho * wo;
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols = if direct {
            None
        } else {
            Some(im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo))
        };
        let mut out = vec![T::zero(); o * n];
        if let Some(bv) = b {
            let bias = self.value(bv).data();
            for (oc, chunk) in out.chunks_mut(n).enumerate() {
                chunk.fill(bias[oc]);
            }
        }
        {
            let src = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            let ckk = c * k * k;
            T::gemm(
                o,
                ckk,
                n,
                T::one(),
                self.value(w).data(),
                (ckk as isize, 1),
                src,
                (n as isize, 1),
                T::one(),
                &mut out,
                (n as isize, 1),
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let keep = if self.rg(w) { cols } else { None };
        self.push(
            Tensor::new(&[o, ho, wo], out).unwrap(),
            Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
                cols: keep,
            },
            rg,
        )
    }

    /// Matrix product of rank-2 tensors, optionally transposing either side.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (m, k, sa) = mat_view(self.shape(a), ta);
        let (k2, n, sb) = mat_view(self.shape(b), tb);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            sa,
            self.value(b).data(),
            sb,
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul { a, b, ta, tb }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), f)
            .expect("elementwise shape mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(v, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    /// Multiplies every element by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by expects a scalar");
        let f = self.value(s).data()[0];
        let v = self.value(x).map(|e| e * f);
        let rg = self.rg(x) || self.rg(s);
        self.push(v, Op::ScaleBy { x, s }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    /// Clamp into `[lo, hi]`; the gradient passes wherever the input lies inside the closed interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(v, Op::Clamp { x, lo, hi }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| gelu_parts(e).0);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape size mismatch");
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Leading-axis slice `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).channels(start, len);
        let rg = self.rg(x);
        self.push(v, Op::Slice { x, start }, rg)
    }

    /// Leading-axis concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&refs).expect("concat shape mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::Concat(parts.to_vec()), rg)
    }

    pub fn pixel_unshuffle(&mut self, x: Var, alpha: usize) -> Var {
        let v = imaging::pixel_unshuffle(self.value(x), alpha).expect("pixel_unshuffle dims");
        let rg = self.rg(x);
        self.push(v, Op::Unshuffle { x, alpha }, rg)
    }

    pub fn pixel_shuffle(&mut self, x: Var, alpha: usize) -> Var {
        let v = imaging::pixel_shuffle(self.value(x), alpha).expect("pixel_shuffle dims");
        let rg = self.rg(x);
        self.push(v, Op::Shuffle { x, alpha }, rg)
    }

    /// Per-pixel normalization across channels of a `[C, H, W]` tensor with
    /// per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (c, h, w) = self.value(x).dims3().expect("layer_norm input must be C×H×W");
        let n = h * w;
        let eps = T::lit(1e-5);
        let cf = T::from_usize(c).unwrap();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut mean = vec![T::zero(); n];
        for ci in 0..c {
            add_into(&mut mean, &xs[ci * n..(ci + 1) * n]);
        }
        mean.iter_mut().for_each(|m| *m /= cf);
        let mut var = vec![T::zero(); n];
        for ci in 0..c {
            for p in 0..n {
                let d = xs[ci * n + p] - mean[p];
                var[p] += d * d;
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / cf + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); c * n];
        let mut out = vec![T::zero(); c * n];
        for ci in 0..c {
            for p in 0..n {
                let i = ci * n + p;
                xhat[i] = (xs[i] - mean[p]) * inv_std[p];
                out[i] = g[ci] * xhat[i] + bt[ci];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        self.push(
            Tensor::new(&[c, h, w], out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// L2-normalizes each row of a rank-2 tensor.
    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        let (m, n) = mat_dims(self.shape(x));
        let eps = T::lit(1e-12);
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xs.chunks(n) {
            let nr = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = nr.max(eps);
            norms.push(nr);
            out.extend(row.iter().map(|&v| v / d));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::RowL2Norm { x, norms }, rg)
    }

    /// Softmax over the last axis of a rank-2 tensor.
    pub fn row_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (_, n) = mat_dims(&shape);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - mx).exp()));
            let s: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out).unwrap(), Op::RowSoftmax(x), rg)
    }

    /// `[C, ...]` → `[C]` mean over trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let c = self.shape(x)[0];
        let n = self.value(x).len() / c;
        let nf = T::from_usize(n).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|ch| ch.iter().copied().sum::<T>() / nf)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[c], out).unwrap(), Op::GlobalAvgPool(x), rg)
    }

    /// `Σ_i w[i] · stack[i]` for a stack with leading axis `n` and weights `[n]`.
    pub fn weighted_sum(&mut self, stack: Var, w: Var) -> Var {
        let s = self.value(stack);
        let n = s.shape()[0];
        assert_eq!(self.value(w).len(), n, "weighted_sum weight count");
        let inner = s.len() / n;
        let mut out = vec![T::zero(); inner];
        for (i, &wi) in self.value(w).data().iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&s.data()[i * inner..(i + 1) * inner]) {
                *o += wi * v;
            }
        }
        let shape = s.shape()[1..].to_vec();
        let rg = self.rg(stack) || self.rg(w);
        self.push(Tensor::new(&shape, out).unwrap(), Op::WeightedSum { stack, w }, rg)
    }

    /// Depthwise same-size correlation with replicate padding (`k`: `[C, s, s]`).
    pub fn depthwise_replicate(&mut self, x: Var, k: Var) -> Var {
        let v = imaging::conv_same(self.value(x), self.value(k)).expect("depthwise kernel shape");
        let rg = self.rg(x) || self.rg(k);
        self.push(v, Op::DepthwiseReplicate { x, k }, rg)
    }

    /// Mean over elements of KL(N(mq, e^lq) ‖ N(mp, e^lp)).
    pub fn kl_mean(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let n = self.value(mq).len();
        for v in [lq, mp, lp] {
            assert_eq!(self.value(v).len(), n, "kl operand sizes");
        }
        let (a, b, c, d) = (
            self.value(mq).data(),
            self.value(lq).data(),
            self.value(mp).data(),
            self.value(lp).data(),
        );
        let total: T = (0..n).map(|i| kl_elem(a[i], b[i], c[i], d[i])).sum();
        let v = total / T::from_usize(n.max(1)).unwrap();
        let rg = [mq, lq, mp, lp].iter().any(|&x| self.rg(x));
        self.push(Tensor::scalar(v), Op::KlMean { mq, lq, mp, lp }, rg)
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "mean_abs_diff shapes");
        let s: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let v = s / T::from_usize(va.len().max(1)).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `root`. Gradients are read back with [`Graph::grad`].
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let mut sweep = Sweep {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            sweep.node(i, &g);
            self.grads[i] = Some(g);
        }
    }
}

/// Borrow-split view used during the reverse sweep: node values are read
/// through `nodes` while parent gradients are written through `grads`.
struct Sweep<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Real> Sweep<'a, T> {
    fn val(&self, v: Var) -> &'a [T] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &'a [usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn node(&mut self, i: usize, g: &[T]) {
        let nodes = self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                k,
                stride,
                pad,
                ref cols,
            } => self.conv(out, g, x, w, b, k, stride, pad, cols.as_deref()),
            &Op::MatMul { a, b, ta, tb } => self.matmul(g, a, b, ta, tb),
            &Op::Add(a, b) => {
                if let Some(d) = self.acc(a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(b) {
                    add_into(d, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = self.acc(a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                if let Some(d) = self.acc(a) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * o;
                    }
                }
                if let Some(d) = self.acc(b) {
                    for ((d, &g), &o) in d.iter_mut().zip(g).zip(va) {
                        *d += g * o;
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(d) = self.acc(x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * s);
                }
            }
            &Op::ScaleBy { x, s } => {
                let f = self.val(s)[0];
                let vx = self.val(x);
                if let Some(d) = self.acc(s) {
                    d[0] += vx.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
                }
                if let Some(d) = self.acc(x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * f);
                }
            }
            &Op::Exp(x) => {
                let y = out.data();
                if let Some(d) = self.acc(x) {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y;
                    }
                }
            }
            &Op::Clamp { x, lo, hi } => {
                let xs = self.val(x);
                if let Some(d) = self.acc(x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xs) {
                        if v >= lo && v <= hi {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xs = self.val(x);
                if let Some(d) = self.acc(x) {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xs) {
                        *d += g * gelu_parts(v).1;
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(d) = self.acc(x) {
                    add_into(d, g);
                }
            }
            &Op::Slice { x, start } => {
                let inner: usize = self.shape(x)[1..].iter().product();
                let off = start * inner;
                if let Some(d) = self.acc(x) {
                    add_into(&mut d[off..off + g.len()], g);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if let Some(d) = self.acc(p) {
                        add_into(d, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::Unshuffle { x, alpha } => {
                if self.rg(x) {
                    let gt = Tensor::new(out.shape(), g.to_vec()).unwrap();
                    let back = imaging::pixel_shuffle(&gt, alpha).unwrap();
                    add_into(self.acc(x).unwrap(), back.data());
                }
            }
            &Op::Shuffle { x, alpha } => {
                if self.rg(x) {
                    let gt = Tensor::new(out.shape(), g.to_vec()).unwrap();
                    let back = imaging::pixel_unshuffle(&gt, alpha).unwrap();
                    add_into(self.acc(x).unwrap(), back.data());
                }
            }
            &Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => self.layer_norm(g, x, gamma, beta, xhat, inv_std),
            &Op::RowL2Norm { x, ref norms } => {
                let y = out.data();
                let n = y.len() / norms.len();
                let eps = T::lit(1e-12);
                if let Some(d) = self.acc(x) {
                    for (r, &nr) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dr = &mut d[r * n..(r + 1) * n];
                        if nr > eps {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                dr[j] += (gr[j] - yr[j] * dot) / nr;
                            }
                        } else {
                            for j in 0..n {
                                dr[j] += gr[j] / eps;
                            }
                        }
                    }
                }
            }
            &Op::RowSoftmax(x) => {
                let y = out.data();
                let (_, n) = mat_dims(out.shape());
                if let Some(d) = self.acc(x) {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::GlobalAvgPool(x) => {
                let n = self.val(x).len() / g.len();
                let nf = T::from_usize(n).unwrap();
                if let Some(d) = self.acc(x) {
                    for (ch, &gc) in d.chunks_mut(n).zip(g) {
                        ch.iter_mut().for_each(|v| *v += gc / nf);
                    }
                }
            }
            &Op::WeightedSum { stack, w } => {
                let inner = g.len();
                let (s, wv) = (self.val(stack), self.val(w));
                if let Some(d) = self.acc(w) {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += s[j * inner..(j + 1) * inner]
                            .iter()
                            .zip(g)
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                    }
                }
                if let Some(d) = self.acc(stack) {
                    for (j, &wj) in wv.iter().enumerate() {
                        for (dv, &gv) in d[j * inner..(j + 1) * inner].iter_mut().zip(g) {
                            *dv += wj * gv;
                        }
                    }
                }
            }
            &Op::DepthwiseReplicate { x, k } => self.depthwise(g, x, k),
            &Op::KlMean { mq, lq, mp, lp } => {
                let (a, b, c, e) = (self.val(mq), self.val(lq), self.val(mp), self.val(lp));
                let n = a.len();
                let s = g[0] / T::from_usize(n.max(1)).unwrap();
                let half = T::lit(0.5);
                let diff: Vec<T> = (0..n).map(|j| a[j] - c[j]).collect();
                let inv_vp: Vec<T> = e.iter().map(|&l| (-l).exp()).collect();
                if let Some(d) = self.acc(mq) {
                    for j in 0..n {
                        d[j] += s * diff[j] * inv_vp[j];
                    }
                }
                if let Some(d) = self.acc(mp) {
                    for j in 0..n {
                        d[j] -= s * diff[j] * inv_vp[j];
                    }
                }
                if let Some(d) = self.acc(lq) {
                    for j in 0..n {
                        d[j] += s * half * ((b[j] - e[j]).exp() - T::one());
                    }
                }
                if let Some(d) = self.acc(lp) {
                    for j in 0..n {
                        d[j] += s * half * (T::one() - (b[j].exp() + diff[j] * diff[j]) * inv_vp[j]);
                    }
                }
            }
            &Op::MeanAbsDiff(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let s = g[0] / T::from_usize(va.len().max(1)).unwrap();
                let sign = |x: T, y: T| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        T::zero()
                    }
                };
                if let Some(d) = self.acc(a) {
                    for (j, dv) in d.iter_mut().enumerate() {
                        *dv += sign(va[j], vb[j]);
                    }
                }
                if let Some(d) = self.acc(b) {
                    for (j, dv) in d.iter_mut().enumerate() {
                        *dv -= sign(va[j], vb[j]);
                    }
                }
            }
            &Op::Mean(x) => {
                let s = g[0] / T::from_usize(self.val(x).len().max(1)).unwrap();
                if let Some(d) = self.acc(x) {
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        out: &Tensor<T>,
        g: &[T],
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        stride: usize,
        pad: usize,
        cols: Option<&[T]>,
    ) {
        let (c, h, wd) = self.nodes[x.0].value.dims3().unwrap();
        let (o, ho, wo) = out.dims3().unwrap();
        let n = ho * wo;
        let ckk = c * k * k;
        if let Some(d) = b.and_then(|bv| self.acc(bv)) {
            for (oc, gc) in g.chunks(n).enumerate() {
                d[oc] += gc.iter().copied().sum::<T>();
            }
        }
        let xv = self.val(x);
        if let Some(d) = self.acc(w) {
            let src = cols.unwrap_or(xv);
            // dW[o, ckk] += dOut[o, n] · cols[ckk, n]^T
            T::gemm(o, n, ckk, T::one(), g, (n as isize, 1), src, (1, n as isize), T::one(), d, (ckk as isize, 1));
        }
        if self.rg(x) {
            let wv = self.val(w);
            let mut dcols = vec![T::zero(); ckk * n];
            // dcols[ckk, n] = W^T · dOut
            T::gemm(ckk, o, n, T::one(), wv, (1, ckk as isize), g, (n as isize, 1), T::zero(), &mut dcols, (n as isize, 1));
            let d = self.acc(x).unwrap();
            if k == 1 && stride == 1 && pad == 0 {
                add_into(d, &dcols);
            } else {
                col2im_acc(&dcols, c, h, wd, k, stride, pad, ho, wo, d);
            }
        }
    }

    fn matmul(&mut self, g: &[T], a: Var, b: Var, ta: bool, tb: bool) {
        let (m, k, sa) = mat_view(self.shape(a), ta);
        let (_, n, sb) = mat_view(self.shape(b), tb);
        let (av, bv) = (self.val(a), self.val(b));
        if let Some(d) = self.acc(a) {
            // d op(A)[m, k] = dC[m, n] · op(B)^T
            let out = if ta { (1, m as isize) } else { (k as isize, 1) };
            T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv, (sb.1, sb.0), T::one(), d, out);
        }
        if let Some(d) = self.acc(b) {
            // d op(B)[k, n] = op(A)^T · dC
            let out = if tb { (1, k as isize) } else { (n as isize, 1) };
            T::gemm(k, m, n, T::one(), av, (sa.1, sa.0), g, (n as isize, 1), T::one(), d, out);
        }
    }

    fn layer_norm(&mut self, g: &[T], x: Var, gamma: Var, beta: Var, xhat: &[T], inv_std: &[T]) {
        let c = self.shape(x)[0];
        let n = xhat.len() / c;
        if let Some(d) = self.acc(beta) {
            for ci in 0..c {
                d[ci] += g[ci * n..(ci + 1) * n].iter().copied().sum::<T>();
            }
        }
        if let Some(d) = self.acc(gamma) {
            for ci in 0..c {
                d[ci] += g[ci * n..(ci + 1) * n]
                    .iter()
                    .zip(&xhat[ci * n..(ci + 1) * n])
                    .map(|(&a, &b)| a * b)
                    .sum::<T>();
            }
        }
        let gm = self.val(gamma);
        if let Some(d) = self.acc(x) {
            let cf = T::from_usize(c).unwrap();
            let mut m1 = vec![T::zero(); n];
            let mut m2 = vec![T::zero(); n];
            for ci in 0..c {
                for p in 0..n {
                    let dxh = g[ci * n + p] * gm[ci];
                    m1[p] += dxh;
                    m2[p] += dxh * xhat[ci * n + p];
                }
            }
            for ci in 0..c {
                for p in 0..n {
                    let i = ci * n + p;
                    let dxh = g[i] * gm[ci];
                    d[i] += inv_std[p] * (dxh - m1[p] / cf - xhat[i] * m2[p] / cf);
                }
            }
        }
    }

    fn depthwise(&mut self, g: &[T], x: Var, k: Var) {
        let (c, h, w) = self.nodes[x.0].value.dims3().unwrap();
        let s = self.shape(k)[1];
        let ys = replicate_index(h, s);
        let xs = replicate_index(w, s);
        let (src, kv) = (self.val(x), self.val(k));
        if let Some(d) = self.acc(k) {
            for ci in 0..c {
                let plane = &src[ci * h * w..(ci + 1) * h * w];
                let gp = &g[ci * h * w..(ci + 1) * h * w];
                for ky in 0..s {
                    for kx in 0..s {
                        let mut acc = T::zero();
                        for y in 0..h {
                            let row = ys[y + ky] * w;
                            for xx in 0..w {
                                acc += gp[y * w + xx] * plane[row + xs[xx + kx]];
                            }
                        }
                        d[(ci * s + ky) * s + kx] += acc;
                    }
                }
            }
        }
        if let Some(d) = self.acc(x) {
            for ci in 0..c {
                for ky in 0..s {
                    for kx in 0..s {
                        let tap = kv[(ci * s + ky) * s + kx];
                        if tap == T::zero() {
                            continue;
                        }
                        for y in 0..h {
                            let row = ci * h * w + ys[y + ky] * w;
                            for xx in 0..w {
                                d[row + xs[xx + kx]] += tap * g[ci * h * w + y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn mat_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        &[m, n] => (m, n),
        s => panic!("expected a rank-2 tensor, got {s:?}"),
    }
}

/// `(rows, cols, strides)` of `A` or `A^T` for a row-major `[r, c]` tensor.
fn mat_view(shape: &[usize], transpose: bool) -> (usize, usize, (isize, isize)) {
    let (r, c) = mat_dims(shape);
    if transpose {
        (c, r, (1, c as isize))
    } else {
        (r, c, (c as isize, 1))
    }
}
