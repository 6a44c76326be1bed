use std::collections::HashMap;

use super::kernels::{dot, gemm, gemm_a_bt, gemm_at_b, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise and gated nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
    /// Gated linear unit over the last axis: `a · σ(b)` for `[a | b]`.
    Glu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Act(Var, Activation),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm2d {
        x: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalConv {
        x: Var,
        kernel: Var,
        lanes: usize,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        span: usize,
        probs: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    PermuteCols {
        x: Var,
        perm: Vec<usize>,
    },
    RepeatElems {
        x: Var,
        times: usize,
    },
    Sum(Var),
    LogMeanExp(Vec<Var>),
    Fused {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation and replays it in reverse.
///
/// Nodes are appended in execution order, so every op's inputs precede it and
/// a single reverse sweep visits each node exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: HashMap<usize, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and accumulated gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
        self.params.clear();
    }

    /// Clears accumulated leaf gradients but keeps the recording.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Copies a recorded value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// Records a leaf. It participates in backward when the tensor is flagged
    /// `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a constant leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf, false)
    }

    /// Records a trainable parameter identified by `id`. Repeated calls with
    /// the same id on one tape return the same node so fan-out gradients sum.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads
            .get(&v.0)
            .map(|g| Tensor::new(self.node(v).shape.clone(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every parameter recorded through [`Tape::param`].
    pub fn param_grads(&self) -> Vec<(usize, &[f64])> {
        let mut out: Vec<(usize, &[f64])> = self
            .params
            .iter()
            .filter_map(|(&id, v)| self.leaf_grads.get(&v.0).map(|g| (id, g.as_slice())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), self.value(b), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    fn row_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let (sx, sr) = (self.shape(x), self.shape(r));
        let n = sx.last().copied().unwrap_or(1);
        if sr.len() != 1 || sr[0] != n {
            return Err(Error::dim(op, sx, sr));
        }
        Ok(n)
    }

    /// `x + b` with `b` broadcast over leading rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.row_check("add_row", x, b)?;
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, b), ng))
    }

    /// `x * g` with `g` broadcast over leading rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.row_check("mul_row", x, g)?;
        let gv = self.value(g);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i % n])
            .collect();
        let ng = self.ng(x) || self.ng(g);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow(x, g), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), ng)
    }

    /// Adds a same-shaped constant tensor.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim("add_const", self.shape(x), c.shape()));
        }
        let out = self
            .value(x)
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddConst(x), ng))
    }

    /// `x · W + b` for `x: [T×i]`, `W: [i×o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xv = self.value(x);
        let (shape, out) = match kind {
            Activation::Relu => (shape, xv.iter().map(|&v| v.max(0.0)).collect()),
            Activation::Silu => (shape, xv.iter().map(|&v| v * sigmoid(v)).collect()),
            Activation::Sigmoid => (shape, xv.iter().map(|&v| sigmoid(v)).collect()),
            Activation::Glu => {
                let c = shape.last().copied().unwrap_or(1);
                if shape.is_empty() || c % 2 != 0 {
                    return Err(Error::dim("glu", &shape, &[2]));
                }
                let h = c / 2;
                let rows = xv.len() / c;
                let mut out = Vec::with_capacity(rows * h);
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    for i in 0..h {
                        out.push(row[i] * sigmoid(row[h + i]));
                    }
                }
                let mut s = shape;
                *s.last_mut().unwrap() = h;
                (s, out)
            }
        };
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Act(x, kind), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu).expect("relu")
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu).expect("silu")
    }

    /// Log-softmax over the last axis, max-subtracted.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let c = self.shape(x).last().copied().unwrap_or(1);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.chunks(c).zip(out.chunks_mut(c)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in o.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x), ng)
    }

    /// Per-row layer normalization with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.row_check("layer_norm", x, gain)?;
        self.row_check("layer_norm", x, bias)?;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let rows = xv.len() / n;
        let mut out = vec![0.0; xv.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for i in 0..n {
                out[r * n + i] = gv[i] * (row[i] - mu) * rs + bv[i];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            ng,
        ))
    }

    /// Training-mode batch normalization of `[N×C×T×F]` over everything but
    /// the channel axis. No affine; see [`super::batch_norm2d`] for the
    /// running-statistics variant.
    pub fn batch_norm2d(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("batch_norm2d", &s, &[0, 0, 0, 0]));
        }
        let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
        let xv = self.value(x);
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut rstd = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|b| {
                let o = (b * c + ch) * inner;
                xv[o..o + inner].iter()
            });
            let mu = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
            mean[ch] = mu;
            rstd[ch] = 1.0 / (var + eps).sqrt();
        }
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * inner;
                for i in o..o + inner {
                    out[i] = (xv[i] - mean[ch]) * rstd[ch];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(s, out, Op::BatchNorm2d { x, mean, rstd }, ng))
    }

    /// Causal 1-D convolution over time.
    ///
    /// `x` is `[T × C_in·L]` laid out channel-major (`c·L + lane`) and
    /// `kernel` is `[K × C_in × C_out]`; the same kernel is applied to each
    /// of the `L` lanes independently. The input is left-padded with `K−1`
    /// zero frames, so output frame `t` reads input frames `t−K+1 ..= t`.
    pub fn causal_conv1d_lanes(&mut self, x: Var, kernel: Var, lanes: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 3 || lanes == 0 || sk[0] == 0 || sx[1] != sk[1] * lanes {
            return Err(Error::dim("causal_conv1d", &sx, &sk));
        }
        let kv = self.value(kernel);
        if kv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("causal_conv1d kernel"));
        }
        let (t_len, k_len, c_in, c_out) = (sx[0], sk[0], sk[1], sk[2]);
        let xv = self.value(x);
        let w_out = c_out * lanes;
        let w_in = c_in * lanes;
        let mut out = vec![0.0; t_len * w_out];
        for t in 0..t_len {
            let o = &mut out[t * w_out..(t + 1) * w_out];
            for j in 0..k_len {
                let Some(src) = (t + j).checked_sub(k_len - 1) else {
                    continue;
                };
                let xr = &xv[src * w_in..(src + 1) * w_in];
                for ci in 0..c_in {
                    let xs = &xr[ci * lanes..(ci + 1) * lanes];
                    for co in 0..c_out {
                        let w = kv[(j * c_in + ci) * c_out + co];
                        let os = &mut o[co * lanes..(co + 1) * lanes];
                        for (o, &xval) in os.iter_mut().zip(xs) {
                            *o += w * xval;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(
            vec![t_len, w_out],
            out,
            Op::CausalConv { x, kernel, lanes },
            ng,
        ))
    }

    pub fn causal_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.causal_conv1d_lanes(x, kernel, 1)
    }

    /// Causal depthwise convolution: `x: [T×C]`, `kernel: [K×C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 2 || sx[1] != sk[1] || sk[0] == 0 {
            return Err(Error::dim("depthwise_conv1d", &sx, &sk));
        }
        let (t_len, c) = (sx[0], sx[1]);
        let k_len = sk[0];
        let (xv, kv) = (self.value(x), self.value(kernel));
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            for j in 0..k_len {
                let Some(src) = (t + j).checked_sub(k_len - 1) else {
                    continue;
                };
                for ch in 0..c {
                    out[t * c + ch] += kv[j * c + ch] * xv[src * c + ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(sx, out, Op::DepthwiseConv { x, kernel }, ng))
    }

    /// Multi-head causal self-attention core.
    ///
    /// `q`, `k`, `v` are `[T×d]` with heads split along columns. Query `t`
    /// attends to keys `max(0, t−span+1) ..= t`; positions outside that range
    /// are never touched.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        span: usize,
    ) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::dim("causal_attention", &s, self.shape(k)));
        }
        if heads == 0 || s[1] % heads != 0 || span == 0 {
            return Err(Error::Config(format!(
                "attention width {} not divisible into {heads} heads (span {span})",
                s[1]
            )));
        }
        let (t_len, d) = (s[0], s[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; t_len * d];
        let mut probs = vec![0.0; heads * t_len * span];
        let mut scores = vec![0.0; span];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for t in 0..t_len {
                let lo = (t + 1).saturating_sub(span);
                let qt = &qv[t * d + cols.start..t * d + cols.end];
                let n = t - lo + 1;
                let mut m = f64::NEG_INFINITY;
                for (i, j) in (lo..=t).enumerate() {
                    let kj = &kv[j * d + cols.start..j * d + cols.end];
                    scores[i] = dot(qt, kj) * scale;
                    m = m.max(scores[i]);
                }
                let mut z = 0.0;
                for sc in &mut scores[..n] {
                    *sc = (*sc - m).exp();
                    z += *sc;
                }
                let p = &mut probs[(h * t_len + t) * span..(h * t_len + t) * span + n];
                for (p, sc) in p.iter_mut().zip(&scores[..n]) {
                    *p = sc / z;
                }
                let o = &mut out[t * d + cols.start..t * d + cols.end];
                for (i, j) in (lo..=t).enumerate() {
                    let pj = p[i];
                    let vj = &vv[j * d + cols.start..j * d + cols.end];
                    for (o, &vval) in o.iter_mut().zip(vj) {
                        *o += pj * vval;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            s,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                span,
                probs,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dim("slice_cols", &s, &[start, len]));
        }
        let (rows, c) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * c + start..r * c + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let rows = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Column gather: output column `i` is input column `perm[i]`.
    pub fn permute_cols(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || perm.len() != s[1] || perm.iter().any(|&p| p >= s[1]) {
            return Err(Error::dim("permute_cols", &s, &[perm.len()]));
        }
        let c = s[1];
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (orow, xrow) in out.chunks_mut(c).zip(xv.chunks(c)) {
            for (o, &p) in orow.iter_mut().zip(perm) {
                *o = xrow[p];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            s,
            out,
            Op::PermuteCols {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Repeats each element of a vector `times` times: `[a,b] → [a,a,b,b]`.
    pub fn repeat_elems(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(Error::dim("repeat_elems", s, &[0]));
        }
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let ng = self.ng(x);
        let n = out.len();
        Ok(self.push(vec![n], out, Op::RepeatElems { x, times }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), ng)
    }

    /// Elementwise `ln(mean_i exp(x_i))` across same-shaped inputs.
    ///
    /// Terms are summed in ascending order of value, so the result depends
    /// only on the multiset of inputs and not on their order.
    pub fn log_mean_exp(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Contract("log_mean_exp of zero tensors".into()));
        };
        let shape = self.shape(first).to_vec();
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::dim("log_mean_exp", &shape, self.shape(x)));
            }
        }
        let n = xs.len();
        let numel = self.value(first).len();
        let mut out = vec![0.0; numel];
        let mut buf = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            for (b, &x) in buf.iter_mut().zip(xs) {
                *b = self.value(x)[i];
            }
            buf.sort_by(f64::total_cmp);
            let m = buf[n - 1];
            let s: f64 = buf.iter().map(|v| (v - m).exp()).sum();
            *o = m + (s / n as f64).ln();
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(shape, out, Op::LogMeanExp(xs.to_vec()), ng))
    }

    /// Records a scalar computed outside the tape together with its
    /// gradient with respect to `x`.
    pub fn fused_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::dim("fused_scalar", self.shape(x), &[grad.len()]));
        }
        let ng = self.ng(x);
        Ok(self.push(Vec::new(), vec![value], Op::Fused { x, grad }, ng))
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from the scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 || !self.shape(loss).iter().all(|&d| d == 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_updates = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_updates.push((i, g));
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        for (i, g) in leaf_updates {
            match self.leaf_grads.get_mut(&i) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.leaf_grads.insert(i, g);
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    gemm_a_bt(m, n, k, g, &nodes[b.0].value, acc!(*a));
                }
                if want(*b) {
                    gemm_at_b(k, m, n, &nodes[a.0].value, g, acc!(*b));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    add_into(acc!(*a), g);
                }
                if want(*b) {
                    add_into(acc!(*b), g);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    add_into(acc!(*a), g);
                }
                if want(*b) {
                    let gb = acc!(*b);
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bv = &nodes[b.0].value;
                    for ((o, gv), bv) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *o += gv * bv;
                    }
                }
                if want(*b) {
                    let av = &nodes[a.0].value;
                    for ((o, gv), av) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow(x, b) => {
                if want(*x) {
                    add_into(acc!(*x), g);
                }
                if want(*b) {
                    let gb = acc!(*b);
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::MulRow(x, r) => {
                let rv = &nodes[r.0].value;
                let n = rv.len();
                if want(*x) {
                    for (i, (o, gv)) in acc!(*x).iter_mut().zip(g).enumerate() {
                        *o += gv * rv[i % n];
                    }
                }
                if want(*r) {
                    let xv = &nodes[x.0].value;
                    let gr = acc!(*r);
                    for (i, (gv, xv)) in g.iter().zip(xv).enumerate() {
                        gr[i % n] += gv * xv;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (o, gv) in acc!(*x).iter_mut().zip(g) {
                    *o += gv * c;
                }
            }
            Op::AddConst(x) => add_into(acc!(*x), g),
            Op::Act(x, kind) => {
                let xv = &nodes[x.0].value;
                let gx = acc!(*x);
                match kind {
                    Activation::Relu => {
                        for ((o, gv), xv) in gx.iter_mut().zip(g).zip(xv) {
                            if *xv > 0.0 {
                                *o += gv;
                            }
                        }
                    }
                    Activation::Silu => {
                        for ((o, gv), &xv) in gx.iter_mut().zip(g).zip(xv) {
                            let s = sigmoid(xv);
                            *o += gv * (s + xv * s * (1.0 - s));
                        }
                    }
                    Activation::Sigmoid => {
                        for ((o, gv), &xv) in gx.iter_mut().zip(g).zip(xv) {
                            let s = sigmoid(xv);
                            *o += gv * s * (1.0 - s);
                        }
                    }
                    Activation::Glu => {
                        let c = *nodes[x.0].shape.last().unwrap();
                        let h = c / 2;
                        for (r, grow) in g.chunks(h).enumerate() {
                            let xr = &xv[r * c..(r + 1) * c];
                            let gr = &mut gx[r * c..(r + 1) * c];
                            for i in 0..h {
                                let s = sigmoid(xr[h + i]);
                                gr[i] += grow[i] * s;
                                gr[h + i] += grow[i] * xr[i] * s * (1.0 - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = *node.shape.last().unwrap_or(&1);
                let gx = acc!(*x);
                for ((grow, yrow), orow) in g.chunks(c).zip(node.value.chunks(c)).zip(gx.chunks_mut(c)) {
                    let gs: f64 = grow.iter().sum();
                    for ((o, gv), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += gv - y.exp() * gs;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let n = gv.len();
                let rows = xv.len() / n;
                let mut xhat = vec![0.0; n];
                let mut gxhat = vec![0.0; n];
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let grow = &g[r * n..(r + 1) * n];
                    for i in 0..n {
                        xhat[i] = (xv[r * n + i] - mu) * rs;
                        gxhat[i] = grow[i] * gv[i];
                    }
                    if want(*gain) {
                        let gg = acc!(*gain);
                        for i in 0..n {
                            gg[i] += grow[i] * xhat[i];
                        }
                    }
                    if want(*bias) {
                        add_into(acc!(*bias), grow);
                    }
                    if want(*x) {
                        let m1 = gxhat.iter().sum::<f64>() / n as f64;
                        let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let gx = acc!(*x);
                        for i in 0..n {
                            gx[r * n + i] += rs * (gxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm2d { x, mean, rstd } => {
                let s = &node.shape;
                let (n, c, inner) = (s[0], s[1], s[2] * s[3]);
                let count = (n * inner) as f64;
                let xv = &nodes[x.0].value;
                let gx = acc!(*x);
                for ch in 0..c {
                    let idx = || (0..n).flat_map(move |b| {
                        let o = (b * c + ch) * inner;
                        o..o + inner
                    });
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in idx() {
                        let xh = (xv[i] - mean[ch]) * rstd[ch];
                        m1 += g[i];
                        m2 += g[i] * xh;
                    }
                    m1 /= count;
                    m2 /= count;
                    for i in idx() {
                        let xh = (xv[i] - mean[ch]) * rstd[ch];
                        gx[i] += rstd[ch] * (g[i] - m1 - xh * m2);
                    }
                }
            }
            Op::CausalConv { x, kernel, lanes } => {
                let lanes = *lanes;
                let (sx, sk) = (&nodes[x.0].shape, &nodes[kernel.0].shape);
                let (t_len, k_len, c_in, c_out) = (sx[0], sk[0], sk[1], sk[2]);
                let (w_in, w_out) = (c_in * lanes, c_out * lanes);
                let xv = &nodes[x.0].value;
                let kv = &nodes[kernel.0].value;
                if want(*x) {
                    let gx = acc!(*x);
                    for t in 0..t_len {
                        let grow = &g[t * w_out..(t + 1) * w_out];
                        for j in 0..k_len {
                            let Some(src) = (t + j).checked_sub(k_len - 1) else {
                                continue;
                            };
                            let gxr = &mut gx[src * w_in..(src + 1) * w_in];
                            for ci in 0..c_in {
                                let gxs = &mut gxr[ci * lanes..(ci + 1) * lanes];
                                for co in 0..c_out {
                                    let w = kv[(j * c_in + ci) * c_out + co];
                                    let gs = &grow[co * lanes..(co + 1) * lanes];
                                    for (o, gv) in gxs.iter_mut().zip(gs) {
                                        *o += w * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if want(*kernel) {
                    let gk = acc!(*kernel);
                    for t in 0..t_len {
                        let grow = &g[t * w_out..(t + 1) * w_out];
                        for j in 0..k_len {
                            let Some(src) = (t + j).checked_sub(k_len - 1) else {
                                continue;
                            };
                            let xr = &xv[src * w_in..(src + 1) * w_in];
                            for ci in 0..c_in {
                                let xs = &xr[ci * lanes..(ci + 1) * lanes];
                                for co in 0..c_out {
                                    let gs = &grow[co * lanes..(co + 1) * lanes];
                                    gk[(j * c_in + ci) * c_out + co] += dot(xs, gs);
                                }
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, kernel } => {
                let sx = &nodes[x.0].shape;
                let (t_len, c) = (sx[0], sx[1]);
                let k_len = nodes[kernel.0].shape[0];
                let xv = &nodes[x.0].value;
                let kv = &nodes[kernel.0].value;
                if want(*x) {
                    let gx = acc!(*x);
                    for t in 0..t_len {
                        for j in 0..k_len {
                            let Some(src) = (t + j).checked_sub(k_len - 1) else {
                                continue;
                            };
                            for ch in 0..c {
                                gx[src * c + ch] += kv[j * c + ch] * g[t * c + ch];
                            }
                        }
                    }
                }
                if want(*kernel) {
                    let gk = acc!(*kernel);
                    for t in 0..t_len {
                        for j in 0..k_len {
                            let Some(src) = (t + j).checked_sub(k_len - 1) else {
                                continue;
                            };
                            for ch in 0..c {
                                gk[j * c + ch] += xv[src * c + ch] * g[t * c + ch];
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                span,
                probs,
            } => {
                let (t_len, d) = (node.shape[0], node.shape[1]);
                let (heads, span) = (*heads, *span);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let mut gq = vec![0.0; t_len * d];
                let mut gk = vec![0.0; t_len * d];
                let mut gvv = vec![0.0; t_len * d];
                let mut dp = vec![0.0; span];
                for h in 0..heads {
                    let c0 = h * dh;
                    for t in 0..t_len {
                        let lo = (t + 1).saturating_sub(span);
                        let n = t - lo + 1;
                        let p = &probs[(h * t_len + t) * span..(h * t_len + t) * span + n];
                        let go = &g[t * d + c0..t * d + c0 + dh];
                        let mut pdp = 0.0;
                        for (i, j) in (lo..=t).enumerate() {
                            let vj = &vv[j * d + c0..j * d + c0 + dh];
                            dp[i] = dot(go, vj);
                            pdp += p[i] * dp[i];
                            let gvj = &mut gvv[j * d + c0..j * d + c0 + dh];
                            for (o, gov) in gvj.iter_mut().zip(go) {
                                *o += p[i] * gov;
                            }
                        }
                        for (i, j) in (lo..=t).enumerate() {
                            let ds = p[i] * (dp[i] - pdp) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                gq[t * d + c0 + c] += ds * kv[j * d + c0 + c];
                                gk[j * d + c0 + c] += ds * qv[t * d + c0 + c];
                            }
                        }
                    }
                }
                if want(*q) {
                    add_into(acc!(*q), &gq);
                }
                if want(*k) {
                    add_into(acc!(*k), &gk);
                }
                if want(*v) {
                    add_into(acc!(*v), &gvv);
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].shape[1];
                let len = node.shape[1];
                let gx = acc!(*x);
                for (r, grow) in g.chunks(len.max(1)).enumerate() {
                    add_into(&mut gx[r * c + start..r * c + start + len], grow);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if want(p) {
                        let gp = acc!(p);
                        for (r, grow) in g.chunks(total.max(1)).enumerate() {
                            add_into(&mut gp[r * w..(r + 1) * w], &grow[off..off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::PermuteCols { x, perm } => {
                let c = perm.len();
                let gx = acc!(*x);
                for (r, grow) in g.chunks(c).enumerate() {
                    for (i, &p) in perm.iter().enumerate() {
                        gx[r * c + p] += grow[i];
                    }
                }
            }
            Op::RepeatElems { x, times } => {
                let gx = acc!(*x);
                for (o, chunk) in gx.iter_mut().zip(g.chunks(*times)) {
                    *o += chunk.iter().sum::<f64>();
                }
            }
            Op::Sum(x) => {
                for o in acc!(*x).iter_mut() {
                    *o += g[0];
                }
            }
            Op::LogMeanExp(xs) => {
                let n = xs.len() as f64;
                for &x in xs {
                    if !want(x) {
                        continue;
                    }
                    let xv = &nodes[x.0].value;
                    let gx = acc!(x);
                    for i in 0..gx.len() {
                        gx[i] += g[i] * (xv[i] - node.value[i]).exp() / n;
                    }
                }
            }
            Op::Fused { x, grad } => {
                for (o, d) in acc!(*x).iter_mut().zip(grad) {
                    *o += g[0] * d;
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
