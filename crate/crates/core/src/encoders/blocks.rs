use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Activation, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Read-only view of the parameters during one forward pass.
pub(crate) struct Ctx<'a> {
    pub params: &'a [Tensor],
    /// Global index of the first frame (positional encodings).
    pub frame_offset: usize,
    /// Skip every layer norm (tests of the residual wiring only).
    pub bypass_norm: bool,
}

impl Ctx<'_> {
    fn var(&self, tape: &mut Tape, id: usize) -> Var {
        tape.param(id, &self.params[id])
    }
}

/// Collects parameter names and initial values in declaration order.
pub(crate) struct Builder {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
        }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Uniform in ±1/√fan_in.
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let a = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.push(name, Tensor::full(shape, v))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, zero: bool) -> Linear {
        let w = if zero {
            self.constant(format!("{name}.weight"), &[d_in, d_out], 0.0)
        } else {
            self.uniform(format!("{name}.weight"), &[d_in, d_out], d_in)
        };
        let b = self.constant(format!("{name}.bias"), &[d_out], 0.0);
        Linear { w, b }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            g: self.constant(format!("{name}.gain"), &[d], 1.0),
            b: self.constant(format!("{name}.bias"), &[d], 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, cx: &Ctx, x: Var) -> Result<Var> {
        let w = cx.var(tape, self.w);
        let b = cx.var(tape, self.b);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    pub g: usize,
    pub b: usize,
}

impl LayerNorm {
    pub fn forward(&self, tape: &mut Tape, cx: &Ctx, x: Var) -> Result<Var> {
        if cx.bypass_norm {
            return Ok(x);
        }
        let g = cx.var(tape, self.g);
        let b = cx.var(tape, self.b);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Per-band input MLP: two ReLU layers.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BandMlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl BandMlp {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d: usize) -> Self {
        BandMlp {
            l1: b.linear(&format!("{name}.0"), d_in, d, false),
            l2: b.linear(&format!("{name}.1"), d, d, false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, cx: &Ctx, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, cx, x)?;
        let h = tape.relu(h);
        let h = self.l2.forward(tape, cx, h)?;
        Ok(tape.relu(h))
    }
}

/// Time-depth-separable block: a causal convolution over time shared across
/// `lanes` (channel-major features `c·lanes + w`), then a two-layer
/// pointwise MLP; each sub-block is residual and layer-normed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TdsBlock {
    pub kernel: usize,
    pub conv_bias: usize,
    pub ln1: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ln2: LayerNorm,
    pub lanes: usize,
}

impl TdsBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, width: usize, k: usize) -> Result<Self> {
        if channels == 0 || width % channels != 0 {
            return Err(Error::Config(format!(
                "TDS width {width} is not divisible into {channels} channels"
            )));
        }
        let lanes = width / channels;
        Ok(TdsBlock {
            kernel: b.uniform(format!("{name}.conv.kernel"), &[k, channels, channels], k * channels),
            conv_bias: b.constant(format!("{name}.conv.bias"), &[channels], 0.0),
            ln1: b.layer_norm(&format!("{name}.conv.norm"), width),
            fc1: b.linear(&format!("{name}.fc.0"), width, width, false),
            fc2: b.linear(&format!("{name}.fc.1"), width, width, true),
            ln2: b.layer_norm(&format!("{name}.fc.norm"), width),
            lanes,
        })
    }

    pub fn forward(&self, tape: &mut Tape, cx: &Ctx, x: Var) -> Result<Var> {
        let k = cx.var(tape, self.kernel);
        let cb = cx.var(tape, self.conv_bias);
        let bias = tape.repeat_elems(cb, self.lanes)?;
        let y = tape.causal_conv1d_lanes(x, k, self.lanes)?;
        let y = tape.add_row(y, bias)?;
        let y = tape.relu(y);
        let x = tape.add(x, y)?;
        let x = self.ln1.forward(tape, cx, x)?;

        let y = self.fc1.forward(tape, cx, x)?;
        let y = tape.relu(y);
        let y = self.fc2.forward(tape, cx, y)?;
        let x = tape.add(x, y)?;
        self.ln2.forward(tape, cx, x)
    }
}

/// Span-limited causal multi-head self-attention with output projection.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub span: usize,
}

impl Mhsa {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize, span: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("d_model {d} is not divisible by {heads} heads")));
        }
        Ok(Mhsa {
            q: b.linear(&format!("{name}.q"), d, d, false),
            k: b.linear(&format!("{name}.k"), d, d, false),
            v: b.linear(&format!("{name}.v"), d, d, false),
            o: b.linear(&format!("{name}.out"), d, d, true),
            heads,
            span,
        })
    }

    pub fn forward(&self, tape: &mut Tape, cx: &Ctx, x: Var) -> Result<Var> {
        let q = self.q.forward(tape, cx, x)?;
        let k = self.k.forward(tape, cx, x)?;
        let v = self.v.forward(tape, cx, x)?;
        let a = tape.causal_attention(q, k, v, self.heads, self.span)?;
        self.o.forward(tape, cx, a)
    }
}

/// Pre-norm position-wise feed-forward: LN, Linear, activation, Linear.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForward {
    pub ln: LayerNorm,
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, d: usize, ffn: usize, act: Activation) -> Self {
        FeedForward {
            ln: b.layer_norm(&format!("{name}.norm"), d),
            l1: b.linear(&format!("{name}.0"), d, ffn, false),
            l2: b.linear(&format!("{name}.1"), ffn, d, true),
            act,
        }
    }

    pub fn forward(&self, tape: &mut Tape, cx: &Ctx, x: Var) -> Result<Var> {
        let h = self.ln.forward(tape, cx, x)?;
        let h = self.l1.forward(tape, cx, h)?;
        let h = tape.activation(h, self.act)?;
        self.l2.forward(tape, cx, h)
    }
}

/// Pre-norm transformer layer with span-limited causal attention.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TransformerLayer {
    pub ln: LayerNorm,
    pub attn: Mhsa,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize, ffn: usize, span: usize) -> Result<Self> {
        Ok(TransformerLayer {
            ln: b.layer_norm(&format!("{name}.attn.norm"), d),
            attn: Mhsa::new(b, &format!("{name}.attn"), d, heads, span)?,
            ff: FeedForward::new(b, &format!("{name}.ffn"), d, ffn, Activation::Relu),
        })
    }

    pub fn forward(&self, tape: &mut Tape, cx: &Ctx, x: Var) -> Result<Var> {
        let h = self.ln.forward(tape, cx, x)?;
        let h = self.attn.forward(tape, cx, h)?;
        let x = tape.add(x, h)?;
        let h = self.ff.forward(tape, cx, x)?;
        tape.add(x, h)
    }
}

/// Sinusoidal encodings for frames `offset..offset+t` of width `d`.
pub(crate) fn positional_encoding(t: usize, d: usize, offset: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for r in 0..t {
        let pos = (offset + r) as f64;
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * pair / d as f64);
            data[r * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape")
}

/// Causal convolution module: LN, pointwise expansion with GLU, depthwise
/// causal convolution, LN, SiLU, pointwise projection.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvModule {
    pub ln: LayerNorm,
    pub pw1: Linear,
    pub dw_kernel: usize,
    pub dw_bias: usize,
    pub ln2: LayerNorm,
    pub pw2: Linear,
}

impl ConvModule {
    pub fn new(b: &mut Builder, name: &str, d: usize, k: usize) -> Self {
        ConvModule {
            ln: b.layer_norm(&format!("{name}.norm"), d),
            pw1: b.linear(&format!("{name}.pointwise1"), d, 2 * d, false),
            dw_kernel: b.uniform(format!("{name}.depthwise.kernel"), &[k, d], k),
            dw_bias: b.constant(format!("{name}.depthwise.bias"), &[d], 0.0),
            ln2: b.layer_norm(&format!("{name}.depthwise.norm"), d),
            pw2: b.linear(&format!("{name}.pointwise2"), d, d, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, cx: &Ctx, x: Var) -> Result<Var> {
        let h = self.ln.forward(tape, cx, x)?;
        let h = self.pw1.forward(tape, cx, h)?;
        let h = tape.activation(h, Activation::Glu)?;
        let k = cx.var(tape, self.dw_kernel);
        let kb = cx.var(tape, self.dw_bias);
        let h = tape.depthwise_conv1d(h, k)?;
        let h = tape.add_row(h, kb)?;
        let h = self.ln2.forward(tape, cx, h)?;
        let h = tape.silu(h);
        self.pw2.forward(tape, cx, h)
    }
}

/// Conformer block: half-step FFN, attention, convolution module,
/// half-step FFN, final layer norm.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConformerBlock {
    pub ff1: FeedForward,
    pub ln_attn: LayerNorm,
    pub attn: Mhsa,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub ln_out: LayerNorm,
}

impl ConformerBlock {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize, ffn: usize, k: usize, span: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("conformer kernel {k} must be odd")));
        }
        Ok(ConformerBlock {
            ff1: FeedForward::new(b, &format!("{name}.ffn1"), d, ffn, Activation::Silu),
            ln_attn: b.layer_norm(&format!("{name}.attn.norm"), d),
            attn: Mhsa::new(b, &format!("{name}.attn"), d, heads, span)?,
            conv: ConvModule::new(b, &format!("{name}.conv"), d, k),
            ff2: FeedForward::new(b, &format!("{name}.ffn2"), d, ffn, Activation::Silu),
            ln_out: b.layer_norm(&format!("{name}.norm"), d),
        })
    }

    pub fn forward(&self, tape: &mut Tape, cx: &Ctx, x: Var) -> Result<Var> {
        let h = self.ff1.forward(tape, cx, x)?;
        let h = tape.scale(h, 0.5);
        let x = tape.add(x, h)?;
        let h = self.ln_attn.forward(tape, cx, x)?;
        let h = self.attn.forward(tape, cx, h)?;
        let x = tape.add(x, h)?;
        let h = self.conv.forward(tape, cx, x)?;
        let x = tape.add(x, h)?;
        let h = self.ff2.forward(tape, cx, x)?;
        let h = tape.scale(h, 0.5);
        let x = tape.add(x, h)?;
        self.ln_out.forward(tape, cx, x)
    }
}
