//! The three causal encoders (TDS, TDS+Transformer, Conformer) behind a
//! shared rotation-invariant input MLP and a linear CTC head.
//!
//! Every temporal operator is causal and there is no striding, so one
//! output row exists per input frame and row `t` depends only on frames
//! `≤ t`, within [`Model::receptive_field`] frames.

mod blocks;
mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alphabet::EMISSION_SIZE;
use crate::augment::rotation_permutation;
use crate::ctc::EmissionLattice;
use crate::dataio::CHANNELS;
use crate::error::{Error, Result};
use crate::frontend::{normalize, Spectrogram, BAND_FEATURES, FEATURES};
use crate::tensor::{BatchNormStats, NormMode, Tape, Tensor, Var};

use blocks::{positional_encoding, BandMlp, Builder, ConformerBlock, Ctx, Linear, TdsBlock, TransformerLayer};

/// Attention window of every attention layer, in frames.
pub const ATTENTION_SPAN: usize = 125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchKind {
    Tds,
    TdsTransformer,
    Conformer,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::Tds, ArchKind::TdsTransformer, ArchKind::Conformer];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Tds => "tds",
            ArchKind::TdsTransformer => "tds_transformer",
            ArchKind::Conformer => "conformer",
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Paper,
    Toy,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Toy => "toy",
        }
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "toy" => Ok(Scale::Toy),
            _ => Err(Error::Config(format!("unknown scale {s:?}"))),
        }
    }
}

/// Architecture hyperparameters.
///
/// `d_in` is the input width of the stage the architecture is named after:
/// the per-band feature width for `tds` and `conformer`, the attention
/// width after the bottleneck for `tds_transformer`. `blocks`, `channels`
/// and `kernel` describe the TDS stack (for `conformer`, `kernel` is the
/// depthwise kernel); `layers`, `heads` and `ffn_dim` the attention stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub kind: ArchKind,
    pub scale: Scale,
    pub d_in: usize,
    pub mlp_dim: usize,
    pub blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub attn_span: usize,
    pub alphabet_size: usize,
}

impl ArchConfig {
    pub fn new(kind: ArchKind, scale: Scale) -> Self {
        let paper = ArchConfig::paper(kind);
        match scale {
            Scale::Paper => paper,
            Scale::Toy => paper.shrink(),
        }
    }

    pub fn paper(kind: ArchKind) -> Self {
        let base = ArchConfig {
            kind,
            scale: Scale::Paper,
            d_in: BAND_FEATURES,
            mlp_dim: 384,
            blocks: 4,
            channels: 24,
            kernel: 32,
            layers: 0,
            heads: 0,
            d_model: 768,
            ffn_dim: 0,
            attn_span: ATTENTION_SPAN,
            alphabet_size: EMISSION_SIZE,
        };
        match kind {
            ArchKind::Tds => base,
            ArchKind::TdsTransformer => ArchConfig {
                d_in: 192,
                layers: 2,
                heads: 4,
                d_model: 192,
                ffn_dim: 2048,
                ..base
            },
            ArchKind::Conformer => ArchConfig {
                blocks: 0,
                channels: 0,
                kernel: 31,
                layers: 3,
                heads: 6,
                d_model: 528,
                ffn_dim: 256,
                ..base
            },
        }
    }

    pub fn toy(kind: ArchKind) -> Self {
        ArchConfig::new(kind, Scale::Toy)
    }

    /// Widths divided by 8, depths halved (at least 1). Frontend-facing
    /// widths, kernels, head counts and the attention span are kept.
    fn shrink(&self) -> Self {
        let w = |v: usize| v / 8;
        let half = |v: usize| if v == 0 { 0 } else { (v / 2).max(1) };
        ArchConfig {
            scale: Scale::Toy,
            d_in: if self.kind == ArchKind::TdsTransformer { w(self.d_in) } else { self.d_in },
            mlp_dim: w(self.mlp_dim),
            blocks: half(self.blocks),
            channels: w(self.channels),
            layers: half(self.layers),
            d_model: w(self.d_model),
            ffn_dim: w(self.ffn_dim),
            ..self.clone()
        }
    }

    /// Width of the concatenated two-band MLP output.
    pub fn mlp_out(&self) -> usize {
        2 * self.mlp_dim
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.alphabet_size != EMISSION_SIZE {
            return err(format!("alphabet_size {} must be {EMISSION_SIZE}", self.alphabet_size));
        }
        if self.mlp_dim == 0 {
            return err("mlp_dim must be positive".into());
        }
        let has_tds = self.kind != ArchKind::Conformer;
        if has_tds {
            if self.blocks == 0 || self.kernel == 0 {
                return err("TDS needs at least one block and a positive kernel".into());
            }
            if self.channels == 0 || self.mlp_out() % self.channels != 0 {
                return err(format!(
                    "TDS width {} is not divisible into {} channels",
                    self.mlp_out(),
                    self.channels
                ));
            }
        }
        match self.kind {
            ArchKind::Tds => {
                if self.d_model != self.mlp_out() {
                    return err(format!("tds d_model {} must equal 2·mlp_dim {}", self.d_model, self.mlp_out()));
                }
            }
            ArchKind::TdsTransformer => {
                if self.d_in != self.d_model {
                    return err(format!("tds_transformer d_in {} must equal d_model {}", self.d_in, self.d_model));
                }
                if self.mlp_out() != 4 * self.d_model {
                    return err(format!(
                        "bottleneck {} -> {} must reduce width by exactly 4",
                        self.mlp_out(),
                        self.d_model
                    ));
                }
            }
            ArchKind::Conformer => {
                if self.kernel % 2 == 0 {
                    return err(format!("conformer kernel {} must be odd", self.kernel));
                }
            }
        }
        if self.kind != ArchKind::TdsTransformer && self.d_in != BAND_FEATURES {
            return err(format!("d_in {} must match the frontend band width {BAND_FEATURES}", self.d_in));
        }
        if self.kind != ArchKind::Tds {
            if self.layers == 0 || self.ffn_dim == 0 || self.attn_span == 0 {
                return err("attention stack needs layers, ffn_dim and attn_span".into());
            }
            if self.heads == 0 || self.d_model % self.heads != 0 {
                return err(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
            }
        }
        Ok(())
    }

    /// Frames of input history that can influence one output frame,
    /// including the frame itself.
    pub fn receptive_field(&self) -> usize {
        let tds = self.blocks * (self.kernel - 1);
        let attn = self.layers * (self.attn_span - 1);
        1 + match self.kind {
            ArchKind::Tds => tds,
            ArchKind::TdsTransformer => tds + attn,
            ArchKind::Conformer => attn + self.layers * (self.kernel - 1),
        }
    }

    /// Canonical `key=value` text, one field per line.
    pub fn to_canonical(&self) -> String {
        format!(
            "kind={}\nscale={}\nd_in={}\nmlp_dim={}\nblocks={}\nchannels={}\nkernel={}\nlayers={}\nheads={}\nd_model={}\nffn_dim={}\nattn_span={}\nalphabet_size={}\n",
            self.kind,
            self.scale.name(),
            self.d_in,
            self.mlp_dim,
            self.blocks,
            self.channels,
            self.kernel,
            self.layers,
            self.heads,
            self.d_model,
            self.ffn_dim,
            self.attn_span,
            self.alphabet_size
        )
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line {line:?}")))?;
            if fields.insert(k, v).is_some() {
                return Err(Error::Config(format!("duplicate config key {k:?}")));
            }
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| Error::Config(format!("config is missing {k:?}")))
        };
        let kind: ArchKind = take("kind")?.parse()?;
        let scale: Scale = take("scale")?.parse()?;
        let mut num = |k: &str| -> Result<usize> {
            let v = take(k)?;
            v.parse().map_err(|_| Error::Config(format!("{k}={v:?} is not an integer")))
        };
        let cfg = ArchConfig {
            kind,
            scale,
            d_in: num("d_in")?,
            mlp_dim: num("mlp_dim")?,
            blocks: num("blocks")?,
            channels: num("channels")?,
            kernel: num("kernel")?,
            layers: num("layers")?,
            heads: num("heads")?,
            d_model: num("d_model")?,
            ffn_dim: num("ffn_dim")?,
            attn_span: num("attn_span")?,
            alphabet_size: num("alphabet_size")?,
        };
        if let Some(k) = fields.keys().next() {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Tds(Vec<TdsBlock>),
    TdsTransformer {
        tds: Vec<TdsBlock>,
        proj: Linear,
        layers: Vec<TransformerLayer>,
        norm: blocks::LayerNorm,
    },
    Conformer {
        proj: Linear,
        layers: Vec<ConformerBlock>,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    left: BandMlp,
    right: BandMlp,
    encoder: Encoder,
    head: Linear,
}

impl Layout {
    fn build(arch: &ArchConfig, b: &mut Builder) -> Result<Self> {
        let m = arch.mlp_dim;
        let left = BandMlp::new(b, "input_mlp.left", BAND_FEATURES, m);
        let right = BandMlp::new(b, "input_mlp.right", BAND_FEATURES, m);
        let w = arch.mlp_out();
        let tds = |b: &mut Builder| -> Result<Vec<TdsBlock>> {
            (0..arch.blocks)
                .map(|i| TdsBlock::new(b, &format!("tds.{i}"), arch.channels, w, arch.kernel))
                .collect()
        };
        let encoder = match arch.kind {
            ArchKind::Tds => Encoder::Tds(tds(b)?),
            ArchKind::TdsTransformer => {
                let t = tds(b)?;
                let proj = b.linear("bottleneck", w, arch.d_model, false);
                let layers = (0..arch.layers)
                    .map(|i| {
                        TransformerLayer::new(b, &format!("transformer.{i}"), arch.d_model, arch.heads, arch.ffn_dim, arch.attn_span)
                    })
                    .collect::<Result<_>>()?;
                Encoder::TdsTransformer {
                    tds: t,
                    proj,
                    layers,
                    norm: b.layer_norm("transformer.norm", arch.d_model),
                }
            }
            ArchKind::Conformer => Encoder::Conformer {
                proj: b.linear("conformer.input", w, arch.d_model, false),
                layers: (0..arch.layers)
                    .map(|i| {
                        ConformerBlock::new(
                            b,
                            &format!("conformer.{i}"),
                            arch.d_model,
                            arch.heads,
                            arch.ffn_dim,
                            arch.kernel,
                            arch.attn_span,
                        )
                    })
                    .collect::<Result<_>>()?,
            },
        };
        let d_out = if arch.kind == ArchKind::Tds { w } else { arch.d_model };
        let head = b.linear("head", d_out, arch.alphabet_size, false);
        Ok(Layout {
            left,
            right,
            encoder,
            head,
        })
    }
}

/// A parameterized encoder with its input-normalization statistics.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    /// Offsets averaged by [`Model::forward`].
    pub rotation_offsets: Vec<i32>,
    /// Running statistics of the channel-wise input normalization.
    pub norm: BatchNormStats,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
}

impl Model {
    /// Fresh model with deterministic initialization from `seed`.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(seed));
        let layout = Layout::build(&arch, &mut b)?;
        Ok(Model {
            arch,
            rotation_offsets: vec![-1, 0, 1],
            norm: BatchNormStats::new(CHANNELS),
            names: b.names,
            params: b.tensors,
            layout,
        })
    }

    pub fn with_offsets(mut self, offsets: Vec<i32>) -> Result<Self> {
        check_offsets(&offsets)?;
        self.rotation_offsets = offsets;
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn receptive_field(&self) -> usize {
        self.arch.receptive_field()
    }

    /// Parameter names in declaration order; index = tape parameter id.
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    /// Records the forward pass on `tape`.
    ///
    /// `features` is `T × 1056` normalized input; `frame_offset` is the
    /// global index of its first row. Returns `T × 30` log-probabilities.
    pub fn forward_tape(&self, tape: &mut Tape, features: &Tensor, offsets: &[i32], frame_offset: usize) -> Result<Var> {
        check_offsets(offsets)?;
        if features.shape().len() != 2 || features.cols() != FEATURES {
            return Err(Error::Config(format!(
                "input has {} features per frame but the model expects {FEATURES} (2 bands × d_in {})",
                features.shape().last().copied().unwrap_or(0),
                BAND_FEATURES
            )));
        }
        let cx = Ctx {
            params: &self.params,
            frame_offset,
            bypass_norm: false,
        };
        let x = tape.constant(features);
        let mut outs = Vec::with_capacity(offsets.len());
        for &o in offsets {
            let xr = if o == 0 { x } else { tape.permute_cols(x, &rotation_permutation(o))? };
            let l = tape.slice_cols(xr, 0, BAND_FEATURES)?;
            let r = tape.slice_cols(xr, BAND_FEATURES, BAND_FEATURES)?;
            let l = self.layout.left.forward(tape, &cx, l)?;
            let r = self.layout.right.forward(tape, &cx, r)?;
            let h = tape.concat_cols(&[l, r])?;
            let h = self.encode(tape, &cx, h)?;
            let logits = self.layout.head.forward(tape, &cx, h)?;
            outs.push(tape.log_softmax(logits));
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.log_mean_exp(&outs)
        }
    }

    fn encode(&self, tape: &mut Tape, cx: &Ctx, mut h: Var) -> Result<Var> {
        match &self.layout.encoder {
            Encoder::Tds(blocks) => {
                for b in blocks {
                    h = b.forward(tape, cx, h)?;
                }
            }
            Encoder::TdsTransformer { tds, proj, layers, norm } => {
                for b in tds {
                    h = b.forward(tape, cx, h)?;
                }
                h = proj.forward(tape, cx, h)?;
                // Keeps the unit-amplitude positions from swamping narrow
                // projections.
                h = tape.scale(h, (self.arch.d_model as f64).sqrt());
                let t = tape.shape(h)[0];
                let pe = positional_encoding(t, self.arch.d_model, cx.frame_offset);
                h = tape.add_const(h, &pe)?;
                for l in layers {
                    h = l.forward(tape, cx, h)?;
                }
                h = norm.forward(tape, cx, h)?;
            }
            Encoder::Conformer { proj, layers } => {
                h = proj.forward(tape, cx, h)?;
                for l in layers {
                    h = l.forward(tape, cx, h)?;
                }
            }
        }
        Ok(h)
    }

    /// Emissions for already-normalized features.
    pub fn emissions(&self, features: &Tensor, offsets: &[i32], frame_offset: usize) -> Result<EmissionLattice> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, features, offsets, frame_offset)?;
        EmissionLattice::from_tensor(&tape.tensor(out))
    }

    /// Eval-mode input normalization with the running statistics.
    pub fn normalize(&self, spec: &Spectrogram) -> Result<Tensor> {
        let mut stats = self.norm.clone();
        let (out, _) = normalize(&[spec], &mut stats, NormMode::Eval)?;
        Ok(out[0].to_tensor())
    }

    /// Emissions averaged over `offsets`, with eval-mode normalization.
    pub fn rotation_invariant_forward(&self, spec: &Spectrogram, offsets: &[i32]) -> Result<EmissionLattice> {
        self.emissions(&self.normalize(spec)?, offsets, 0)
    }

    /// Emissions for a spectrogram whose first frame has global index
    /// `frame_offset`.
    pub fn forward_at(&self, spec: &Spectrogram, frame_offset: usize) -> Result<EmissionLattice> {
        self.emissions(&self.normalize(spec)?, &self.rotation_offsets, frame_offset)
    }

    /// Per-frame log-probabilities over blank and the 29 keys.
    pub fn forward(&self, spec: &Spectrogram) -> Result<EmissionLattice> {
        self.forward_at(spec, 0)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

fn check_offsets(offsets: &[i32]) -> Result<()> {
    if offsets.is_empty() {
        return Err(Error::Config("rotation offsets are empty".into()));
    }
    if let Some(o) = offsets.iter().find(|o| o.abs() > 15) {
        return Err(Error::Config(format!("rotation offset {o} outside -15..=15")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
