//! Multimodal fusion encoder with region-biased cross-attention.
//!
//! Each block runs self-attention over the token set (optional CLS, fusion
//! queries, extra tokens, text tokens), then cross-attention from every token
//! to the image patches, then a feed-forward layer. Residuals are followed by
//! layer norm.
//!
//! Cross-attention logits can carry an additive bias on the patch columns
//! selected by a [`RegionMask`]:
//!
//! ```text
//! A' = softmax((Q·Kᵀ + β·M) / √d_k)
//! ```
//!
//! The bias is added before the `1/√d_k` scaling, so the effective shift in
//! softmax space is `β/√d_k`.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RegionMask;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{init, Bound, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_model: usize,
    /// Total query/key width across heads.
    pub d_k: usize,
    pub heads: usize,
    pub n_blocks: usize,
    /// Number of fusion queries `M`.
    pub n_queries: usize,
    pub ffn_hidden: usize,
    /// Whether the region bias applies in every block or only the first.
    pub bias_all_blocks: bool,
    pub queries_trainable: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            d_k: 32,
            heads: 1,
            n_blocks: 2,
            n_queries: 8,
            ffn_hidden: 64,
            bias_all_blocks: true,
            queries_trainable: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_k.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_k ({}) must be divisible by heads ({})", self.d_k, self.heads)));
        }
        if self.n_blocks == 0 || self.n_queries == 0 || self.d_model == 0 {
            return Err(Error::Config("n_blocks, n_queries and d_model must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_k / self.heads
    }
}

/// Logit bias for one attention call: row `i` gets `beta_i · mask`.
#[derive(Clone, Debug)]
pub struct RowBias {
    /// `1 × 1` (shared) or `rows × 1`.
    pub beta: Var,
    pub mask: Rc<[f64]>,
}

/// Attention on already-projected matrices. Returns the output `A'·V` and
/// the attention weights `A'`.
///
/// `q: r × d`, `k: n × d`, `v: n × d_v`.
pub fn modulated_attention(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<&RowBias>) -> Result<(Var, Var)> {
    let d_k = tape.value(k).cols();
    let mut logits = tape.matmul_nt(q, k)?;
    if let Some(b) = bias {
        logits = tape.mask_bias(logits, b.beta, b.mask.clone())?;
    }
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Value-level form of [`modulated_attention`] with a shared scalar bias.
///
/// Uses `queries` as Q and `kv` as both K and V. Returns `(output, weights)`.
pub fn modulated_cross_attention(queries: &Tensor, kv: &Tensor, mask: &[f64], beta: f64) -> Result<(Tensor, Tensor)> {
    if queries.cols() != kv.cols() {
        return Err(Error::Dimension(format!(
            "queries {:?} and keys {:?} differ in width",
            queries.shape(),
            kv.shape()
        )));
    }
    if mask.len() != kv.rows() {
        return Err(Error::Dimension(format!("mask of length {} for {} keys", mask.len(), kv.rows())));
    }
    let mut tape = Tape::inference();
    let q = tape.constant(queries.clone());
    let k = tape.constant(kv.clone());
    let b = tape.constant(Tensor::scalar(beta));
    let bias = RowBias { beta: b, mask: Rc::from(mask) };
    let (out, w) = modulated_attention(&mut tape, q, k, k, Some(&bias))?;
    Ok((tape.value(out).clone(), tape.value(w).clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_model: usize, d_k: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, d_model, d_k, rng),
            k: Linear::new(store, &format!("{name}.k"), group, d_model, d_k, rng),
            v: Linear::new(store, &format!("{name}.v"), group, d_model, d_k, rng),
            o: Linear::new(store, &format!("{name}.o"), group, d_k, d_model, rng),
            heads,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.ids()).collect()
    }

    /// Projects, attends (per head, same bias in every head), and projects back.
    /// Returns the output and the attention weights of each head.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x_q: Var, x_kv: Var, bias: Option<&RowBias>) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(tape, b, x_q)?;
        let k = self.k.forward(tape, b, x_kv)?;
        let v = self.v.forward(tape, b, x_kv)?;
        let (mixed, weights) = if self.heads == 1 {
            let (o, w) = modulated_attention(tape, q, k, v, bias)?;
            (o, vec![w])
        } else {
            let dh = tape.value(q).cols() / self.heads;
            let mut outs = Vec::with_capacity(self.heads);
            let mut ws = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let (o, w) = modulated_attention(tape, qh, kh, vh, bias)?;
                outs.push(o);
                ws.push(w);
            }
            (tape.concat_cols(&outs)?, ws)
        };
        Ok((self.o.forward(tape, b, mixed)?, weights))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub self_attn: AttentionParams,
    pub ln_self: LayerNorm,
    pub cross_attn: AttentionParams,
    pub ln_cross: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln_ffn: LayerNorm,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, group: ParamGroup, cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        Self {
            self_attn: AttentionParams::new(store, &format!("{name}.self"), group, d, cfg.d_k, cfg.heads, rng),
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), group, d),
            cross_attn: AttentionParams::new(store, &format!("{name}.cross"), group, d, cfg.d_k, cfg.heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), group, d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), group, d, cfg.ffn_hidden, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), group, cfg.ffn_hidden, d, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), group, d),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.self_attn.ids();
        ids.extend(self.ln_self.ids());
        ids.extend(self.cross_attn.ids());
        ids.extend(self.ln_cross.ids());
        ids.extend(self.ffn_in.ids());
        ids.extend(self.ffn_out.ids());
        ids.extend(self.ln_ffn.ids());
        ids
    }

    fn forward(&self, tape: &mut Tape, b: &Bound, x: Var, patches: Var, bias: Option<&RowBias>) -> Result<(Var, Vec<Var>)> {
        let (a, _) = self.self_attn.forward(tape, b, x, x, None)?;
        let x = tape.add(x, a)?;
        let x = self.ln_self.forward(tape, b, x)?;
        let (c, weights) = self.cross_attn.forward(tape, b, x, patches, bias)?;
        let x = tape.add(x, c)?;
        let x = self.ln_cross.forward(tape, b, x)?;
        let h = self.ffn_in.forward(tape, b, x)?;
        let h = tape.gelu(h);
        let f = self.ffn_out.forward(tape, b, h)?;
        let x = tape.add(x, f)?;
        Ok((self.ln_ffn.forward(tape, b, x)?, weights))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub config: FusionConfig,
    /// `M × d_model` fusion queries.
    pub queries: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, cfg: &FusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let std = 1.0 / (cfg.d_model as f64).sqrt();
        let queries = store.add(format!("{name}.queries"), group, init::normal(cfg.n_queries, cfg.d_model, std, rng));
        store.set_trainable(queries, cfg.queries_trainable);
        let blocks = (0..cfg.n_blocks)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), group, cfg, rng))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            queries,
            blocks,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.queries];
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids
    }
}

/// Patch embeddings placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PatchVar {
    pub var: Var,
    pub grid: (usize, usize),
}

/// Which tokens take part in an encoder pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct EncodeInput {
    pub cls: Option<Var>,
    pub use_queries: bool,
    pub extra: Option<Var>,
    pub text: Option<Var>,
}

/// Region bias for the cross-attention of a pass.
#[derive(Clone, Debug)]
pub struct Modulation<'a> {
    pub mask: &'a RegionMask,
    /// `1 × 1` scalar, or `M × 1` with one value per fusion query.
    pub beta: Var,
}

#[derive(Clone, Debug, Default)]
pub struct EncodeOutput {
    pub cls: Option<Var>,
    pub queries: Option<Var>,
    pub extra: Option<Var>,
    pub text: Option<Var>,
    /// Cross-attention weights per block (first head).
    pub cross_weights: Vec<Var>,
}

/// Runs the fusion encoder over a token set against image patches.
pub fn multimodal_encode(
    tape: &mut Tape,
    b: &Bound,
    fusion: &FusionParams,
    patches: PatchVar,
    input: EncodeInput,
    modulation: Option<&Modulation<'_>>,
) -> Result<EncodeOutput> {
    let cfg = &fusion.config;
    let mut parts = Vec::new();
    let mut spans = [None; 4];
    let mut rows = 0;
    let mut push = |tape: &Tape, slot: usize, v: Var, parts: &mut Vec<Var>| {
        let n = tape.value(v).rows();
        spans[slot] = Some((rows, n));
        rows += n;
        parts.push(v);
    };
    if let Some(c) = input.cls {
        push(tape, 0, c, &mut parts);
    }
    if input.use_queries {
        push(tape, 1, b[fusion.queries], &mut parts);
    }
    if let Some(e) = input.extra {
        push(tape, 2, e, &mut parts);
    }
    if let Some(t) = input.text {
        push(tape, 3, t, &mut parts);
    }
    if parts.is_empty() {
        return Err(Error::Contract("encoder pass with no tokens".into()));
    }
    let n_patches = tape.value(patches.var).rows();
    if patches.grid.0 * patches.grid.1 != n_patches {
        return Err(Error::Dimension(format!("{} patches for grid {:?}", n_patches, patches.grid)));
    }

    let bias = match modulation {
        None => None,
        Some(m) => {
            if m.mask.grid() != patches.grid {
                return Err(Error::Alignment {
                    mask: m.mask.grid(),
                    patches: patches.grid,
                });
            }
            let beta = row_beta(tape, m.beta, &spans, cfg.n_queries)?;
            Some(RowBias {
                beta,
                mask: Rc::from(m.mask.values()),
            })
        }
    };

    let mut x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let mut cross_weights = Vec::with_capacity(fusion.blocks.len());
    for (i, block) in fusion.blocks.iter().enumerate() {
        let active = if i == 0 || cfg.bias_all_blocks { bias.as_ref() } else { None };
        let (y, w) = block.forward(tape, b, x, patches.var, active)?;
        x = y;
        cross_weights.push(w[0]);
    }

    let mut out = EncodeOutput {
        cross_weights,
        ..Default::default()
    };
    let slots = [&mut out.cls, &mut out.queries, &mut out.extra, &mut out.text];
    for (slot, span) in slots.into_iter().zip(spans) {
        if let Some((start, len)) = span {
            *slot = Some(tape.slice_rows(x, start, len)?);
        }
    }
    Ok(out)
}

/// Expands a per-query bias vector to one value per token row. Rows that are
/// not fusion queries get the mean of the vector. Scalars pass through.
fn row_beta(tape: &mut Tape, beta: Var, spans: &[Option<(usize, usize)>; 4], n_queries: usize) -> Result<Var> {
    let shape = tape.value(beta).shape();
    if shape == [1, 1] {
        return Ok(beta);
    }
    if shape != [n_queries, 1] || spans[1].is_none() {
        return Err(Error::Dimension(format!(
            "bias of shape {shape:?} needs the {n_queries} fusion queries in the token set"
        )));
    }
    let mean = tape.mean(beta);
    let mut parts = Vec::new();
    for (slot, span) in spans.iter().enumerate() {
        let Some((_, len)) = span else { continue };
        if slot == 1 {
            parts.push(beta);
        } else {
            parts.extend(std::iter::repeat_n(mean, *len));
        }
    }
    tape.concat_rows(&parts)
}
