//! Context-aware attention modulator.
//!
//! Learnable probe tokens join the text in an encoder pass over the
//! reference patches. A contextual CLS token and the probe outputs go through
//! a reasoning module (CRM), and a linear head maps the CRM's CLS output to
//! the modulation: one scalar, or one value per fusion query.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{multimodal_encode, AttentionParams, EncodeInput, FusionConfig, FusionParams, PatchVar};
use crate::numerics::{Tape, Var};
use crate::params::{init, Bound, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrmKind {
    Average,
    Mlp,
    Transformer,
}

impl std::fmt::Display for CrmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrmKind::Average => "avg",
            CrmKind::Mlp => "mlp",
            CrmKind::Transformer => "transformer",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationForm {
    Scalar,
    Vector,
}

impl std::fmt::Display for ModulationForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModulationForm::Scalar => "scalar",
            ModulationForm::Vector => "vector",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaamConfig {
    pub n_probes: usize,
    pub probes_learnable: bool,
    pub crm: CrmKind,
    pub crm_layers: usize,
    pub crm_hidden: usize,
    pub form: ModulationForm,
    /// Whether the modulator's encoder pass reuses the query-branch encoder
    /// weights (true) or owns a separate copy.
    pub shared_encoder: bool,
    pub probe_init_std: f64,
}

impl Default for CaamConfig {
    fn default() -> Self {
        Self {
            n_probes: 8,
            probes_learnable: true,
            crm: CrmKind::Transformer,
            crm_layers: 2,
            crm_hidden: 64,
            form: ModulationForm::Scalar,
            shared_encoder: true,
            probe_init_std: 0.02,
        }
    }
}

impl CaamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_probes == 0 {
            return Err(Error::Config("n_probes must be at least 1".into()));
        }
        if self.crm == CrmKind::Transformer && self.crm_layers == 0 {
            return Err(Error::Config("transformer CRM needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrmLayer {
    pub attn: AttentionParams,
    pub ln_attn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln_ffn: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Crm {
    Average,
    Mlp { hidden: Linear, out: Linear },
    Transformer { layers: Vec<CrmLayer> },
}

impl Crm {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            Crm::Average => vec![],
            Crm::Mlp { hidden, out } => hidden.ids().into_iter().chain(out.ids()).collect(),
            Crm::Transformer { layers } => layers
                .iter()
                .flat_map(|l| {
                    let mut ids = l.attn.ids();
                    ids.extend(l.ln_attn.ids());
                    ids.extend(l.ffn_in.ids());
                    ids.extend(l.ffn_out.ids());
                    ids.extend(l.ln_ffn.ids());
                    ids
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaamParams {
    pub config: CaamConfig,
    /// `K × d_model`
    pub probes: ParamId,
    /// `1 × d_model`
    pub ctx_cls: ParamId,
    pub crm: Crm,
    /// `d_model → 1` (scalar) or `d_model → M` (vector).
    pub head: Linear,
    /// Present when the modulator does not share the query-branch encoder.
    pub encoder: Option<FusionParams>,
}

impl CaamParams {
    pub fn new(store: &mut ParamStore, cfg: &CaamConfig, fusion: &FusionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Caam;
        let d = fusion.d_model;
        let probes = store.add("caam.probes", g, init::normal(cfg.n_probes, d, cfg.probe_init_std, rng));
        store.set_trainable(probes, cfg.probes_learnable);
        let ctx_cls = store.add("caam.ctx_cls", g, init::normal(1, d, cfg.probe_init_std, rng));
        let crm = match cfg.crm {
            CrmKind::Average => Crm::Average,
            CrmKind::Mlp => Crm::Mlp {
                hidden: Linear::new(store, "caam.crm.hidden", g, d, cfg.crm_hidden, rng),
                out: Linear::new(store, "caam.crm.out", g, cfg.crm_hidden, d, rng),
            },
            CrmKind::Transformer => Crm::Transformer {
                layers: (0..cfg.crm_layers)
                    .map(|i| {
                        let n = format!("caam.crm.layer{i}");
                        CrmLayer {
                            attn: AttentionParams::new(store, &format!("{n}.attn"), g, d, d, 1, rng),
                            ln_attn: LayerNorm::new(store, &format!("{n}.ln_attn"), g, d),
                            ffn_in: Linear::new(store, &format!("{n}.ffn_in"), g, d, cfg.crm_hidden, rng),
                            ffn_out: Linear::new(store, &format!("{n}.ffn_out"), g, cfg.crm_hidden, d, rng),
                            ln_ffn: LayerNorm::new(store, &format!("{n}.ln_ffn"), g, d),
                        }
                    })
                    .collect(),
            },
        };
        let out_dim = match cfg.form {
            ModulationForm::Scalar => 1,
            ModulationForm::Vector => fusion.n_queries,
        };
        let head = Linear::zeros(store, "caam.head", g, d, out_dim);
        let encoder = if cfg.shared_encoder {
            None
        } else {
            Some(FusionParams::new(store, "caam.encoder", g, fusion, rng)?)
        };
        Ok(Self {
            config: cfg.clone(),
            probes,
            ctx_cls,
            crm,
            head,
            encoder,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.probes, self.ctx_cls];
        ids.extend(self.crm.ids());
        ids.extend(self.head.ids());
        if let Some(e) = &self.encoder {
            ids.extend(e.ids());
        }
        ids
    }

    /// Closed-form scalar count of the reasoning module for width `d`.
    pub fn crm_param_count(cfg: &CaamConfig, d: usize) -> usize {
        let h = cfg.crm_hidden;
        match cfg.crm {
            CrmKind::Average => 0,
            CrmKind::Mlp => d * h + h + h * d + d,
            // attention: 4 (d×d + d); two layer norms: 4d; ffn: d·h + h + h·d + d
            CrmKind::Transformer => cfg.crm_layers * (4 * d * d + 2 * d * h + 9 * d + h),
        }
    }
}

/// Aggregates `(K + 1) × d` tokens (contextual CLS first) into one `1 × d` vector.
pub fn crm_forward(tape: &mut Tape, b: &Bound, crm: &Crm, tokens: Var) -> Result<Var> {
    match crm {
        Crm::Average => Ok(tape.mean_rows(tokens)),
        Crm::Mlp { hidden, out } => {
            let m = tape.mean_rows(tokens);
            let h = hidden.forward(tape, b, m)?;
            let h = tape.gelu(h);
            out.forward(tape, b, h)
        }
        Crm::Transformer { layers } => {
            let mut x = tokens;
            for l in layers {
                let (a, _) = l.attn.forward(tape, b, x, x, None)?;
                let y = tape.add(x, a)?;
                let y = l.ln_attn.forward(tape, b, y)?;
                let h = l.ffn_in.forward(tape, b, y)?;
                let h = tape.gelu(h);
                let f = l.ffn_out.forward(tape, b, h)?;
                let y = tape.add(y, f)?;
                x = l.ln_ffn.forward(tape, b, y)?;
            }
            tape.slice_rows(x, 0, 1)
        }
    }
}

/// Predicts the modulation for one query: `1 × 1` for the scalar form,
/// `M × 1` for the vector form. The output is the raw linear value.
pub fn predict_beta(tape: &mut Tape, b: &Bound, shared: &FusionParams, caam: &CaamParams, patches: PatchVar, text: Var) -> Result<Var> {
    let encoder = caam.encoder.as_ref().unwrap_or(shared);
    let input = EncodeInput {
        cls: None,
        use_queries: false,
        extra: Some(b[caam.probes]),
        text: Some(text),
    };
    let enc = multimodal_encode(tape, b, encoder, patches, input, None)?;
    let probes_out = enc.extra.expect("probes were supplied");
    let tokens = tape.concat_rows(&[b[caam.ctx_cls], probes_out])?;
    let ctx = crm_forward(tape, b, &caam.crm, tokens)?;
    let out = caam.head.forward(tape, b, ctx)?;
    Ok(match caam.config.form {
        ModulationForm::Scalar => out,
        ModulationForm::Vector => tape.transpose(out),
    })
}
