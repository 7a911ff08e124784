//! End-to-end finite-difference check of the training loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{contrastive_loss, query_forward, target_forward, BetaSource, ModelConfig, ModelParams, QueryInput, QueryView, Sample};
use crate::caam::{CaamConfig, CrmKind, ModulationForm};
use crate::encoders::{FrozenEncoder, PatchEmbeddings, TextEmbedding};
use crate::error::Result;
use crate::fusion::FusionConfig;
use crate::geometry::BBox;
use crate::numerics::{max_relative_error_with_floor, Tape, Tensor};
use crate::params::ParamGroup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub grid: (usize, usize),
    pub n_queries: usize,
    pub n_probes: usize,
    pub d_model: usize,
    pub batch: usize,
    pub l_text: usize,
    pub hidden: usize,
    pub crm: CrmKind,
    pub form: ModulationForm,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            grid: (2, 2),
            n_queries: 2,
            n_probes: 2,
            d_model: 6,
            batch: 2,
            l_text: 2,
            hidden: 8,
            crm: CrmKind::Transformer,
            form: ModulationForm::Scalar,
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub name: String,
    pub group: ParamGroup,
    pub len: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn batch_loss(params: &ModelParams, samples: &[Sample], tape: &mut Tape) -> Result<(crate::numerics::Var, crate::params::Bound)> {
    let b = params.store.bind(tape);
    let mut fq = Vec::new();
    let mut ft = Vec::new();
    for s in samples {
        fq.push(query_forward(tape, &b, params, &s.query, BetaSource::Adaptive, QueryView::Full)?.embedding);
        ft.push(target_forward(tape, &b, params, &s.target)?);
    }
    let fq = tape.concat_rows(&fq)?;
    let ft = tape.concat_rows(&ft)?;
    Ok((contrastive_loss(tape, fq, ft, params.temperature())?, b))
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// A tiny model with every parameter randomized (including the zero-initialized
/// modulation head) and a random batch.
pub fn tiny_problem(cfg: &GradCheckConfig) -> Result<(ModelParams, Vec<Sample>)> {
    let d = cfg.d_model;
    let model_cfg = ModelConfig {
        d_latent: d.min(4),
        l_text: cfg.l_text,
        d_embed: d,
        temperature: 0.07,
        fusion: FusionConfig {
            d_model: d,
            d_k: d,
            n_queries: cfg.n_queries,
            ffn_hidden: cfg.hidden,
            ..FusionConfig::default()
        },
        caam: CaamConfig {
            n_probes: cfg.n_probes,
            crm: cfg.crm,
            crm_hidden: cfg.hidden,
            form: cfg.form,
            ..CaamConfig::default()
        },
    };
    let encoder = FrozenEncoder::new(model_cfg.d_latent, d, cfg.l_text, cfg.seed)?;
    let mut params = ModelParams::new(&model_cfg, encoder, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for p in params.store.params_mut() {
        let noise = random_tensor(&mut rng, p.value.rows(), p.value.cols(), 0.3);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let n = cfg.grid.0 * cfg.grid.1;
    let samples = (0..cfg.batch)
        .map(|i| {
            let x0 = if i % 2 == 0 { 0.0 } else { 0.5 };
            Sample {
                query: QueryInput {
                    patches: Arc::new(PatchEmbeddings {
                        grid: cfg.grid,
                        tokens: random_tensor(&mut rng, n, d, 1.0),
                    }),
                    text: Arc::new(TextEmbedding {
                        tokens: random_tensor(&mut rng, cfg.l_text, d, 1.0),
                    }),
                    bbox: BBox::new(x0, 0.0, x0 + 0.5, 1.0).expect("valid box"),
                },
                target: Arc::new(PatchEmbeddings {
                    grid: cfg.grid,
                    tokens: random_tensor(&mut rng, n, d, 1.0),
                }),
            }
        })
        .collect();
    Ok((params, samples))
}

/// Compares backward gradients of the batch loss with central differences,
/// one row per trainable tensor.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<Vec<GradCheckRow>> {
    let (mut params, samples) = tiny_problem(cfg)?;
    let mut tape = Tape::new();
    let (loss, b) = batch_loss(&params, &samples, &mut tape)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = b.vars().iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec)).collect();

    let eval = |params: &ModelParams| -> Result<f64> {
        let mut t = Tape::inference();
        let (l, _) = batch_loss(params, &samples, &mut t)?;
        Ok(t.value(l).item())
    };
    // Gradients that vanish by symmetry (for example key biases, which shift
    // every logit of a row equally) are compared against this absolute floor.
    let global = analytic.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let abs_floor = 1e-5 * global;
    let mut numerics = Vec::new();
    for slot in 0..params.store.len() {
        if !params.store.params()[slot].trainable {
            continue;
        }
        let len = params.store.params()[slot].value.len();
        let mut numeric = vec![0.0; len];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = params.store.params()[slot].value.data()[i];
            params.store.params_mut()[slot].value.data_mut()[i] = orig + cfg.eps;
            let up = eval(&params)?;
            params.store.params_mut()[slot].value.data_mut()[i] = orig - cfg.eps;
            let down = eval(&params)?;
            params.store.params_mut()[slot].value.data_mut()[i] = orig;
            *num = (up - down) / (2.0 * cfg.eps);
        }
        numerics.push((slot, numeric));
    }
    let rows = numerics
        .into_iter()
        .map(|(slot, numeric)| {
            let p = &params.store.params()[slot];
            let a = analytic[slot].clone().unwrap_or_else(|| vec![0.0; numeric.len()]);
            let err = max_relative_error_with_floor(&a, &numeric, abs_floor);
            GradCheckRow {
                name: p.name.clone(),
                group: p.group,
                len: numeric.len(),
                max_rel_error: err,
                passed: err < cfg.tolerance,
            }
        })
        .collect();
    Ok(rows)
}
