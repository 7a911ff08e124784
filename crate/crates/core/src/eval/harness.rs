use serde::{Deserialize, Serialize};

use super::{embed_gallery, evaluate, evaluate_with, EvalSet, MetricsReport, Recalls};
use crate::benchgen::{perturb_bbox, PerturbMode};
use crate::caam::{CaamParams, CrmKind, ModulationForm};
use crate::encoders::FrozenEncoder;
use crate::error::{Error, Result};
use crate::geometry::RegionMask;
use crate::model::{train, BetaSource, ModelConfig, ModelParams, QueryView, Sample, TrainConfig};

/// Sweep grid in units of `√d_k`.
pub const DEFAULT_BETA_MULTIPLIERS: [f64; 7] = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

pub fn beta_grid(multipliers: &[f64], d_k: usize) -> Vec<f64> {
    multipliers.iter().map(|m| m * (d_k as f64).sqrt()).collect()
}

/// Rows of delimited text with a header line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f4).unwrap_or_default()
}

fn recall_cells(r: &Recalls) -> Vec<String> {
    vec![f4(r.rid_at_1), f4(r.r_at_1), f4(r.r_at_5), f4(r.average())]
}

fn mean_beta(report: &MetricsReport) -> Option<f64> {
    let b: Vec<f64> = report.subsets.iter().filter_map(|s| s.mean_beta).collect();
    (!b.is_empty()).then(|| b.iter().sum::<f64>() / b.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    /// The fixed bias, or `None` for the adaptive row.
    pub beta: Option<f64>,
    pub report: MetricsReport,
}

/// Evaluates the same parameters with each fixed bias, then adaptively.
pub fn beta_sweep(params: &ModelParams, sets: &[EvalSet], betas: &[f64], config_hash: &str, seed: u64) -> Result<Vec<SweepRow>> {
    let galleries = sets.iter().map(|s| embed_gallery(params, s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &beta in betas {
        let report = evaluate_with(params, sets, &galleries, BetaSource::Fixed { beta }, QueryView::Full, config_hash, seed, true)?;
        rows.push(SweepRow {
            label: format!("fixed {beta:.4}"),
            beta: Some(beta),
            report,
        });
    }
    let report = evaluate_with(params, sets, &galleries, BetaSource::Adaptive, QueryView::Full, config_hash, seed, true)?;
    rows.push(SweepRow {
        label: "adaptive".into(),
        beta: None,
        report,
    });
    Ok(rows)
}

impl SweepRow {
    pub fn table(rows: &[SweepRow], d_k: usize) -> Table {
        let mut t = Table::new(&["label", "beta", "beta_over_sqrt_dk", "rid_at_1", "r_at_1", "r_at_5", "avg", "mean_beta"]);
        for r in rows {
            let mut row = vec![r.label.clone(), opt(r.beta), opt(r.beta.map(|b| b / (d_k as f64).sqrt()))];
            row.extend(recall_cells(&r.report.macro_average));
            row.push(opt(mean_beta(&r.report)));
            t.push(row);
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub mode: PerturbMode,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub label: String,
    pub perturbation: Option<Perturbation>,
    /// Mean IoU between original and evaluated boxes (0 for the no-box row).
    pub achieved_iou: f64,
    pub report: MetricsReport,
}

const PERTURB_RETRIES: u64 = 32;

/// Adaptive evaluation under perturbed boxes, plus a no-box row that runs
/// the unbiased path.
pub fn robustness_eval(params: &ModelParams, sets: &[EvalSet], perturbations: &[Perturbation], config_hash: &str, seed: u64) -> Result<Vec<RobustnessRow>> {
    let galleries = sets.iter().map(|s| embed_gallery(params, s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for p in perturbations {
        let mut ious = Vec::new();
        let mut perturbed = Vec::with_capacity(sets.len());
        for (si, set) in sets.iter().enumerate() {
            let mut s = set.clone();
            for (qi, q) in s.queries.iter_mut().enumerate() {
                let base = seed ^ ((si as u64) << 48) ^ ((qi as u64) << 16);
                let mut chosen = None;
                for attempt in 0..PERTURB_RETRIES {
                    let b = perturb_bbox(&q.bbox, p.mode, p.iou, base.wrapping_add(attempt))?;
                    if RegionMask::from_bbox(&b, q.patches.grid).is_ok() {
                        chosen = Some(b);
                        break;
                    }
                }
                let b = chosen.ok_or_else(|| Error::Perturbation(format!("every perturbed box of query {qi} covers no patch")))?;
                ious.push(q.bbox.iou(&b));
                q.bbox = b;
            }
            perturbed.push(s);
        }
        let report = evaluate_with(params, &perturbed, &galleries, BetaSource::Adaptive, QueryView::Full, config_hash, seed, true)?;
        let achieved_iou = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
        rows.push(RobustnessRow {
            label: format!("{} iou={:.2}", p.mode, p.iou),
            perturbation: Some(*p),
            achieved_iou,
            report,
        });
    }
    let report = evaluate_with(params, sets, &galleries, BetaSource::Off, QueryView::Full, config_hash, seed, true)?;
    rows.push(RobustnessRow {
        label: "no bbox".into(),
        perturbation: None,
        achieved_iou: 0.0,
        report,
    });
    Ok(rows)
}

impl RobustnessRow {
    pub fn table(rows: &[RobustnessRow]) -> Table {
        let mut t = Table::new(&["label", "mode", "target_iou", "achieved_iou", "rid_at_1", "r_at_1", "r_at_5", "avg"]);
        for r in rows {
            let mut row = vec![
                r.label.clone(),
                r.perturbation.map(|p| p.mode.to_string()).unwrap_or_else(|| "none".into()),
                opt(r.perturbation.map(|p| p.iou)),
                f4(r.achieved_iou),
            ];
            row.extend(recall_cells(&r.report.macro_average));
            t.push(row);
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaamVariant {
    pub crm: CrmKind,
    pub probes_learnable: bool,
    pub layers: usize,
    pub n_probes: usize,
    pub form: ModulationForm,
}

impl CaamVariant {
    /// Every combination of the given choices, in nested order.
    pub fn grid(crms: &[CrmKind], probes: &[bool], layers: &[usize], ks: &[usize], forms: &[ModulationForm]) -> Vec<CaamVariant> {
        let mut out = Vec::new();
        for &crm in crms {
            for &probes_learnable in probes {
                for &l in layers {
                    for &n_probes in ks {
                        for &form in forms {
                            out.push(CaamVariant {
                                crm,
                                probes_learnable,
                                layers: l,
                                n_probes,
                                form,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        c.caam.crm = self.crm;
        c.caam.probes_learnable = self.probes_learnable;
        c.caam.crm_layers = self.layers;
        c.caam.n_probes = self.n_probes;
        c.caam.form = self.form;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: CaamVariant,
    /// Scalars in the reasoning module.
    pub crm_params: usize,
    /// Trainable scalars in the modulator overall.
    pub caam_params: usize,
    pub report: MetricsReport,
}

/// Trains and evaluates each variant from the same seed.
#[allow(clippy::too_many_arguments)]
pub fn caam_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    encoder: &FrozenEncoder,
    samples: &[Sample],
    sets: &[EvalSet],
    variants: &[CaamVariant],
    config_hash: &str,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants {
        let cfg = v.apply(base);
        let mut params = ModelParams::new(&cfg, encoder.clone(), seed)?;
        let tc = TrainConfig {
            beta_source: BetaSource::Adaptive,
            view: QueryView::Full,
            ..train_cfg.clone()
        };
        train(&tc, samples, &mut params)?;
        let report = evaluate(&params, sets, BetaSource::Adaptive, QueryView::Full, config_hash, seed)?;
        let trainable = params.caam.ids().into_iter().filter(|&id| params.store.get(id).trainable);
        rows.push(AblationRow {
            variant: *v,
            crm_params: params.store.count(params.caam.crm.ids()),
            caam_params: params.store.count(trainable),
            report,
        });
    }
    Ok(rows)
}

impl AblationRow {
    pub fn table(rows: &[AblationRow]) -> Table {
        let mut t = Table::new(&[
            "crm",
            "probes",
            "layers",
            "k",
            "form",
            "crm_params",
            "caam_params",
            "rid_at_1",
            "r_at_1",
            "r_at_5",
            "avg",
        ]);
        for r in rows {
            let v = r.variant;
            let mut row = vec![
                v.crm.to_string(),
                if v.probes_learnable { "learnable" } else { "frozen" }.to_string(),
                v.layers.to_string(),
                v.n_probes.to_string(),
                v.form.to_string(),
                r.crm_params.to_string(),
                r.caam_params.to_string(),
            ];
            row.extend(recall_cells(&r.report.macro_average));
            t.push(row);
        }
        t
    }

    /// Closed-form count for the variant's reasoning module.
    pub fn expected_crm_params(&self, base: &ModelConfig) -> usize {
        CaamParams::crm_param_count(&self.variant.apply(base).caam, base.fusion.d_model)
    }
}

/// Trains and evaluates a model whose query branch sees only the boxed patches.
pub fn roi_crop_baseline(
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    encoder: &FrozenEncoder,
    samples: &[Sample],
    sets: &[EvalSet],
    config_hash: &str,
    seed: u64,
) -> Result<(ModelParams, MetricsReport)> {
    let mut params = ModelParams::new(cfg, encoder.clone(), seed)?;
    let tc = TrainConfig {
        beta_source: BetaSource::Off,
        view: QueryView::RoiCrop,
        ..train_cfg.clone()
    };
    train(&tc, samples, &mut params)?;
    let report = evaluate(&params, sets, BetaSource::Off, QueryView::RoiCrop, config_hash, seed)?;
    Ok((params, report))
}

/// Labelled reports side by side.
pub fn comparison_table(rows: &[(&str, &MetricsReport)]) -> Table {
    let mut t = Table::new(&["method", "rid_at_1", "r_at_1", "r_at_5", "avg"]);
    for (label, r) in rows {
        let mut row = vec![label.to_string()];
        row.extend(recall_cells(&r.macro_average));
        t.push(row);
    }
    t
}
