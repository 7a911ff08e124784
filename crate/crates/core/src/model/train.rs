use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{contrastive_loss, query_forward, target_forward, BetaSource, ModelParams, QueryView, Sample};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Tape};
use crate::params::ParamGroup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_caam: f64,
    pub lr_encoder: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub beta_source: BetaSource,
    pub view: QueryView,
    /// Subsets whose training quadruples are used; empty means all.
    pub subsets: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr_caam: 1e-2,
            lr_encoder: 1e-3,
            seed: 0,
            adam: AdamConfig::default(),
            beta_source: BetaSource::Adaptive,
            view: QueryView::Full,
            subsets: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Learning rates and schedule as published for the full-size model.
    pub fn paper_preset() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr_caam: 1e-4,
            lr_encoder: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr_caam >= 0.0 && self.lr_encoder >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean predicted bias over the epoch's queries, when the branch used one.
    pub mean_beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
}

/// Mini-batch AdamW over shuffled samples. Frozen parameters and parameters
/// that received no gradient are left untouched.
pub fn train(cfg: &TrainConfig, samples: &[Sample], params: &mut ModelParams) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size > samples.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam, params.store.params().iter().map(|p| p.value.len()));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut initial_loss = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut beta_sum, mut beta_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            tape.clear();
            let b = params.store.bind(&mut tape);
            let mut fq = Vec::with_capacity(chunk.len());
            let mut ft = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let q = query_forward(&mut tape, &b, params, &s.query, cfg.beta_source, cfg.view)?;
                if let Some(beta) = q.beta {
                    let v = tape.value(beta);
                    beta_sum += v.data().iter().sum::<f64>() / v.len() as f64;
                    beta_n += 1;
                }
                fq.push(q.embedding);
                ft.push(target_forward(&mut tape, &b, params, &s.target)?);
            }
            let fq = tape.concat_rows(&fq)?;
            let ft = tape.concat_rows(&ft)?;
            let loss = contrastive_loss(&mut tape, fq, ft, params.temperature())?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Degenerate(format!("loss became {value} in epoch {epoch}")));
            }
            initial_loss.get_or_insert(value);
            loss_sum += value;
            batches += 1;
            tape.backward(loss)?;

            adam.begin_step();
            for (slot, p) in params.store.params_mut().iter_mut().enumerate() {
                if !p.trainable {
                    continue;
                }
                let Some(g) = tape.grad(b.vars()[slot]) else { continue };
                let lr = match p.group {
                    ParamGroup::Caam => cfg.lr_caam,
                    ParamGroup::Encoder => cfg.lr_encoder,
                };
                adam.update(slot, &mut p.value, g, lr)?;
            }
        }
        epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            mean_beta: (beta_n > 0).then(|| beta_sum / beta_n as f64),
        });
    }
    Ok(TrainReport {
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        epochs,
    })
}
