//! Ranking, recall metrics and the experiment harnesses built on them.

mod harness;
mod metrics;

use std::sync::Arc;

use rayon::prelude::*;

use crate::benchgen::{GalleryEntry, Subset};
use crate::encoders::PatchEmbeddings;
use crate::error::{Error, Result};
use crate::geometry::RegionMask;
use crate::model::{embed_queries, embed_queries_serial, embed_targets, BetaSource, ModelParams, QueryInput, QueryView};

pub use harness::{
    beta_grid, beta_sweep, caam_ablation, comparison_table, robustness_eval, roi_crop_baseline, AblationRow, CaamVariant, Perturbation, RobustnessRow,
    SweepRow, Table, DEFAULT_BETA_MULTIPLIERS,
};
pub use metrics::{instance_recall_at_k, rank_gallery, rank_matrix, recall_at_k, MetricsReport, QueryRanking, Recalls, SubsetMetrics};

/// Everything needed to evaluate one subset.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub subset: Subset,
    pub queries: Vec<QueryInput>,
    pub targets: Vec<u32>,
    pub instances: Vec<u32>,
    pub gallery: Vec<GalleryEntry>,
    pub gallery_patches: Vec<Arc<PatchEmbeddings>>,
}

pub fn embed_gallery(params: &ModelParams, set: &EvalSet) -> Result<Vec<Vec<f64>>> {
    embed_targets(params, &set.gallery_patches)
}

/// Metrics of one subset against precomputed gallery embeddings. With the
/// crop view, queries whose box covers no patch center are skipped.
pub fn evaluate_set(params: &ModelParams, set: &EvalSet, gallery: &[Vec<f64>], source: BetaSource, view: QueryView, parallel: bool) -> Result<SubsetMetrics> {
    let keep: Vec<usize> = (0..set.queries.len())
        .filter(|&i| view != QueryView::RoiCrop || RegionMask::from_bbox(&set.queries[i].bbox, set.queries[i].patches.grid).is_ok())
        .collect();
    let queries: Vec<QueryInput> = keep.iter().map(|&i| set.queries[i].clone()).collect();
    let emb = if parallel {
        embed_queries(params, &queries, source, view)?
    } else {
        embed_queries_serial(params, &queries, source, view)?
    };
    let rank = |(k, e): (usize, &crate::model::QueryEmbedding)| -> Result<QueryRanking> {
        let i = keep[k];
        Ok(QueryRanking {
            target_image_id: set.targets[i],
            instance_id: set.instances[i],
            order: rank_gallery(&e.embedding, gallery)?,
        })
    };
    let rankings: Vec<QueryRanking> = if parallel {
        emb.par_iter().enumerate().map(rank).collect::<Result<_>>()?
    } else {
        emb.iter().enumerate().map(rank).collect::<Result<_>>()?
    };
    if rankings.is_empty() {
        return Err(Error::Contract(format!("no evaluable queries in {}", set.subset)));
    }
    let betas: Vec<f64> = emb.iter().filter_map(|e| e.beta).collect();
    Ok(SubsetMetrics {
        subset: set.subset.to_string(),
        n_queries: rankings.len(),
        gallery_size: set.gallery.len(),
        recalls: Recalls::compute(&rankings, &set.gallery)?,
        mean_beta: (!betas.is_empty()).then(|| betas.iter().sum::<f64>() / betas.len() as f64),
    })
}

/// Embeds every gallery once and evaluates each subset.
pub fn evaluate(params: &ModelParams, sets: &[EvalSet], source: BetaSource, view: QueryView, config_hash: &str, seed: u64) -> Result<MetricsReport> {
    let galleries = sets.iter().map(|s| embed_gallery(params, s)).collect::<Result<Vec<_>>>()?;
    evaluate_with(params, sets, &galleries, source, view, config_hash, seed, true)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_with(
    params: &ModelParams,
    sets: &[EvalSet],
    galleries: &[Vec<Vec<f64>>],
    source: BetaSource,
    view: QueryView,
    config_hash: &str,
    seed: u64,
    parallel: bool,
) -> Result<MetricsReport> {
    let rows = sets
        .iter()
        .zip(galleries)
        .map(|(s, g)| evaluate_set(params, s, g, source, view, parallel))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(rows, config_hash, seed))
}
