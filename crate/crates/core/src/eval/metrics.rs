use serde::{Deserialize, Serialize};

use crate::benchgen::GalleryEntry;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One query's ranking of the gallery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub target_image_id: u32,
    pub instance_id: u32,
    /// Gallery indices, most similar first.
    pub order: Vec<usize>,
}

/// Gallery indices by descending cosine similarity to `query`; ties keep
/// ascending index order. Rows are assumed unit-normalized.
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Contract("cannot rank an empty gallery".into()));
    }
    // Adding 0.0 folds -0.0 into 0.0 so that signed zeros tie.
    let sims: Vec<f64> = gallery.iter().map(|g| g.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() + 0.0).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Ranks a matrix of queries against a gallery matrix.
pub fn rank_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Vec<Vec<usize>>> {
    let g: Vec<Vec<f64>> = (0..gallery.rows()).map(|r| gallery.row_slice(r).to_vec()).collect();
    (0..queries.rows()).map(|r| rank_gallery(queries.row_slice(r), &g)).collect()
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k = {k} for a gallery of {n}")));
    }
    Ok(())
}

/// Fraction of queries whose target image is in the top `k`.
pub fn recall_at_k(rankings: &[QueryRanking], gallery: &[GalleryEntry], k: usize) -> Result<f64> {
    check_k(k, gallery.len())?;
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings
        .iter()
        .filter(|r| r.order[..k].iter().any(|&i| gallery[i].image_id == r.target_image_id))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Fraction of queries with any top-`k` candidate showing the anchored instance.
pub fn instance_recall_at_k(rankings: &[QueryRanking], gallery: &[GalleryEntry], k: usize) -> Result<f64> {
    check_k(k, gallery.len())?;
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings
        .iter()
        .filter(|r| r.order[..k].iter().any(|&i| gallery[i].instance_id == r.instance_id))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recalls {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub rid_at_1: f64,
}

impl Recalls {
    pub fn compute(rankings: &[QueryRanking], gallery: &[GalleryEntry]) -> Result<Self> {
        Ok(Self {
            r_at_1: recall_at_k(rankings, gallery, 1)?,
            r_at_5: recall_at_k(rankings, gallery, 5.min(gallery.len()))?,
            rid_at_1: instance_recall_at_k(rankings, gallery, 1)?,
        })
    }

    /// Mean of the three recalls.
    pub fn average(&self) -> f64 {
        (self.r_at_1 + self.r_at_5 + self.rid_at_1) / 3.0
    }

    pub fn mean(rows: &[Recalls]) -> Recalls {
        let n = rows.len().max(1) as f64;
        Recalls {
            r_at_1: rows.iter().map(|r| r.r_at_1).sum::<f64>() / n,
            r_at_5: rows.iter().map(|r| r.r_at_5).sum::<f64>() / n,
            rid_at_1: rows.iter().map(|r| r.rid_at_1).sum::<f64>() / n,
        }
    }

    /// `R@1 ≤ R@5` and `R@1 ≤ R_ID@1`, all within `[0, 1]`.
    pub fn is_consistent(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.r_at_1) && unit(self.r_at_5) && unit(self.rid_at_1) && self.r_at_1 <= self.r_at_5 && self.r_at_1 <= self.rid_at_1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub subset: String,
    pub n_queries: usize,
    pub gallery_size: usize,
    #[serde(flatten)]
    pub recalls: Recalls,
    /// Mean bias applied to the queries, when one was applied.
    pub mean_beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subsets: Vec<SubsetMetrics>,
    pub macro_average: Recalls,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(subsets: Vec<SubsetMetrics>, config_hash: &str, seed: u64) -> Self {
        let rows: Vec<Recalls> = subsets.iter().map(|s| s.recalls).collect();
        Self {
            macro_average: Recalls::mean(&rows),
            subsets,
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.subsets.iter().all(|s| s.recalls.is_consistent())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}
