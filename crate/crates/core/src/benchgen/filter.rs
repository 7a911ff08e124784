use serde::{Deserialize, Serialize};

use crate::encoders::{FrozenEncoder, SyntheticImage};
use crate::error::{Error, Result};
use crate::numerics::cosine_sim;

/// Per-subset thresholds of the pair filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterThresholds {
    /// Minimum set size.
    pub valid: usize,
    /// Pairs more similar than this are dropped.
    pub high: f64,
    /// Similarity above which another image counts toward centrality.
    pub centric: f64,
    /// An image with at least this many near neighbours is dropped.
    pub count: usize,
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.centric && self.centric <= self.high && self.high < 1.0) {
            return Err(Error::Config(format!(
                "thresholds need 0 < centric ({}) <= high ({}) < 1",
                self.centric, self.high
            )));
        }
        if self.valid < 2 || self.count < 1 {
            return Err(Error::Config(format!(
                "thresholds need valid >= 2 and count >= 1, got {} and {}",
                self.valid, self.count
            )));
        }
        Ok(())
    }
}

/// Mean-pooled frozen-encoder patch embeddings, the feature used for filtering.
pub fn image_features(encoder: &FrozenEncoder, img: &SyntheticImage) -> Result<Vec<f64>> {
    let p = encoder.encode_image(img)?;
    let (n, d) = (p.tokens.rows(), p.tokens.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(p.tokens.row_slice(r)) {
            *m += v / n as f64;
        }
    }
    Ok(mean)
}

/// Admissible ordered `(ref, target)` index pairs within one instance set.
///
/// Sets smaller than `valid` yield nothing. An image is dropped when at least
/// `count` others exceed `centric` similarity to it; among the survivors,
/// pairs above `high` similarity are dropped.
pub fn filter_pairs(features: &[Vec<f64>], thr: &FilterThresholds) -> Result<Vec<(usize, usize)>> {
    let n = features.len();
    if n < thr.valid {
        return Ok(Vec::new());
    }
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine_sim(&features[i], &features[j])?;
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    let keep: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && sim[i][j] > thr.centric).count() < thr.count)
        .collect();
    let mut pairs = Vec::new();
    for i in (0..n).filter(|&i| keep[i]) {
        for j in (0..n).filter(|&j| j != i && keep[j]) {
            if sim[i][j] <= thr.high {
                pairs.push((i, j));
            }
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::Subset;

    #[test]
    fn undersized_set_is_empty() {
        let thr = Subset::Fashion.thresholds();
        let feats: Vec<Vec<f64>> = (0..thr.valid - 1).map(|i| vec![1.0, i as f64]).collect();
        assert!(filter_pairs(&feats, &thr).unwrap().is_empty());
    }

    #[test]
    fn too_similar_pair_is_excluded() {
        let thr = Subset::Fashion.thresholds();
        // Eight images spread on a circle 60 degrees apart, plus one at cosine
        // 0.95 to the first.
        let mut feats: Vec<Vec<f64>> = (0..7)
            .map(|k| {
                let a = k as f64 * std::f64::consts::PI / 3.5;
                vec![a.cos(), a.sin(), 0.0]
            })
            .collect();
        let t = 0.95f64.acos();
        feats.push(vec![t.cos(), 0.0, t.sin()]);
        let pairs = filter_pairs(&feats, &thr).unwrap();
        assert!(!pairs.contains(&(0, 7)) && !pairs.contains(&(7, 0)));
        assert!(pairs.contains(&(0, 1)));
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let t = FilterThresholds {
            valid: 5,
            high: 0.8,
            centric: 0.9,
            count: 1,
        };
        assert!(t.validate().is_err());
    }
}
