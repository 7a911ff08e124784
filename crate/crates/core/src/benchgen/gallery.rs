use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Quadruple, Subset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryConfig {
    /// Distractors per distinct target image.
    pub distractor_ratio: f64,
    /// Lower bound on the total gallery size.
    pub min_size: usize,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        Self {
            distractor_ratio: 1.0,
            min_size: 400,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryEntry {
    pub image_id: u32,
    pub instance_id: u32,
    pub category_id: u32,
    pub is_target: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryManifest {
    pub subset: Subset,
    pub entries: Vec<GalleryEntry>,
}

impl GalleryManifest {
    /// Checks the three structural invariants against the queries it serves.
    pub fn check(&self, queries: &[Quadruple]) -> Result<()> {
        let targets: BTreeSet<u32> = queries.iter().map(|q| q.target_image_id).collect();
        let target_instances: BTreeSet<u32> = queries.iter().map(|q| q.instance_id).collect();
        let categories: BTreeSet<u32> = queries.iter().map(|q| q.category_id).collect();
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            *seen.entry(e.image_id).or_insert(0) += 1;
            if !e.is_target {
                if target_instances.contains(&e.instance_id) {
                    return Err(Error::Gallery(format!("distractor {} shares instance {}", e.image_id, e.instance_id)));
                }
                if !categories.contains(&e.category_id) {
                    return Err(Error::Gallery(format!(
                        "distractor {} has category {} absent from queries",
                        e.image_id, e.category_id
                    )));
                }
            }
        }
        for t in &targets {
            if seen.get(t) != Some(&1) {
                return Err(Error::Gallery(format!("target {t} appears {} times", seen.get(t).unwrap_or(&0))));
            }
        }
        Ok(())
    }

    pub fn position(&self, image_id: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.image_id == image_id)
    }
}

/// Splits `total` across categories in proportion to `counts`, by largest
/// remainder (ties to the smaller category id).
fn proportional(counts: &BTreeMap<u32, usize>, total: usize) -> BTreeMap<u32, usize> {
    let sum: usize = counts.values().sum();
    let mut alloc: BTreeMap<u32, usize> = BTreeMap::new();
    let mut rema = Vec::new();
    for (&cat, &c) in counts {
        let exact = total as f64 * c as f64 / sum as f64;
        alloc.insert(cat, exact.floor() as usize);
        rema.push((exact - exact.floor(), cat));
    }
    let mut left = total - alloc.values().sum::<usize>();
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, cat) in rema {
        if left == 0 {
            break;
        }
        *alloc.get_mut(&cat).expect("present") += 1;
        left -= 1;
    }
    alloc
}

/// Test targets plus same-category distractors from the reserve pool, with
/// distractor categories in proportion to the query categories.
pub fn build_gallery(subset: Subset, queries: &[Quadruple], pool: &[GalleryEntry], cfg: &GalleryConfig, seed: u64) -> Result<GalleryManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for q in queries {
        if seen.insert(q.target_image_id) {
            entries.push(GalleryEntry {
                image_id: q.target_image_id,
                instance_id: q.instance_id,
                category_id: q.category_id,
                is_target: true,
            });
        }
    }
    let n_targets = entries.len();
    let n_distractors = ((cfg.distractor_ratio * n_targets as f64).ceil() as usize).max(cfg.min_size.saturating_sub(n_targets));
    let mut counts = BTreeMap::new();
    for q in queries {
        *counts.entry(q.category_id).or_insert(0usize) += 1;
    }
    let target_instances: BTreeSet<u32> = queries.iter().map(|q| q.instance_id).collect();
    if !queries.is_empty() {
        for (cat, k) in proportional(&counts, n_distractors) {
            let candidates: Vec<&GalleryEntry> = pool
                .iter()
                .filter(|e| e.category_id == cat && !target_instances.contains(&e.instance_id) && !seen.contains(&e.image_id))
                .collect();
            if candidates.is_empty() {
                return Err(Error::Gallery(format!("reserve pool has no images of category {cat}")));
            }
            if candidates.len() < k {
                return Err(Error::Gallery(format!(
                    "category {cat} needs {k} distractors but the reserve pool has {}",
                    candidates.len()
                )));
            }
            for e in candidates.choose_multiple(&mut rng, k) {
                entries.push(GalleryEntry { is_target: false, ..**e });
            }
        }
    }
    entries.shuffle(&mut rng);
    let g = GalleryManifest { subset, entries };
    g.check(queries)?;
    Ok(g)
}
