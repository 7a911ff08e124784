use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{filter_pairs, image_features, Subset, World};
use crate::encoders::FrozenEncoder;
use crate::error::Result;
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quadruple {
    pub ref_image_id: u32,
    pub bbox: BBox,
    /// Scene id of the target, which the modification text describes.
    pub text_context_id: u32,
    pub target_image_id: u32,
    pub instance_id: u32,
    pub category_id: u32,
    pub subset: Subset,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuadrupleSplit {
    pub train: Vec<Quadruple>,
    pub eval: Vec<Quadruple>,
    pub train_instances: BTreeSet<u32>,
    pub eval_instances: BTreeSet<u32>,
}

/// Filters each regular instance set, keeps pairs that share the ambient and
/// change the scene, caps them per instance, and splits by instance.
pub fn make_quadruples(world: &World, encoder: &FrozenEncoder) -> Result<QuadrupleSplit> {
    let cfg = &world.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0051_u64.rotate_left(40));
    let mut per_instance: Vec<(u32, Vec<Quadruple>)> = Vec::new();
    for set in world.images_by_instance() {
        let Some(first) = set.first() else { continue };
        if world.instance(first.instance_id).reserve {
            continue;
        }
        let feats = set.iter().map(|img| image_features(encoder, img)).collect::<Result<Vec<_>>>()?;
        let mut quads: Vec<Quadruple> = filter_pairs(&feats, &cfg.thresholds)?
            .into_iter()
            .map(|(i, j)| (set[i], set[j]))
            .filter(|(r, t)| r.ambient_id == t.ambient_id && r.context_id != t.context_id)
            .map(|(r, t)| Quadruple {
                ref_image_id: r.image_id,
                bbox: r.bbox,
                text_context_id: t.context_id,
                target_image_id: t.image_id,
                instance_id: r.instance_id,
                category_id: r.category_id,
                subset: cfg.subset,
            })
            .collect();
        quads.shuffle(&mut rng);
        quads.truncate(cfg.pairs_per_instance);
        if !quads.is_empty() {
            per_instance.push((first.instance_id, quads));
        }
    }
    per_instance.shuffle(&mut rng);
    let n_eval = (per_instance.len() as f64 * cfg.eval_fraction).round() as usize;
    let mut split = QuadrupleSplit::default();
    for (k, (id, quads)) in per_instance.into_iter().enumerate() {
        if k < n_eval {
            split.eval_instances.insert(id);
            split.eval.extend(quads);
        } else {
            split.train_instances.insert(id);
            split.train.extend(quads);
        }
    }
    let key = |q: &Quadruple| (q.instance_id, q.ref_image_id, q.target_image_id);
    split.train.sort_by_key(key);
    split.eval.sort_by_key(key);
    Ok(split)
}
