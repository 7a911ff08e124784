//! Synthetic object-anchored retrieval benchmark: world generation, pair
//! filtering, quadruple construction, hard-negative galleries and box
//! perturbation.

mod filter;
mod gallery;
pub mod io;
mod perturb;
mod quadruples;
mod world;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{filter_pairs, image_features, FilterThresholds};
pub use gallery::{build_gallery, GalleryConfig, GalleryEntry, GalleryManifest};
pub use perturb::{perturb_bbox, PerturbMode};
pub use quadruples::{make_quadruples, Quadruple, QuadrupleSplit};
pub use world::{generate_world, InstanceRecord, World};

/// The four synthetic domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Fashion,
    Car,
    Product,
    Landmark,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::Fashion, Subset::Car, Subset::Product, Subset::Landmark];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Fashion => "fashion",
            Subset::Car => "car",
            Subset::Product => "product",
            Subset::Landmark => "landmark",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Filtering thresholds for the subset, from the benchmark's published table.
    pub fn thresholds(self) -> FilterThresholds {
        let (valid, high, centric, count) = match self {
            Subset::Fashion => (8, 0.92, 0.88, 3),
            Subset::Car => (10, 0.88, 0.85, 2),
            Subset::Product => (20, 0.88, 0.85, 2),
            Subset::Landmark => (15, 0.90, 0.88, 3),
        };
        FilterThresholds { valid, high, centric, count }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown subset '{s}' (expected fashion, car, product or landmark)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub subset: Subset,
    pub n_categories: usize,
    pub instances_per_category: usize,
    pub images_per_instance: usize,
    /// Held-out instances per category that only feed distractors and clutter.
    pub reserve_per_category: usize,
    pub reserve_images: usize,
    /// Scene latents; modification text describes the target's scene.
    pub n_contexts: usize,
    /// Ambient latents; part of the background that a pair keeps.
    pub n_ambients: usize,
    pub ambients_per_instance: usize,
    /// Probability that a background patch shows the ambient rather than the scene.
    pub ambient_fraction: f64,
    pub grid: (usize, usize),
    pub d_latent: usize,
    pub noise: f64,
    /// Side length range of the anchored box, in grid cells.
    pub bbox_cells: (usize, usize),
    /// Number of clutter objects per image.
    pub clutter: (usize, usize),
    /// Spread of instance identities around their category prototype.
    pub instance_spread: f64,
    pub near_duplicate_rate: f64,
    pub near_duplicate_noise: f64,
    pub thresholds: FilterThresholds,
    /// Cap on quadruples drawn from one instance.
    pub pairs_per_instance: usize,
    pub eval_fraction: f64,
    pub gallery: GalleryConfig,
    pub seed: u64,
}

impl WorldConfig {
    /// Default synthetic analog of a subset. Three dense subsets (many
    /// images per instance, few contexts) and one broad one.
    pub fn preset(subset: Subset, seed: u64) -> Self {
        let thresholds = subset.thresholds();
        let (n_categories, instances_per_category, n_contexts) = match subset {
            Subset::Fashion => (4, 22, 6),
            Subset::Car => (1, 90, 6),
            Subset::Product => (6, 15, 6),
            Subset::Landmark => (6, 15, 12),
        };
        let reserve_images = thresholds.valid.saturating_sub(1).max(2);
        // Enough reserve images for galleries of at least 400.
        let reserve_per_category = (480 / (n_categories * reserve_images)).max(2) + 2;
        Self {
            subset,
            n_categories,
            instances_per_category,
            images_per_instance: thresholds.valid + 2,
            reserve_per_category,
            reserve_images,
            n_contexts,
            n_ambients: 3,
            ambients_per_instance: 2,
            ambient_fraction: 0.4,
            grid: (8, 8),
            d_latent: 16,
            noise: 0.1,
            bbox_cells: (2, 4),
            clutter: (2, 3),
            instance_spread: 1.0,
            near_duplicate_rate: 0.1,
            near_duplicate_noise: 0.02,
            thresholds,
            pairs_per_instance: 12,
            eval_fraction: 0.2,
            gallery: GalleryConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("{}: {m}", self.subset)));
        if self.images_per_instance < 2 {
            return fail(format!("images_per_instance must be at least 2, got {}", self.images_per_instance));
        }
        if !(self.noise >= 0.0) {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.n_categories == 0 || self.instances_per_category == 0 {
            return fail("need at least one category and instance".into());
        }
        if self.n_contexts < 2 {
            return fail("need at least two contexts".into());
        }
        if self.n_ambients == 0 || self.ambients_per_instance == 0 || self.ambients_per_instance > self.n_ambients {
            return fail("ambients_per_instance must be in 1..=n_ambients".into());
        }
        if !(0.0..=1.0).contains(&self.ambient_fraction) || !(0.0..=1.0).contains(&self.near_duplicate_rate) {
            return fail("ambient_fraction and near_duplicate_rate must be in [0, 1]".into());
        }
        let (lo, hi) = self.bbox_cells;
        if lo == 0 || lo > hi || hi > self.grid.0.min(self.grid.1) {
            return fail(format!("bbox_cells {:?} do not fit the grid {:?}", self.bbox_cells, self.grid));
        }
        if self.clutter.0 > self.clutter.1 {
            return fail("clutter range is reversed".into());
        }
        if self.clutter.1 > 0 && self.reserve_per_category == 0 {
            return fail("clutter needs reserve instances".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return fail("eval_fraction must be in [0, 1)".into());
        }
        self.thresholds.validate()
    }
}

/// One world per subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub subsets: Vec<WorldConfig>,
}

impl BenchmarkConfig {
    pub fn preset(seed: u64) -> Self {
        Self {
            subsets: Subset::ALL
                .into_iter()
                .map(|s| WorldConfig::preset(s, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s.index() as u64 + 1)))
                .collect(),
        }
    }
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self::preset(0)
    }
}
