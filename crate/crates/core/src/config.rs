//! Run configuration: one TOML document covering every module, resolved
//! against the presets and hashed for provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchgen::{BenchmarkConfig, FilterThresholds, GalleryConfig, PerturbMode, Subset, WorldConfig};
use crate::caam::{CrmKind, ModulationForm};
use crate::encoders::FrozenEncoder;
use crate::error::{Error, Result};
use crate::eval::{CaamVariant, Perturbation, DEFAULT_BETA_MULTIPLIERS};
use crate::model::{BetaSource, GradCheckConfig, ModelConfig, QueryView, TrainConfig};

/// Knobs applied to every subset's world.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharedWorld {
    pub n_ambients: Option<usize>,
    pub ambients_per_instance: Option<usize>,
    pub ambient_fraction: Option<f64>,
    pub grid: Option<(usize, usize)>,
    pub noise: Option<f64>,
    pub bbox_cells: Option<(usize, usize)>,
    pub clutter: Option<(usize, usize)>,
    pub instance_spread: Option<f64>,
    pub near_duplicate_rate: Option<f64>,
    pub near_duplicate_noise: Option<f64>,
    pub pairs_per_instance: Option<usize>,
    pub eval_fraction: Option<f64>,
    pub gallery: Option<GalleryConfig>,
}

/// Knobs for one subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsetWorld {
    pub n_categories: Option<usize>,
    pub instances_per_category: Option<usize>,
    pub images_per_instance: Option<usize>,
    pub reserve_per_category: Option<usize>,
    pub reserve_images: Option<usize>,
    pub n_contexts: Option<usize>,
    pub thresholds: Option<FilterThresholds>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub subsets: Vec<Subset>,
    pub shared: SharedWorld,
    pub per_subset: BTreeMap<Subset, SubsetWorld>,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            subsets: Subset::ALL.to_vec(),
            shared: SharedWorld::default(),
            per_subset: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub crm: Vec<CrmKind>,
    pub probes_learnable: Vec<bool>,
    pub layers: Vec<usize>,
    pub n_probes: Vec<usize>,
    pub form: Vec<ModulationForm>,
    /// Epochs per variant; training every variant for the full schedule is
    /// rarely worth it.
    pub epochs: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            crm: vec![CrmKind::Average, CrmKind::Mlp, CrmKind::Transformer],
            probes_learnable: vec![true],
            layers: vec![2],
            n_probes: vec![8],
            form: vec![ModulationForm::Scalar],
            epochs: 3,
        }
    }
}

impl AblationSection {
    pub fn variants(&self) -> Vec<CaamVariant> {
        CaamVariant::grid(&self.crm, &self.probes_learnable, &self.layers, &self.n_probes, &self.form)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Subsets to evaluate; empty means every generated one.
    pub subsets: Vec<Subset>,
    pub beta_source: BetaSource,
    pub view: QueryView,
    /// Fixed biases for the sweep, as multiples of `sqrt(d_k)`.
    pub beta_multipliers: Vec<f64>,
    pub perturbations: Vec<Perturbation>,
    pub ablation: AblationSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            subsets: Vec::new(),
            beta_source: BetaSource::Adaptive,
            view: QueryView::Full,
            beta_multipliers: DEFAULT_BETA_MULTIPLIERS.to_vec(),
            perturbations: vec![
                Perturbation {
                    mode: PerturbMode::Scale,
                    iou: 1.0,
                },
                Perturbation {
                    mode: PerturbMode::Scale,
                    iou: 0.8,
                },
                Perturbation {
                    mode: PerturbMode::Scale,
                    iou: 0.6,
                },
                Perturbation {
                    mode: PerturbMode::ScaleShift,
                    iou: 0.8,
                },
                Perturbation {
                    mode: PerturbMode::ScaleShift,
                    iou: 0.6,
                },
            ],
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in a run.
    pub seed: u64,
    /// Output directory. Not part of the hash, so identical runs written to
    /// different places produce identical files.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub world: WorldSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            world: WorldSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn encoder_seed(&self) -> u64 {
        mix(self.seed, 1)
    }

    pub fn model_seed(&self) -> u64 {
        mix(self.seed, 2)
    }

    pub fn eval_seed(&self) -> u64 {
        mix(self.seed, 3)
    }

    /// Fills seed-derived fields so the stored config states every value a
    /// run actually used.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = mix(self.seed, 4);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.world.subsets.is_empty() {
            return Err(Error::Config("world.subsets must name at least one subset".into()));
        }
        for name in &self.train.subsets {
            name.parse::<Subset>()?;
        }
        for cfg in &self.benchmark().subsets {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn encoder(&self) -> Result<FrozenEncoder> {
        FrozenEncoder::new(self.model.d_latent, self.model.fusion.d_model, self.model.l_text, self.encoder_seed())
    }

    /// Per-subset world configs: presets with the overrides applied.
    pub fn benchmark(&self) -> BenchmarkConfig {
        let presets = BenchmarkConfig::preset(self.seed);
        let subsets = self
            .world
            .subsets
            .iter()
            .map(|&s| {
                let mut w = presets.subsets[s.index()].clone();
                self.apply(&mut w);
                w
            })
            .collect();
        BenchmarkConfig { subsets }
    }

    fn apply(&self, w: &mut WorldConfig) {
        let sh = &self.world.shared;
        w.d_latent = self.model.d_latent;
        macro_rules! set {
            ($src:expr, $($f:ident),*) => { $( if let Some(v) = $src.$f { w.$f = v; } )* };
        }
        set!(
            sh,
            n_ambients,
            ambients_per_instance,
            ambient_fraction,
            grid,
            noise,
            bbox_cells,
            clutter,
            instance_spread
        );
        set!(sh, near_duplicate_rate, near_duplicate_noise, pairs_per_instance, eval_fraction, gallery);
        if let Some(ps) = self.world.per_subset.get(&w.subset) {
            set!(
                ps,
                n_categories,
                instances_per_category,
                images_per_instance,
                reserve_per_category,
                reserve_images,
                n_contexts,
                thresholds
            );
        }
    }

    /// Subsets used for training; all generated ones when none are named.
    pub fn train_subsets(&self) -> Result<Vec<Subset>> {
        self.train.subsets.iter().map(|s| s.parse()).collect()
    }

    pub fn canonical_json(&self) -> String {
        // serde_json's default map is ordered, so the value round trip sorts keys.
        let v = serde_json::to_value(self).expect("plain data serializes");
        serde_json::to_string(&v).expect("plain data serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// The resolved config and its hash, as written next to every output.
    pub fn resolved_json(&self) -> String {
        #[derive(Serialize)]
        struct Resolved<'a> {
            config_hash: String,
            config: serde_json::Value,
            worlds: &'a [WorldConfig],
        }
        let bench = self.benchmark();
        let r = Resolved {
            config_hash: self.hash(),
            config: serde_json::to_value(self).expect("serializes"),
            worlds: &bench.subsets,
        };
        serde_json::to_string_pretty(&r).expect("plain data serializes") + "\n"
    }
}
