//! The retrieval model: query branch, target branch, projection heads and
//! the contrastive loss, plus training and checkpoints.

mod checkpoint;
pub mod gradcheck;
mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caam::{predict_beta, CaamConfig, CaamParams};
use crate::encoders::{FrozenEncoder, PatchEmbeddings, TextEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{multimodal_encode, EncodeInput, FusionConfig, FusionParams, Modulation, PatchVar};
use crate::geometry::{BBox, RegionMask};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{init, Bound, Linear, ParamGroup, ParamId, ParamStore};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{run_gradcheck, GradCheckConfig, GradCheckRow};
pub use train::{train, EpochStats, TrainConfig, TrainReport};

/// Rows of a contrastive-loss input must have unit norm to this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_latent: usize,
    pub l_text: usize,
    pub d_embed: usize,
    pub temperature: f64,
    pub fusion: FusionConfig,
    pub caam: CaamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_latent: 16,
            l_text: 4,
            d_embed: 32,
            temperature: 0.07,
            fusion: FusionConfig::default(),
            caam: CaamConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.d_embed == 0 {
            return Err(Error::Config("d_embed must be at least 1".into()));
        }
        self.fusion.validate()?;
        self.caam.validate()
    }
}

/// Where the attention bias of the query branch comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaSource {
    /// Predicted per query by the modulator.
    Adaptive,
    /// A constant bias on the box region; the modulator is bypassed.
    Fixed { beta: f64 },
    /// No box and no bias: the plain baseline.
    Off,
}

/// What the query branch sees of the reference image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryView {
    #[default]
    Full,
    /// Only the patches inside the box; no bias.
    RoiCrop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: FrozenEncoder,
    pub store: ParamStore,
    pub fusion: FusionParams,
    pub caam: CaamParams,
    /// `1 × d_model` CLS token of the query branch.
    pub rep_cls: ParamId,
    pub query_head: Linear,
    pub image_head: Linear,
}

impl ModelParams {
    pub fn new(config: &ModelConfig, encoder: FrozenEncoder, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.fusion.d_model;
        if encoder.d_model() != d || encoder.d_latent() != config.d_latent || encoder.l_text() != config.l_text {
            return Err(Error::Config(format!(
                "encoder maps {}→{} with {} text tokens; model expects {}→{} with {}",
                encoder.d_latent(),
                encoder.d_model(),
                encoder.l_text(),
                config.d_latent,
                d,
                config.l_text
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = ParamGroup::Encoder;
        let fusion = FusionParams::new(&mut store, "fusion", enc, &config.fusion, &mut rng)?;
        let rep_cls = store.add("rep_cls", enc, init::normal(1, d, 0.02, &mut rng));
        let query_head = Linear::new(&mut store, "query_head", enc, d, config.d_embed, &mut rng);
        let image_head = Linear::new(&mut store, "image_head", enc, d, config.d_embed, &mut rng);
        let caam = CaamParams::new(&mut store, &config.caam, &config.fusion, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            store,
            fusion,
            caam,
            rep_cls,
            query_head,
            image_head,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }
}

/// A query as the model consumes it: encoded reference patches, encoded
/// modification text and the anchoring box.
#[derive(Clone, Debug)]
pub struct QueryInput {
    pub patches: Arc<PatchEmbeddings>,
    pub text: Arc<TextEmbedding>,
    pub bbox: BBox,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub query: QueryInput,
    pub target: Arc<PatchEmbeddings>,
}

/// Query-branch outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    /// `1 × d_embed`, unit norm.
    pub embedding: Var,
    /// The bias used, when the branch ran with one.
    pub beta: Option<Var>,
}

/// The patches inside the box, as a `1 × n` grid.
pub fn crop_patches(patches: &PatchEmbeddings, bbox: &BBox) -> Result<PatchEmbeddings> {
    let mask = RegionMask::from_bbox(bbox, patches.grid)?;
    let tokens = patches.tokens.select_rows(|n| mask.is_set(n));
    Ok(PatchEmbeddings {
        grid: (1, tokens.rows()),
        tokens,
    })
}

pub fn query_forward(tape: &mut Tape, b: &Bound, params: &ModelParams, q: &QueryInput, source: BetaSource, view: QueryView) -> Result<QueryVars> {
    let (patches, grid, use_mask) = match view {
        QueryView::Full => (q.patches.tokens.clone(), q.patches.grid, source != BetaSource::Off),
        QueryView::RoiCrop => {
            let c = crop_patches(&q.patches, &q.bbox)?;
            (c.tokens, c.grid, false)
        }
    };
    let pv = PatchVar {
        var: tape.constant(patches),
        grid,
    };
    let text = tape.constant(q.text.tokens.clone());
    let mask = if use_mask { Some(RegionMask::from_bbox(&q.bbox, grid)?) } else { None };
    let beta = match (&mask, source) {
        (None, _) => None,
        (Some(_), BetaSource::Adaptive) => Some(predict_beta(tape, b, &params.fusion, &params.caam, pv, text)?),
        (Some(_), BetaSource::Fixed { beta }) => Some(tape.constant(Tensor::scalar(beta))),
        (Some(_), BetaSource::Off) => None,
    };
    let modulation = mask.as_ref().zip(beta).map(|(mask, beta)| Modulation { mask, beta });
    let input = EncodeInput {
        cls: Some(b[params.rep_cls]),
        use_queries: true,
        extra: None,
        text: Some(text),
    };
    let out = multimodal_encode(tape, b, &params.fusion, pv, input, modulation.as_ref())?;
    let cls = out.cls.expect("cls was supplied");
    let z = params.query_head.forward(tape, b, cls)?;
    Ok(QueryVars {
        embedding: tape.l2_normalize_rows(z)?,
        beta,
    })
}

/// `1 × d_embed` unit target representation.
pub fn target_forward(tape: &mut Tape, b: &Bound, params: &ModelParams, patches: &PatchEmbeddings) -> Result<Var> {
    let pv = PatchVar {
        var: tape.constant(patches.tokens.clone()),
        grid: patches.grid,
    };
    let input = EncodeInput {
        cls: None,
        use_queries: true,
        extra: None,
        text: None,
    };
    let out = multimodal_encode(tape, b, &params.fusion, pv, input, None)?;
    let pooled = tape.mean_rows(out.queries.expect("queries were requested"));
    let z = params.image_head.forward(tape, b, pooled)?;
    tape.l2_normalize_rows(z)
}

/// The fusion-query outputs of the target branch (`M × d_model`).
pub fn encode_target(params: &ModelParams, patches: &PatchEmbeddings) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let b = params.store.bind(&mut tape);
    let pv = PatchVar {
        var: tape.constant(patches.tokens.clone()),
        grid: patches.grid,
    };
    let input = EncodeInput {
        cls: None,
        use_queries: true,
        extra: None,
        text: None,
    };
    let out = multimodal_encode(&mut tape, &b, &params.fusion, pv, input, None)?;
    Ok(tape.value(out.queries.expect("queries were requested")).clone())
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// Query-to-target InfoNCE over a batch: `−mean_i log softmax_j(q_i·t_j/τ)[i]`.
pub fn contrastive_loss(tape: &mut Tape, fq: Var, ft: Var, temperature: f64) -> Result<Var> {
    check_unit_rows(tape.value(fq), "query embedding")?;
    check_unit_rows(tape.value(ft), "target embedding")?;
    if tape.value(fq).shape() != tape.value(ft).shape() || tape.value(fq).rows() == 0 {
        return Err(Error::Dimension(format!(
            "loss over query batch {:?} and target batch {:?}",
            tape.value(fq).shape(),
            tape.value(ft).shape()
        )));
    }
    let sims = tape.matmul_nt(fq, ft)?;
    let logits = tape.scale(sims, 1.0 / temperature);
    let logp = tape.log_softmax_rows(logits);
    let diag = tape.diag(logp)?;
    let mean = tape.mean(diag);
    Ok(tape.scale(mean, -1.0))
}

/// Loss value for embeddings already computed.
pub fn contrastive_loss_value(fq: &Tensor, ft: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let q = tape.constant(fq.clone());
    let t = tape.constant(ft.clone());
    let l = contrastive_loss(&mut tape, q, t, temperature)?;
    Ok(tape.value(l).item())
}

/// A query embedding and the mean bias that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub embedding: Vec<f64>,
    pub beta: Option<f64>,
}

pub fn query_representation(params: &ModelParams, q: &QueryInput, source: BetaSource, view: QueryView) -> Result<QueryEmbedding> {
    let mut tape = Tape::inference();
    let b = params.store.bind(&mut tape);
    let out = query_forward(&mut tape, &b, params, q, source, view)?;
    let beta = out.beta.map(|v| {
        let t = tape.value(v);
        t.data().iter().sum::<f64>() / t.len() as f64
    });
    Ok(QueryEmbedding {
        embedding: tape.value(out.embedding).data().to_vec(),
        beta,
    })
}

pub fn target_representation(params: &ModelParams, patches: &PatchEmbeddings) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let b = params.store.bind(&mut tape);
    let v = target_forward(&mut tape, &b, params, patches)?;
    Ok(tape.value(v).data().to_vec())
}

/// Embeds queries in parallel; output order follows input order.
pub fn embed_queries(params: &ModelParams, queries: &[QueryInput], source: BetaSource, view: QueryView) -> Result<Vec<QueryEmbedding>> {
    queries.par_iter().map(|q| query_representation(params, q, source, view)).collect()
}

/// Embeds queries one after another.
pub fn embed_queries_serial(params: &ModelParams, queries: &[QueryInput], source: BetaSource, view: QueryView) -> Result<Vec<QueryEmbedding>> {
    queries.iter().map(|q| query_representation(params, q, source, view)).collect()
}

pub fn embed_targets(params: &ModelParams, images: &[Arc<PatchEmbeddings>]) -> Result<Vec<Vec<f64>>> {
    images.par_iter().map(|p| target_representation(params, p)).collect()
}
