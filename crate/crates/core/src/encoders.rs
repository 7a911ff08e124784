//! Frozen, seed-derived stand-ins for the image encoder and text tokenizer.
//!
//! The image encoder is a fixed linear map from per-patch latents to the
//! model width with orthonormal rows. Text is a context latent pushed through
//! one such map per token position.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::Tensor;

/// A distractor object planted outside the anchored region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClutterObject {
    pub instance_id: u32,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub image_id: u32,
    pub instance_id: u32,
    pub category_id: u32,
    /// Scene id; the part of the context that modification text describes.
    pub context_id: u32,
    /// Ambient id; the part of the background that persists between a
    /// reference image and its target.
    pub ambient_id: u32,
    pub grid: (usize, usize),
    pub d_latent: usize,
    /// `h·w × d_latent`, raster order over the grid.
    pub latents: Vec<f64>,
    pub bbox: BBox,
    pub clutter: Vec<ClutterObject>,
}

impl SyntheticImage {
    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch(&self, n: usize) -> &[f64] {
        &self.latents[n * self.d_latent..(n + 1) * self.d_latent]
    }
}

/// Patch embeddings with the grid they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbeddings {
    pub grid: (usize, usize),
    pub tokens: Tensor,
}

/// Text stand-in: `l_text` token embeddings of width `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub tokens: Tensor,
}

/// The frozen encoders shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    pub seed: u64,
    /// `d_latent × d_model`
    pub image_proj: Tensor,
    /// One `d_latent × d_model` map per text token position.
    pub text_proj: Vec<Tensor>,
}

/// `rows × cols` matrix with orthonormal rows (requires `rows ≤ cols`),
/// built by Gram-Schmidt on Gaussian draws.
pub fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    assert!(rows <= cols, "cannot fit {rows} orthonormal rows in width {cols}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Tensor::from_rows(&basis).expect("rectangular")
}

impl FrozenEncoder {
    pub fn new(d_latent: usize, d_model: usize, l_text: usize, seed: u64) -> Result<Self> {
        if d_latent > d_model {
            return Err(Error::Config(format!("d_latent ({d_latent}) must not exceed d_model ({d_model})")));
        }
        if l_text == 0 {
            return Err(Error::Config("l_text must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_proj = orthonormal_rows(d_latent, d_model, &mut rng);
        let text_proj = (0..l_text).map(|_| orthonormal_rows(d_latent, d_model, &mut rng)).collect();
        Ok(Self { seed, image_proj, text_proj })
    }

    pub fn d_latent(&self) -> usize {
        self.image_proj.rows()
    }

    pub fn d_model(&self) -> usize {
        self.image_proj.cols()
    }

    pub fn l_text(&self) -> usize {
        self.text_proj.len()
    }

    pub fn encode_image(&self, img: &SyntheticImage) -> Result<PatchEmbeddings> {
        if img.d_latent != self.d_latent() {
            return Err(Error::Dimension(format!("image latent width {} vs encoder {}", img.d_latent, self.d_latent())));
        }
        let latents = Tensor::from_vec(img.n_patches(), img.d_latent, img.latents.clone())?;
        Ok(PatchEmbeddings {
            grid: img.grid,
            tokens: latents.matmul(&self.image_proj)?,
        })
    }

    /// Embeds a target-context latent as `l_text` tokens.
    pub fn embed_text(&self, context: &[f64]) -> Result<TextEmbedding> {
        let row = Tensor::row(context);
        let tokens = self
            .text_proj
            .iter()
            .map(|p| row.matmul(p).map(Tensor::into_data))
            .collect::<Result<Vec<_>>>()?;
        Ok(TextEmbedding {
            tokens: Tensor::from_rows(&tokens)?,
        })
    }
}
