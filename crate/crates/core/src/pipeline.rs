//! Glue from a benchmark configuration to model inputs: generation of every
//! subset, encoding of the images a run touches, training samples and
//! evaluation sets.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::benchgen::io::{read_gallery, read_quadruples, read_world, write_gallery, write_quadruples, write_world, Provenance};
use crate::benchgen::{
    build_gallery, generate_world, make_quadruples, BenchmarkConfig, GalleryEntry, GalleryManifest, Quadruple, QuadrupleSplit, Subset, World,
};
use crate::encoders::{FrozenEncoder, PatchEmbeddings, TextEmbedding};
use crate::error::{Error, Result};
use crate::eval::EvalSet;
use crate::model::{QueryInput, Sample};

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetData {
    pub world: World,
    pub split: QuadrupleSplit,
    pub gallery: GalleryManifest,
}

impl SubsetData {
    pub fn subset(&self) -> Subset {
        self.world.config.subset
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub subsets: Vec<SubsetData>,
}

/// Reserve-instance images of a world, as gallery candidates.
pub fn reserve_pool(world: &World) -> Vec<GalleryEntry> {
    world
        .images
        .iter()
        .filter(|img| world.instance(img.instance_id).reserve)
        .map(|img| GalleryEntry {
            image_id: img.image_id,
            instance_id: img.instance_id,
            category_id: img.category_id,
            is_target: false,
        })
        .collect()
}

pub fn generate_subset(cfg: &crate::benchgen::WorldConfig, encoder: &FrozenEncoder) -> Result<SubsetData> {
    let world = generate_world(cfg)?;
    let split = make_quadruples(&world, encoder)?;
    let gallery = build_gallery(cfg.subset, &split.eval, &reserve_pool(&world), &cfg.gallery, cfg.seed ^ 0x6A11_E5E7).map_err(|e| match e {
        Error::Gallery(m) => Error::Gallery(format!(
            "{}: {m} (raise world.per_subset.{}.reserve_per_category or lower world.shared.gallery.min_size)",
            cfg.subset, cfg.subset
        )),
        e => e,
    })?;
    Ok(SubsetData { world, split, gallery })
}

pub fn generate_benchmark(cfg: &BenchmarkConfig, encoder: &FrozenEncoder) -> Result<Benchmark> {
    let subsets = cfg.subsets.iter().map(|c| generate_subset(c, encoder)).collect::<Result<Vec<_>>>()?;
    Ok(Benchmark { subsets })
}

/// Encodes images and texts on first use and shares them afterwards.
pub struct Encoded<'a> {
    encoder: &'a FrozenEncoder,
    world: &'a World,
    images: HashMap<u32, Arc<PatchEmbeddings>>,
    texts: HashMap<u32, Arc<TextEmbedding>>,
}

impl<'a> Encoded<'a> {
    pub fn new(encoder: &'a FrozenEncoder, world: &'a World) -> Self {
        Self {
            encoder,
            world,
            images: HashMap::new(),
            texts: HashMap::new(),
        }
    }

    pub fn image(&mut self, id: u32) -> Result<Arc<PatchEmbeddings>> {
        if let Some(p) = self.images.get(&id) {
            return Ok(p.clone());
        }
        let img = self
            .world
            .images
            .get(id as usize)
            .ok_or_else(|| Error::Contract(format!("image {id} is not in the {} world", self.world.config.subset)))?;
        let p = Arc::new(self.encoder.encode_image(img)?);
        self.images.insert(id, p.clone());
        Ok(p)
    }

    pub fn text(&mut self, context: u32) -> Result<Arc<TextEmbedding>> {
        if let Some(t) = self.texts.get(&context) {
            return Ok(t.clone());
        }
        let latent = self
            .world
            .contexts
            .get(context as usize)
            .ok_or_else(|| Error::Contract(format!("context {context} is not in the {} world", self.world.config.subset)))?;
        let t = Arc::new(self.encoder.embed_text(latent)?);
        self.texts.insert(context, t.clone());
        Ok(t)
    }

    pub fn query(&mut self, q: &Quadruple) -> Result<QueryInput> {
        Ok(QueryInput {
            patches: self.image(q.ref_image_id)?,
            text: self.text(q.text_context_id)?,
            bbox: q.bbox,
        })
    }
}

/// Training samples from the chosen subsets (all when `subsets` is empty),
/// in subset order.
pub fn training_samples(bench: &Benchmark, encoder: &FrozenEncoder, subsets: &[Subset]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for data in bench.subsets.iter().filter(|d| subsets.is_empty() || subsets.contains(&d.subset())) {
        let mut enc = Encoded::new(encoder, &data.world);
        for q in &data.split.train {
            out.push(Sample {
                query: enc.query(q)?,
                target: enc.image(q.target_image_id)?,
            });
        }
    }
    Ok(out)
}

pub fn eval_set(data: &SubsetData, encoder: &FrozenEncoder) -> Result<EvalSet> {
    let mut enc = Encoded::new(encoder, &data.world);
    let queries = data.split.eval.iter().map(|q| enc.query(q)).collect::<Result<Vec<_>>>()?;
    let gallery_patches = data.gallery.entries.iter().map(|e| enc.image(e.image_id)).collect::<Result<Vec<_>>>()?;
    Ok(EvalSet {
        subset: data.subset(),
        queries,
        targets: data.split.eval.iter().map(|q| q.target_image_id).collect(),
        instances: data.split.eval.iter().map(|q| q.instance_id).collect(),
        gallery: data.gallery.entries.clone(),
        gallery_patches,
    })
}

pub fn eval_sets(bench: &Benchmark, encoder: &FrozenEncoder) -> Result<Vec<EvalSet>> {
    bench.subsets.iter().map(|d| eval_set(d, encoder)).collect()
}

/// File locations of one subset inside a benchmark directory.
pub struct SubsetFiles {
    pub world: PathBuf,
    pub train: PathBuf,
    pub eval: PathBuf,
    pub gallery: PathBuf,
}

impl SubsetFiles {
    pub fn new(dir: &Path, subset: Subset) -> Self {
        let d = dir.join(subset.name());
        Self {
            world: d.join("world.bin"),
            train: d.join("train.jsonl"),
            eval: d.join("eval.jsonl"),
            gallery: d.join("gallery.jsonl"),
        }
    }
}

pub fn write_benchmark(dir: &Path, bench: &Benchmark, provenance: &Provenance) -> Result<()> {
    for data in &bench.subsets {
        let f = SubsetFiles::new(dir, data.subset());
        write_world(&f.world, &data.world, provenance)?;
        write_quadruples(&f.train, provenance, &data.split.train)?;
        write_quadruples(&f.eval, provenance, &data.split.eval)?;
        write_gallery(&f.gallery, provenance, &data.gallery)?;
    }
    Ok(())
}

/// Reads the named subsets back; the provenance is the first subset's world header.
pub fn read_benchmark(dir: &Path, subsets: &[Subset]) -> Result<(Benchmark, Provenance)> {
    if subsets.is_empty() {
        return Err(Error::Config("no subsets to read".into()));
    }
    let mut out = Vec::new();
    let mut first = None;
    for &s in subsets {
        let f = SubsetFiles::new(dir, s);
        let (world, prov) = read_world(&f.world)?;
        if world.config.subset != s {
            return Err(Error::data(&f.world, format!("holds subset {} rather than {s}", world.config.subset)));
        }
        let (_, train) = read_quadruples(&f.train)?;
        let (_, eval) = read_quadruples(&f.eval)?;
        let (_, gallery) = read_gallery(&f.gallery, s)?;
        let instances = |qs: &[Quadruple]| qs.iter().map(|q| q.instance_id).collect::<BTreeSet<u32>>();
        let split = QuadrupleSplit {
            train_instances: instances(&train),
            eval_instances: instances(&eval),
            train,
            eval,
        };
        for q in split.train.iter().chain(&split.eval) {
            if world.images.get(q.ref_image_id as usize).is_none() || world.images.get(q.target_image_id as usize).is_none() {
                return Err(Error::data(&f.train, format!("quadruple refers to an image outside {}", f.world.display())));
            }
        }
        if let Some(e) = gallery.entries.iter().find(|e| world.images.get(e.image_id as usize).is_none()) {
            return Err(Error::data(&f.gallery, format!("image {} is not in the world", e.image_id)));
        }
        first.get_or_insert(prov);
        out.push(SubsetData { world, split, gallery });
    }
    Ok((Benchmark { subsets: out }, first.expect("at least one subset")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchgen::{GalleryConfig, WorldConfig};

    fn tiny(subset: Subset) -> WorldConfig {
        WorldConfig {
            instances_per_category: 3,
            reserve_per_category: 2,
            gallery: GalleryConfig {
                distractor_ratio: 1.0,
                min_size: 10,
            },
            ..WorldConfig::preset(subset, 11)
        }
    }

    #[test]
    fn benchmark_directory_round_trips() {
        let enc = FrozenEncoder::new(16, 32, 4, 1).unwrap();
        let cfg = BenchmarkConfig {
            subsets: vec![tiny(Subset::Car), tiny(Subset::Fashion)],
        };
        let bench = generate_benchmark(&cfg, &enc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let prov = Provenance {
            format: "test".into(),
            version: 1,
            seed: 11,
            config_hash: "abc".into(),
        };
        write_benchmark(dir.path(), &bench, &prov).unwrap();
        let (back, p) = read_benchmark(dir.path(), &[Subset::Car, Subset::Fashion]).unwrap();
        assert_eq!(p, prov);
        for (a, b) in back.subsets.iter().zip(&bench.subsets) {
            assert_eq!(a.world, b.world);
            assert_eq!(a.split, b.split);
            assert_eq!(a.gallery, b.gallery);
        }
        let err = read_benchmark(dir.path(), &[Subset::Landmark]).unwrap_err();
        assert!(err.to_string().contains("landmark"), "{err}");
    }
}
