//! Benchmark files. Worlds are binary (magic, version, JSON header, then
//! per-image records with raw little-endian latents). Quadruples and gallery
//! manifests are JSON lines whose first line is a provenance header.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{GalleryEntry, GalleryManifest, InstanceRecord, Quadruple, Subset, World, WorldConfig};
use crate::encoders::{ClutterObject, SyntheticImage};
use crate::error::{Error, Result};
use crate::geometry::BBox;

const WORLD_MAGIC: &[u8; 4] = b"AFWD";
pub const FORMAT_VERSION: u32 = 1;

/// First line of every JSON-lines file, and the header of world files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    provenance: Provenance,
    config: WorldConfig,
    prototypes: Vec<Vec<f64>>,
    contexts: Vec<Vec<f64>>,
    ambients: Vec<Vec<f64>>,
    instances: Vec<InstanceRecord>,
    n_images: usize,
}

#[derive(Serialize, Deserialize)]
struct ImageMeta {
    image_id: u32,
    instance_id: u32,
    category_id: u32,
    context_id: u32,
    ambient_id: u32,
    bbox: BBox,
    clutter: Vec<ClutterObject>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("plain data serializes")
}

pub fn encode_world(world: &World, provenance: &Provenance) -> Vec<u8> {
    let header = WorldHeader {
        provenance: provenance.clone(),
        config: world.config.clone(),
        prototypes: world.prototypes.clone(),
        contexts: world.contexts.clone(),
        ambients: world.ambients.clone(),
        instances: world.instances.clone(),
        n_images: world.images.len(),
    };
    let mut out = Vec::new();
    out.extend(WORLD_MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    let h = json(&header);
    out.extend((h.len() as u64).to_le_bytes());
    out.extend(h);
    for img in &world.images {
        let meta = json(&ImageMeta {
            image_id: img.image_id,
            instance_id: img.instance_id,
            category_id: img.category_id,
            context_id: img.context_id,
            ambient_id: img.ambient_id,
            bbox: img.bbox,
            clutter: img.clutter.clone(),
        });
        out.extend((meta.len() as u32).to_le_bytes());
        out.extend(meta);
        for v in &img.latents {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn write_world(path: &Path, world: &World, provenance: &Provenance) -> Result<()> {
    write_file(path, &encode_world(world, provenance))
}

pub fn read_world(path: &Path) -> Result<(World, Provenance)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(Error::data(path, "world file is truncated"));
        }
        pos += n;
        Ok(&buf[pos - n..pos])
    };
    if take(4)? != WORLD_MAGIC {
        return Err(Error::data(path, "not a world file"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::data(path, format!("world format version {version}, expected {FORMAT_VERSION}")));
    }
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let header: WorldHeader = serde_json::from_slice(take(n)?).map_err(|e| Error::data(path, format!("bad header: {e}")))?;
    let cfg = header.config;
    let per_image = cfg.grid.0 * cfg.grid.1 * cfg.d_latent;
    let mut images = Vec::with_capacity(header.n_images);
    for _ in 0..header.n_images {
        let m = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let meta: ImageMeta = serde_json::from_slice(take(m)?).map_err(|e| Error::data(path, format!("bad image record: {e}")))?;
        let raw = take(per_image * 8)?;
        let latents = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        images.push(SyntheticImage {
            image_id: meta.image_id,
            instance_id: meta.instance_id,
            category_id: meta.category_id,
            context_id: meta.context_id,
            ambient_id: meta.ambient_id,
            grid: cfg.grid,
            d_latent: cfg.d_latent,
            latents,
            bbox: meta.bbox,
            clutter: meta.clutter,
        });
    }
    if pos != buf.len() {
        return Err(Error::data(path, "trailing bytes after the last image"));
    }
    let world = World {
        config: cfg,
        prototypes: header.prototypes,
        contexts: header.contexts,
        ambients: header.ambients,
        instances: header.instances,
        images,
    };
    Ok((world, header.provenance))
}

pub fn encode_jsonl<T: Serialize>(provenance: &Provenance, records: &[T]) -> Vec<u8> {
    let mut out = json(provenance);
    out.push(b'\n');
    for r in records {
        out.extend(json(r));
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, provenance: &Provenance, records: &[T]) -> Result<()> {
    write_file(path, &encode_jsonl(provenance, records))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Provenance, Vec<T>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines.next().ok_or_else(|| Error::data(path, "empty file"))?.map_err(|e| Error::io(path, e))?;
    let prov: Provenance = serde_json::from_str(&first).map_err(|e| Error::data(path, format!("bad header line: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::data(path, format!("line {}: {e}", i + 2)))?);
    }
    Ok((prov, out))
}

pub fn write_quadruples(path: &Path, provenance: &Provenance, quads: &[Quadruple]) -> Result<()> {
    write_jsonl(path, provenance, quads)
}

pub fn read_quadruples(path: &Path) -> Result<(Provenance, Vec<Quadruple>)> {
    read_jsonl(path)
}

pub fn write_gallery(path: &Path, provenance: &Provenance, g: &GalleryManifest) -> Result<()> {
    write_jsonl(path, provenance, &g.entries)
}

pub fn read_gallery(path: &Path, subset: Subset) -> Result<(Provenance, GalleryManifest)> {
    let (prov, entries) = read_jsonl::<GalleryEntry>(path)?;
    Ok((prov, GalleryManifest { subset, entries }))
}
