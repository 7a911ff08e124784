//! Binary checkpoints: magic, version, a JSON header, then every tensor as
//! name, shape and raw little-endian `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::encoders::FrozenEncoder;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"AFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    encoder_seed: u64,
    seed: u64,
    config_hash: String,
    n_tensors: usize,
}

/// Parameters with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub config_hash: String,
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rows() as u64).to_le_bytes());
    out.extend((t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

fn encoder_tensors(enc: &FrozenEncoder) -> Vec<(String, &Tensor)> {
    let mut v = vec![("encoder.image_proj".to_string(), &enc.image_proj)];
    for (i, t) in enc.text_proj.iter().enumerate() {
        v.push((format!("encoder.text_proj{i}"), t));
    }
    v
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ck.params;
    let enc = encoder_tensors(&p.encoder);
    let header = Header {
        config: p.config.clone(),
        encoder_seed: p.encoder.seed,
        seed: ck.seed,
        config_hash: ck.config_hash.clone(),
        n_tensors: enc.len() + p.store.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Contract(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(json);
    for (name, t) in enc {
        write_tensor(&mut out, &name, t);
    }
    for param in p.store.params() {
        write_tensor(&mut out, &param.name, &param.value);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(self.path, "checkpoint is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::data(self.path, "tensor name is not UTF-8"))?;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((name, Tensor::from_vec(rows, cols, data)?))
    }
}

pub fn decode_checkpoint(path: &Path, buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::data(path, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(path, format!("checkpoint version {version}, expected {VERSION}")));
    }
    let n = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(n)?).map_err(|e| Error::data(path, format!("bad header: {e}")))?;
    let c = &header.config;
    let encoder = FrozenEncoder::new(c.d_latent, c.fusion.d_model, c.l_text, header.encoder_seed)?;
    let mut params = ModelParams::new(c, encoder, header.seed)?;
    let expected = 1 + params.encoder.text_proj.len() + params.store.len();
    if header.n_tensors != expected {
        return Err(Error::data(path, format!("{} tensors listed, model has {expected}", header.n_tensors)));
    }
    let place = |want: &str, slot: &mut Tensor, r: &mut Reader| -> Result<()> {
        let (name, t) = r.tensor()?;
        if name != want || t.shape() != slot.shape() {
            return Err(Error::data(
                path,
                format!("tensor {name} {:?} where {want} {:?} was expected", t.shape(), slot.shape()),
            ));
        }
        let rg = slot.requires_grad;
        *slot = t;
        slot.requires_grad = rg;
        Ok(())
    };
    place("encoder.image_proj", &mut params.encoder.image_proj, &mut r)?;
    for i in 0..params.encoder.text_proj.len() {
        place(&format!("encoder.text_proj{i}"), &mut params.encoder.text_proj[i], &mut r)?;
    }
    for p in params.store.params_mut() {
        let name = p.name.clone();
        place(&name, &mut p.value, &mut r)?;
    }
    if r.pos != buf.len() {
        return Err(Error::data(path, "trailing bytes after the last tensor"));
    }
    Ok(Checkpoint {
        params,
        seed: header.seed,
        config_hash: header.config_hash,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &buf)
}
