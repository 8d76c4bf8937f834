//! Binary model checkpoints.
//!
//! Layout (little endian): magic `BTLG`, `u32` version, `u64` config hash,
//! `u8` sublayer order (1 = norm after residual), `u8` float width,
//! `u32`-prefixed JSON metadata, `u32` block count, then blocks of
//! `u16`-prefixed name, `u8` dtype tag (`f` float, `u` u32), `u8` element
//! width, `u8` rank, `u64` dims and the row-major payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Vocab;
use crate::model::{Model, ModelDims, ModelError};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::trainer::config::{ConfigError, TrainConfig};

pub const MAGIC: &[u8; 4] = b"BTLG";
pub const VERSION: u32 = 1;
pub const NORM_LAST: u8 = 1;
const ENTITY_ROWS: &str = "@entity_rows";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint stores {found}-byte floats, expected {expected}")]
    Width { found: u8, expected: u8 },
    #[error("unsupported sublayer order flag {0}")]
    NormOrder(u8),
    #[error("config hash mismatch")]
    Hash,
    #[error("bad metadata: {0}")]
    Meta(String),
    #[error("block {name}: {msg}")]
    Block { name: String, msg: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: String,
    vocab: Vec<String>,
    entities: usize,
    entity_rows: usize,
    type_vocab: usize,
    relation_vocab: usize,
    adjacencies: Vec<String>,
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.config.hash().to_le_bytes());
    out.push(NORM_LAST);
    out.push(T::WIDTH);
    let meta = Meta {
        config: model.config.to_text(),
        vocab: (0..model.vocab.len())
            .map(|i| model.vocab.token(i).to_string())
            .collect(),
        entities: model.dims.entities,
        entity_rows: model.dims.entity_rows,
        type_vocab: model.dims.type_vocab,
        relation_vocab: model.dims.relation_vocab,
        adjacencies: model.dims.adjacencies.clone(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params.len() as u32 + 1).to_le_bytes());
    let header = |out: &mut Vec<u8>, name: &str, tag: u8, width: u8, shape: &[usize]| {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tag);
        out.push(width);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    };
    for id in model.params.ids() {
        let t = model.params.get(id);
        header(&mut out, model.params.name(id), b'f', T::WIDTH, t.shape());
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    header(&mut out, ENTITY_ROWS, b'u', 4, &[model.entity_rows.len()]);
    for &r in &model.entity_rows {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let hash = r.u64()?;
    let norm = r.u8()?;
    if norm != NORM_LAST {
        return Err(CheckpointError::NormOrder(norm));
    }
    let width = r.u8()?;
    if width != T::WIDTH {
        return Err(CheckpointError::Width {
            found: width,
            expected: T::WIDTH,
        });
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
    let config = TrainConfig::parse_text(&meta.config)?;
    if config.hash() != hash {
        return Err(CheckpointError::Hash);
    }
    let mut vocab = Vocab::default();
    for (i, t) in meta.vocab.iter().enumerate() {
        if vocab.add(t) != i {
            return Err(CheckpointError::Meta(format!("vocabulary entry {i} out of order")));
        }
    }
    let dims = ModelDims {
        vocab: vocab.len(),
        entities: meta.entities,
        entity_rows: meta.entity_rows,
        type_vocab: meta.type_vocab,
        relation_vocab: meta.relation_vocab,
        adjacencies: meta.adjacencies,
    };
    let mut model = Model::<T>::with_dims(config, vocab, dims, Vec::new())?;
    let blocks = r.u32()? as usize;
    let mut seen_rows = false;
    for _ in 0..blocks {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let tag = r.u8()?;
        let w = r.u8()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = shape.iter().product();
        let bad = |msg: &str| CheckpointError::Block {
            name: name.clone(),
            msg: msg.to_string(),
        };
        match tag {
            b'u' if name == ENTITY_ROWS && w == 4 => {
                let data = r.take(count * 4)?;
                model.entity_rows = data
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                seen_rows = true;
            }
            b'f' if w == T::WIDTH => {
                let id = model.params.id(&name).map_err(|_| bad("unknown parameter"))?;
                if model.params.get(id).shape() != shape.as_slice() {
                    return Err(bad("shape mismatch"));
                }
                let data = r.take(count * w as usize)?;
                let vals = data.chunks_exact(w as usize).map(T::read_le).collect();
                model
                    .params
                    .replace(id, Tensor::new(shape, vals).map_err(|_| bad("bad payload"))?);
            }
            _ => return Err(bad("unsupported dtype")),
        }
    }
    if !seen_rows || model.entity_rows.len() != model.dims.entities {
        return Err(CheckpointError::Meta("missing entity row map".into()));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Meta("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
