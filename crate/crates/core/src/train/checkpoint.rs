//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! "TEXVIT01"
//! u32 header length, header JSON (UTF-8)
//! repeated: u32 name length, name, u32 rank, u32 × rank dims, f32 × numel
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Optimizer moments are stored as ordinary records under `adam.m.` and
//! `adam.v.` prefixes.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use texvit_autodiff::{ParamStore, Tensor};

use super::adam::AdamState;
use crate::config::TexViTConfig;
use crate::error::{io_err, Error, Result};
use crate::model::param_specs;

pub const MAGIC: &[u8; 8] = b"TEXVIT01";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TexViTConfig,
    /// Parameters and normalization running statistics.
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
    /// 1-based epoch the weights come from (0 = untrained).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: TexViTConfig,
    best_epoch: usize,
    best_val_accuracy: f64,
    adam_step: Option<u64>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.config.clone(),
            best_epoch: self.best_epoch,
            best_val_accuracy: self.best_val_accuracy,
            adam_step: self.adam.as_ref().map(|a| a.t),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        for (name, e) in self.params.iter() {
            put_record(&mut out, name, &e.value);
        }
        if let Some(adam) = &self.adam {
            for (name, m) in &adam.m {
                put_record(&mut out, &format!("{ADAM_M}{name}"), m);
            }
            for (name, v) in &adam.v {
                put_record(&mut out, &format!("{ADAM_V}{name}"), v);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and validates a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Checkpoint { path: path.to_path_buf(), detail };
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }

        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let hlen = r.u32().ok_or_else(|| bad("truncated header".into()))?;
        let json = r.take(hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        header.model.validate()?;

        let mut records = IndexMap::new();
        while r.pos < body.len() {
            let (name, t) = r.record().ok_or_else(|| bad(format!("truncated record at byte {}", r.pos)))?;
            if records.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate record `{name}`")));
            }
        }

        let mut params = ParamStore::new();
        for spec in param_specs(&header.model) {
            let t = records.shift_remove(&spec.name).ok_or_else(|| bad(format!("missing tensor `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(bad(format!("`{}` has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
            }
            if spec.trainable {
                params.insert_param(spec.name, t);
            } else {
                params.insert_buffer(spec.name, t);
            }
        }

        let adam = match header.adam_step {
            None => None,
            Some(t) => {
                let mut state = AdamState::new(&params);
                state.t = t;
                for (prefix, moments) in [(ADAM_M, &mut state.m), (ADAM_V, &mut state.v)] {
                    for (name, slot) in moments.iter_mut() {
                        let key = format!("{prefix}{name}");
                        let value =
                            records.shift_remove(&key).ok_or_else(|| bad(format!("missing tensor `{key}`")))?;
                        if value.shape() != slot.shape() {
                            return Err(bad(format!("`{key}` has shape {:?}", value.shape())));
                        }
                        *slot = value;
                    }
                }
                Some(state)
            }
        };
        if let Some(name) = records.keys().next() {
            return Err(bad(format!("unexpected tensor `{name}`")));
        }
        Ok(Self {
            config: header.model,
            params,
            adam,
            best_epoch: header.best_epoch,
            best_val_accuracy: header.best_val_accuracy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn record(&mut self) -> Option<(String, Tensor<f32>)> {
        let n = self.u32()?;
        let name = String::from_utf8(self.take(n)?.to_vec()).ok()?;
        let rank = self.u32()?;
        let dims = (0..rank).map(|_| self.u32()).collect::<Option<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let raw = self.take(numel.checked_mul(4)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Some((name, Tensor::new(dims, data).ok()?))
    }
}
