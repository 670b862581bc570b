//! Versioned binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"LTCK"            magic
//! u32                format version (1)
//! u8                 endianness of tensor data, 1 = little
//! u64                length of the JSON metadata in bytes
//! [u8]               JSON metadata: method, architecture, class stats,
//!                    head kind and group layout, training log, tensor table
//! [f64]              tensors in table order, row-major
//! ```
//!
//! Floats are written as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ClassStats;
use crate::error::{Error, Result};
use crate::heads::{BagsHeads, GroupLayout};
use crate::model::{Architecture, Backbone, EpochLog, Heads, Linear, Method, TrainedModel};

pub const MAGIC: &[u8; 4] = b"LTCK";
pub const VERSION: u32 = 1;
const LITTLE_ENDIAN: u8 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HeadKind {
    Single,
    Ssb {
        layout: GroupLayout,
    },
    Bags {
        layout: GroupLayout,
        trained: Vec<bool>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    method: Method,
    architecture: Architecture,
    frozen: bool,
    stats: ClassStats,
    heads: HeadKind,
    log: Vec<EpochLog>,
    tensors: Vec<TensorEntry>,
}

struct Writer {
    table: Vec<TensorEntry>,
    data: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, rows: usize, cols: usize, values: &[f64]) {
        debug_assert_eq!(rows * cols, values.len());
        self.table.push(TensorEntry { name, rows, cols });
        for v in values {
            self.data.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn linear(&mut self, prefix: &str, l: &Linear) {
        self.push(format!("{prefix}.weight"), l.out_dim, l.in_dim, &l.weight);
        self.push(format!("{prefix}.bias"), l.out_dim, 1, &l.bias);
    }
}

pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut w = Writer {
        table: Vec::new(),
        data: Vec::new(),
    };
    for (l, layer) in model.backbone.layers.iter().enumerate() {
        w.linear(&format!("backbone.{l}"), layer);
    }
    let heads = match &model.heads {
        Heads::Single(h) => {
            w.linear("head", h);
            HeadKind::Single
        }
        Heads::Ssb {
            instance,
            sqrt,
            layout,
        } => {
            w.linear("head_instance", instance);
            w.linear("head_sqrt", sqrt);
            HeadKind::Ssb {
                layout: layout.clone(),
            }
        }
        Heads::Bags(b) => {
            for (k, h) in b.heads.iter().enumerate() {
                if let Some(h) = h {
                    w.linear(&format!("group.{k}"), h);
                }
            }
            HeadKind::Bags {
                layout: b.layout.clone(),
                trained: b.heads.iter().map(Option::is_some).collect(),
            }
        }
    };
    let meta = Metadata {
        method: model.method,
        architecture: model.backbone.architecture(),
        frozen: model.backbone.frozen,
        stats: model.stats.clone(),
        heads,
        log: model.log.clone(),
        tensors: w.table,
    };
    let json = serde_json::to_vec(&meta)?;

    let mut out = Vec::with_capacity(17 + json.len() + w.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(LITTLE_ENDIAN);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.data);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

struct Tensors<'a> {
    table: std::iter::Peekable<std::slice::Iter<'a, TensorEntry>>,
    reader: Reader<'a>,
}

impl Tensors<'_> {
    fn next(&mut self, name: &str) -> Result<(usize, usize, Vec<f64>)> {
        let e = self
            .table
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if e.name != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {}",
                e.name
            )));
        }
        let n = e
            .rows
            .checked_mul(e.cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
        let raw = self.reader.take(n.saturating_mul(8))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((e.rows, e.cols, values))
    }

    fn linear(&mut self, prefix: &str) -> Result<Linear> {
        let (out_dim, in_dim, weight) = self.next(&format!("{prefix}.weight"))?;
        let (b_rows, b_cols, bias) = self.next(&format!("{prefix}.bias"))?;
        if b_rows != out_dim || b_cols != 1 {
            return Err(Error::Checkpoint(format!(
                "{prefix}.bias has shape {b_rows}x{b_cols}"
            )));
        }
        Ok(Linear {
            out_dim,
            in_dim,
            weight,
            bias,
        })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(
            "not a model checkpoint (bad magic)".into(),
        ));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    if r.take(1)?[0] != LITTLE_ENDIAN {
        return Err(Error::Checkpoint("unsupported tensor byte order".into()));
    }
    let meta_len = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let meta_len =
        usize::try_from(meta_len).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;

    let mut t = Tensors {
        table: meta.tensors.iter().peekable(),
        reader: r,
    };
    let mut layers = Vec::with_capacity(meta.architecture.hidden.len());
    for l in 0..meta.architecture.hidden.len() {
        layers.push(t.linear(&format!("backbone.{l}"))?);
    }
    let backbone = Backbone {
        input_dim: meta.architecture.input_dim,
        layers,
        frozen: meta.frozen,
    };
    if backbone.architecture() != meta.architecture {
        return Err(Error::Checkpoint(
            "backbone tensors disagree with architecture".into(),
        ));
    }
    let heads = match meta.heads {
        HeadKind::Single => Heads::Single(t.linear("head")?),
        HeadKind::Ssb { layout } => Heads::Ssb {
            instance: t.linear("head_instance")?,
            sqrt: t.linear("head_sqrt")?,
            layout,
        },
        HeadKind::Bags { layout, trained } => {
            let mut heads = Vec::with_capacity(trained.len());
            for (k, present) in trained.into_iter().enumerate() {
                heads.push(if present {
                    Some(t.linear(&format!("group.{k}"))?)
                } else {
                    None
                });
            }
            Heads::Bags(BagsHeads { layout, heads })
        }
    };
    if let Some(extra) = t.table.peek() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensor {}",
            extra.name
        )));
    }
    if t.reader.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - t.reader.pos
        )));
    }
    Ok(TrainedModel {
        backbone,
        heads,
        log: meta.log,
        stats: meta.stats,
        method: meta.method,
    })
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    from_bytes(&fs::read(path)?)
}
