//! Named parameter storage, per-graph binding, and the checkpoint format.
//!
//! Checkpoints are `DYNP1` followed by records
//! `[name_len: u32 LE][name: utf-8][rank: u32 LE][dims: u32 LE x rank][values: f64 LE x prod]`.
//! Rank-0 records hold a single value.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"DYNP1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("record {index} ({name:?}): {msg}")]
    Record { index: usize, name: String, msg: String },
    #[error("missing parameter {0:?}")]
    Missing(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("unknown record {0:?}")]
    Unknown(String),
    #[error("invalid model metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// A graph plus lazily created leaves for the parameters it touches.
pub struct Session<'p> {
    pub graph: Graph<'p>,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore, trainable: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf_ref(self.store.get(id), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient of every parameter (`None` when it did not take part).
    pub fn param_grads(&self) -> Vec<Option<&[f64]>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v)))
            .collect()
    }
}

/// A checkpoint record as written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_records<W: Write>(mut out: W, records: &[Record]) -> io::Result<()> {
    out.write_all(MAGIC)?;
    for r in records {
        let name = r.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(r.dims.len() as u32).to_le_bytes())?;
        for &d in &r.dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &r.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn read_records<R: Read>(mut input: R) -> Result<Vec<Record>, CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_records(&bytes)
}

pub fn parse_records(bytes: &[u8]) -> Result<Vec<Record>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = MAGIC.len();
    let mut records = Vec::new();
    while pos < bytes.len() {
        let index = records.len();
        let mut name = String::new();
        let fail = |name: &str, msg: &str| CheckpointError::Record {
            index,
            name: name.to_string(),
            msg: msg.to_string(),
        };
        let mut take = |n: usize, name: &str, what: &str| -> Result<&[u8], CheckpointError> {
            if bytes.len() - pos < n {
                return Err(fail(name, &format!("truncated {what}")));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;

        let name_len = u32_at(take(4, "", "name length")?);
        if name_len > 4096 {
            return Err(fail("", "implausible name length"));
        }
        name.push_str(
            std::str::from_utf8(take(name_len, "", "name")?).map_err(|_| fail("", "name is not utf-8"))?,
        );
        let rank = u32_at(take(4, &name, "rank")?);
        if rank > 8 {
            return Err(fail(&name, "implausible rank"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32_at(take(4, &name, "dims")?));
        }
        let count: usize = dims.iter().product();
        let raw = take(count * 8, &name, "values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record { name, dims, values });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_bytes() {
        let records = vec![
            Record {
                name: "meta.d".into(),
                dims: vec![],
                values: vec![64.0],
            },
            Record {
                name: "w".into(),
                dims: vec![2, 3],
                values: vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 7.0],
            },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        let back = parse_records(&buf).unwrap();
        assert_eq!(back, records);
        let mut again = Vec::new();
        write_records(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_checkpoints_name_the_record() {
        assert!(matches!(parse_records(b"NOPE!"), Err(CheckpointError::BadMagic)));
        let mut buf = Vec::new();
        write_records(
            &mut buf,
            &[Record {
                name: "stage0.w".into(),
                dims: vec![4],
                values: vec![1.0; 4],
            }],
        )
        .unwrap();
        buf.truncate(buf.len() - 3);
        match parse_records(&buf) {
            Err(e @ CheckpointError::Record { .. }) => assert!(e.to_string().contains("stage0.w")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
