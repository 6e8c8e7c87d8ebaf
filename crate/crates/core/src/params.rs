//! Named parameter storage, forward-pass contexts, and the checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"MTSLOF01"
//! u32 entry count
//! per entry: u32 name length, name (utf-8), u8 dtype (0 = f32, 1 = f64),
//!            u32 rank, rank x u64 extents
//! payloads in manifest order, raw little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTSLOF01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, exempt from weight decay (biases, norm scales/shifts, mask token).
    NoDecay,
    /// Not trained by the optimizer (batchnorm running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    /// Total number of scalars across trainable entries.
    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Serializes every entry, followed by `extra` entries (written as `f64`).
    pub fn write_checkpoint(&self, w: &mut impl Write, extra: &[(String, Tensor<f64>)]) -> Result<()> {
        let mut manifest = Vec::new();
        let mut payload = Vec::new();
        let count = self.entries.len() + extra.len();
        manifest.extend_from_slice(CHECKPOINT_MAGIC);
        manifest.extend_from_slice(&(count as u32).to_le_bytes());
        for e in &self.entries {
            write_manifest_entry(&mut manifest, &e.name, T::DTYPE, e.value.shape());
            for &v in e.value.data() {
                v.write_le(&mut payload);
            }
        }
        for (name, t) in extra {
            write_manifest_entry(&mut manifest, name, DType::F64, t.shape());
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        w.write_all(&manifest)?;
        w.write_all(&payload)?;
        Ok(())
    }

    /// Copies matching entries from a checkpoint. Every stored parameter must be present
    /// with an identical shape.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for e in &mut self.entries {
            let t = ckpt
                .get(&e.name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks parameter {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::config(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.cast();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                })
                .collect(),
        }
    }
}

fn write_manifest_entry(out: &mut Vec<u8>, name: &str, dtype: DType, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype.tag());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &s in shape {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
}

/// A parsed checkpoint; values are widened to `f64` (lossless for `f32` payloads).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: Vec<(String, DType, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).map(|t| t.data()[0])
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::parse(&buf)
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read(path)?)
    }

    pub fn parse(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let count = cur.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let at = cur.pos;
            let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| Error::Parse {
                offset: at as u64,
                message: "parameter name is not utf-8".into(),
            })?;
            let at = cur.pos;
            let dtype = DType::from_tag(cur.take(1)?[0]).ok_or(Error::Parse {
                offset: at as u64,
                message: "unknown dtype tag".into(),
            })?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            manifest.push((name, dtype, shape));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, dtype, shape) in manifest {
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * dtype.size())?;
            let data: Vec<f64> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            entries.push((name, dtype, Tensor::new(&shape, data)?));
        }
        if cur.pos != buf.len() {
            return Err(Error::Parse {
                offset: cur.pos as u64,
                message: format!("{} trailing bytes", buf.len() - cur.pos),
            });
        }
        Ok(Self { entries })
    }
}

pub(crate) struct Cursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated: expected {} more bytes, found {}",
                    n,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// One forward (and optional backward) pass over a parameter store.
///
/// Parameters enter the graph lazily, once each. When `track` is off they enter as
/// constants and no gradient flows into them.
pub struct Pass<'a, T: Scalar> {
    pub graph: Graph<T>,
    pub params: &'a mut ParamStore<T>,
    pub train: bool,
    pub rng: ChaCha8Rng,
    track: bool,
    leaves: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    pub fn new(params: &'a mut ParamStore<T>, train: bool, seed: u64) -> Self {
        let n = params.len();
        Self {
            graph: Graph::new(),
            params,
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            track: true,
            leaves: vec![None; n],
        }
    }

    /// A pass whose parameters are all constants.
    pub fn frozen(params: &'a mut ParamStore<T>, train: bool, seed: u64) -> Self {
        let mut p = Self::new(params, train, seed);
        p.track = false;
        p
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let trainable = self.track && self.params.entry(id).kind != ParamKind::Buffer;
        let v = if trainable {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    /// Gradients of every parameter that entered the graph as a trainable leaf.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(), ParamKind::Weight);
        s.add("a.bias", Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap(), ParamKind::NoDecay);
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let mut buf = Vec::new();
        let extra = vec![("meta.x".to_string(), Tensor::scalar(3.0))];
        s.write_checkpoint(&mut buf, &extra).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let ck = Checkpoint::parse(&buf).unwrap();
        assert_eq!(ck.entries.len(), 3);
        assert_eq!(ck.entries[0].1, DType::F32);
        assert_eq!(ck.scalar("meta.x"), Some(3.0));
        let mut t = store();
        t.get_mut(ParamId(0)).data_mut()[0] = 9.0;
        t.load_from(&ck).unwrap();
        assert_eq!(t.get(ParamId(0)).data(), s.get(ParamId(0)).data());
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let mut buf = Vec::new();
        store().write_checkpoint(&mut buf, &[]).unwrap();
        buf.truncate(buf.len() - 3);
        match Checkpoint::parse(&buf) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("truncated")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Checkpoint::parse(b"NOTMAGIC\0\0\0\0"), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn frozen_pass_yields_no_grads() {
        let mut s = store();
        let mut pass = Pass::frozen(&mut s, false, 0);
        let w = pass.param(ParamId(0));
        let l = pass.graph.sum(w);
        pass.graph.backward(l).unwrap();
        assert!(pass.param_grads().is_empty());
    }
}
