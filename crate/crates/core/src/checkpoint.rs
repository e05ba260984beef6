//! Versioned binary checkpoints of a [`Model`].
//!
//! Layout (little endian): `SPRK`, `u32` version, `u64` config hash, `u32`
//! record count, then per record `u32` name length, UTF-8 name, `u32` rank,
//! `rank` × `u64` dims and the row-major `f64` data.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::data::{InteractionDataset, KnowledgeGraph};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"SPRK";
pub const VERSION: u32 = 1;

struct Record {
    name: String,
    dims: Vec<u64>,
    data: Vec<f64>,
}

fn matrix_record<T: Scalar>(name: String, m: &Matrix<T>) -> Record {
    Record {
        name,
        dims: vec![m.rows() as u64, m.cols() as u64],
        data: m.as_slice().iter().map(|x| x.to_f64_lossy()).collect(),
    }
}

fn vector_record<T: Scalar>(name: String, v: &[T]) -> Record {
    Record {
        name,
        dims: vec![v.len() as u64],
        data: v.iter().map(|x| x.to_f64_lossy()).collect(),
    }
}

fn records<T: Scalar>(model: &Model<T>) -> Vec<Record> {
    let st = &model.state;
    let params = st.params();
    let mut out: Vec<Record> = params
        .iter()
        .map(|(n, m)| matrix_record(n.clone(), m))
        .collect();
    out.push(matrix_record("svd_features".into(), &st.svd_features));
    for (s, ns) in st.tucker.norm_stats.iter().enumerate() {
        out.push(vector_record(format!("tucker.norm.{s}.mean"), &ns.mean));
        out.push(vector_record(format!("tucker.norm.{s}.var"), &ns.var));
    }
    for (k, (n, _)) in params.iter().enumerate() {
        out.push(matrix_record(format!("adam.m.{n}"), &st.adam.m[k]));
        out.push(matrix_record(format!("adam.v.{n}"), &st.adam.v[k]));
    }
    out.push(Record {
        name: "adam.steps".into(),
        dims: vec![st.adam.steps.len() as u64],
        data: st.adam.steps.iter().map(|&s| s as f64).collect(),
    });
    out
}

/// Serializes the model state to bytes.
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let recs = records(model);
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&model.cfg.hash().to_le_bytes());
    b.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for r in &recs {
        b.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        b.extend_from_slice(r.name.as_bytes());
        b.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for d in &r.dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        for x in &r.data {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    b
}

pub fn save<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse(bytes: &[u8]) -> Result<(u64, Vec<Record>)> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let count = r.u32()? as usize;
    let mut recs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("record {name} is too large")))? as usize;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        recs.push(Record { name, dims, data });
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((hash, recs))
}

/// Config hash stored in a checkpoint file.
pub fn read_hash(path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let mut head = [0u8; 16];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| Error::io(path, e))?;
    if &head[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    Ok(u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")))
}

/// Restores a model saved with the same config; the graph context is rebuilt
/// from `ds` and `kg`.
pub fn load<T: Scalar>(
    path: impl AsRef<Path>,
    cfg: &TrainConfig,
    ds: &InteractionDataset,
    kg: &KnowledgeGraph,
) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, cfg, ds, kg)
}

pub fn from_bytes<T: Scalar>(
    bytes: &[u8],
    cfg: &TrainConfig,
    ds: &InteractionDataset,
    kg: &KnowledgeGraph,
) -> Result<Model<T>> {
    let (hash, recs) = parse(bytes)?;
    if hash != cfg.hash() {
        return Err(Error::Checkpoint(format!(
            "config hash {hash:016x} does not match {:016x}",
            cfg.hash()
        )));
    }
    let mut by_name: std::collections::HashMap<String, Record> =
        recs.into_iter().map(|r| (r.name.clone(), r)).collect();
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
        let r = by_name
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
        if r.dims.iter().map(|&d| d as usize).ne(shape.iter().copied()) {
            return Err(Error::Checkpoint(format!(
                "record {name} has dims {:?}, expected {shape:?}",
                r.dims
            )));
        }
        Ok(r.data.into_iter().map(T::lit).collect())
    };
    let feats_shape = [ds.num_users() + ds.num_items(), cfg.k_s];
    let feats = Matrix::from_vec(feats_shape[0], feats_shape[1], take("svd_features", &feats_shape)?)?;
    let mut model = Model::from_features(cfg, ds, kg, feats)?;
    let names: Vec<(String, (usize, usize))> = model
        .state
        .params()
        .into_iter()
        .map(|(n, m)| (n, m.shape()))
        .collect();
    for (k, (n, (r, c))) in names.iter().enumerate() {
        let load = |v: Vec<T>| Matrix::from_vec(*r, *c, v);
        *model.state.params_mut()[k] = load(take(n, &[*r, *c])?)?;
        model.state.adam.m[k] = load(take(&format!("adam.m.{n}"), &[*r, *c])?)?;
        model.state.adam.v[k] = load(take(&format!("adam.v.{n}"), &[*r, *c])?)?;
    }
    let dc = model.state.tucker.core_dim();
    for (s, ns) in model.state.tucker.norm_stats.iter_mut().enumerate() {
        ns.mean = take(&format!("tucker.norm.{s}.mean"), &[dc])?;
        ns.var = take(&format!("tucker.norm.{s}.var"), &[dc])?;
    }
    let steps = take("adam.steps", &[names.len()])?;
    model.state.adam.steps = steps.iter().map(|s| s.to_f64_lossy() as u64).collect();
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected record {extra}")));
    }
    Ok(model)
}
