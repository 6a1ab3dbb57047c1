//! Trained-model checkpoints.
//!
//! Layout (little-endian): magic `MGC1`; u64 tokens, embedding width,
//! token width, degree buckets, degree width; every parameter tensor as
//! row-major f32; u8 feature-map tag, u64 map seed, u8 projection flag and
//! the realized projection as f64; u64 length of a JSON blob echoing the
//! run config and the final report.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::io_util::{put_f32s, put_f64s, put_u64, read_file, write_atomic, Reader};
use crate::kernel_features::{FeatureMap, FeatureMapKind};
use crate::training::ModelParams;

pub const MAGIC: &[u8; 4] = b"MGC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub report: Option<EvalReport>,
    pub best_epoch: usize,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub map: FeatureMap,
    pub meta: CheckpointMeta,
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ck.params;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [
        p.embeddings.nrows(),
        p.embeddings.ncols(),
        p.w_q.nrows(),
        p.degree_table.nrows(),
        p.degree_table.ncols(),
    ] {
        put_u64(&mut buf, v as u64);
    }
    for t in p.tensors() {
        put_f32s(&mut buf, t.iter().map(|&v| v as f32));
    }
    buf.push(ck.map.kind.tag());
    put_u64(&mut buf, ck.map.seed);
    match &ck.map.w {
        Some(w) => {
            buf.push(1);
            put_f64s(&mut buf, w.iter().copied());
        }
        None => buf.push(0),
    }
    let meta = serde_json::to_vec(&ck.meta)?;
    put_u64(&mut buf, meta.len() as u64);
    buf.extend_from_slice(&meta);
    Ok(buf)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let truncated = || bad("truncated");
    let mut r = Reader::new(bytes);
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = r.usize().ok_or_else(truncated)?;
    }
    let [n, d, m, buckets, dz] = dims;
    let sizes = [
        n.checked_mul(d),
        m.checked_mul(m),
        m.checked_mul(m),
        buckets.checked_mul(dz),
        Some(dz),
        Some(1),
    ];
    let mut tensors = Vec::with_capacity(6);
    for size in sizes {
        let size = size
            .filter(|s| *s <= bytes.len() / 4)
            .ok_or_else(truncated)?;
        let vals: Vec<f64> = r
            .f32s(size)
            .ok_or_else(truncated)?
            .into_iter()
            .map(f64::from)
            .collect();
        tensors.push(vals);
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("six tensors");
    let params = ModelParams {
        embeddings: Array2::from_shape_vec((n, d), next()).expect("sized"),
        w_q: Array2::from_shape_vec((m, m), next()).expect("sized"),
        w_k: Array2::from_shape_vec((m, m), next()).expect("sized"),
        degree_table: Array2::from_shape_vec((buckets, dz), next()).expect("sized"),
        degree_weight: Array1::from(next()),
        degree_bias: next()[0],
    };
    let kind = FeatureMapKind::from_tag(r.u8().ok_or_else(truncated)?)
        .ok_or_else(|| bad("unknown feature map"))?;
    let seed = r.u64().ok_or_else(truncated)?;
    let w = match r.u8().ok_or_else(truncated)? {
        0 => None,
        1 => Some(
            Array2::from_shape_vec((m, m), r.f64s(m * m).ok_or_else(truncated)?).expect("sized"),
        ),
        _ => return Err(bad("bad projection flag")),
    };
    if kind.is_random() != w.is_some() {
        return Err(bad("projection presence does not match the feature map"));
    }
    let len = r.usize().ok_or_else(truncated)?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len).ok_or_else(truncated)?)
        .map_err(|e| bad(&format!("metadata: {e}")))?;
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let map = FeatureMap {
        kind,
        dim: m,
        seed,
        w,
        focus_power: meta.config.focus_power,
    };
    Ok(Checkpoint { params, map, meta })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ck)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read_file(path)?, path)
}
