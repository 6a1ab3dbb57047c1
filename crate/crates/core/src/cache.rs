//! Binary cache of the split graph and its structural encodings.
//!
//! Layout (little-endian): magic `MGF1`; u64 users, items, edges; edge
//! pairs as u64; one u8 split label per edge; u64 rank; singular values,
//! user and item encodings as row-major f64; u64 length of a JSON trailer
//! holding the cache key and the original id tables.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph_data::{load_interactions, split_edges, InteractionGraph, Split};
use crate::io_util::{put_f64s, put_u64, read_file, write_atomic, Reader};
use crate::spectral::{truncated_svd, SparseMatrix, StructuralEncodings, SvdOptions};

pub const MAGIC: &[u8; 4] = b"MGF1";

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub graph: InteractionGraph,
    pub encodings: StructuralEncodings,
    pub key: String,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    key: String,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the dataset contents and every setting that shapes the cache.
pub fn cache_key(dataset_digest: &str, cfg: &RunConfig) -> String {
    let fields = serde_json::json!({
        "dataset": dataset_digest,
        "split_ratios": cfg.split_ratios,
        "split_seed": cfg.split_seed,
        "d": cfg.d,
        "svd_seed": cfg.svd_seed,
        "svd_oversample": cfg.svd_oversample,
        "svd_power_iters": cfg.svd_power_iters,
    });
    sha256_hex(fields.to_string().as_bytes())
}

pub fn encode(data: &PreparedData) -> Result<Vec<u8>> {
    let g = &data.graph;
    let enc = &data.encodings;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u64(&mut buf, g.num_users as u64);
    put_u64(&mut buf, g.num_items as u64);
    put_u64(&mut buf, g.edges.len() as u64);
    for &(u, i) in &g.edges {
        put_u64(&mut buf, u as u64);
        put_u64(&mut buf, i as u64);
    }
    buf.extend(g.split.iter().map(|s| *s as u8));
    put_u64(&mut buf, enc.rank() as u64);
    put_f64s(&mut buf, enc.singular_values.iter().copied());
    put_f64s(&mut buf, enc.user_enc.iter().copied());
    put_f64s(&mut buf, enc.item_enc.iter().copied());
    let trailer = serde_json::to_vec(&Trailer {
        key: data.key.clone(),
        user_ids: g.user_ids.clone(),
        item_ids: g.item_ids.clone(),
    })?;
    put_u64(&mut buf, trailer.len() as u64);
    buf.extend_from_slice(&trailer);
    Ok(buf)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<PreparedData> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut r = Reader::new(bytes);
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("not a graph cache (bad magic)"));
    }
    let truncated = || bad("truncated");
    let num_users = r.usize().ok_or_else(truncated)?;
    let num_items = r.usize().ok_or_else(truncated)?;
    let num_edges = r.usize().ok_or_else(truncated)?;
    if num_edges > bytes.len() / 16 {
        return Err(truncated());
    }
    let mut edges = Vec::with_capacity(num_edges);
    for _ in 0..num_edges {
        let u = r.usize().ok_or_else(truncated)?;
        let i = r.usize().ok_or_else(truncated)?;
        edges.push((u, i));
    }
    let labels = r.take(num_edges).ok_or_else(truncated)?;
    let split = labels
        .iter()
        .map(|&b| Split::from_u8(b).ok_or_else(|| bad("unknown split label")))
        .collect::<Result<Vec<_>>>()?;
    let rank = r.usize().ok_or_else(truncated)?;
    let need = rank
        .checked_mul(1 + num_users + num_items)
        .ok_or_else(truncated)?;
    if need > bytes.len() / 8 {
        return Err(truncated());
    }
    let sv = r.f64s(rank).ok_or_else(truncated)?;
    let ue = r.f64s(num_users * rank).ok_or_else(truncated)?;
    let ie = r.f64s(num_items * rank).ok_or_else(truncated)?;
    let tlen = r.usize().ok_or_else(truncated)?;
    let trailer: Trailer = serde_json::from_slice(r.take(tlen).ok_or_else(truncated)?)
        .map_err(|e| bad(&format!("trailer: {e}")))?;
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let graph = InteractionGraph::from_parts(
        num_users,
        num_items,
        edges,
        split,
        trailer.user_ids,
        trailer.item_ids,
    )
    .map_err(|e| bad(&e.to_string()))?;
    let encodings = StructuralEncodings {
        user_enc: Array2::from_shape_vec((num_users, rank), ue).expect("length checked"),
        item_enc: Array2::from_shape_vec((num_items, rank), ie).expect("length checked"),
        singular_values: Array1::from(sv),
    };
    Ok(PreparedData {
        graph,
        encodings,
        key: trailer.key,
    })
}

pub fn write_cache(path: &Path, data: &PreparedData) -> Result<()> {
    write_atomic(path, &encode(data)?)
}

pub fn read_cache(path: &Path) -> Result<PreparedData> {
    decode(&read_file(path)?, path)
}

/// Load, split and factorize from scratch.
pub fn build(cfg: &RunConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let bytes = read_file(&cfg.dataset)?;
    let key = cache_key(&sha256_hex(&bytes), cfg);
    let graph = load_interactions(&cfg.dataset)?;
    let graph = split_edges(graph, cfg.ratios(), cfg.split_seed)?;
    let r = SparseMatrix::from_graph(&graph, Split::Train)?;
    let opts = SvdOptions {
        oversample: cfg.svd_oversample,
        power_iters: cfg.svd_power_iters,
        ..SvdOptions::new(cfg.d, cfg.svd_seed)
    };
    let encodings = truncated_svd(&r, opts)?;
    Ok(PreparedData {
        graph,
        encodings,
        key,
    })
}

/// Reuses a matching cache or rebuilds it. Returns whether it was a hit.
pub fn prepare(cfg: &RunConfig) -> Result<(PreparedData, bool)> {
    let path = cfg.cache_path();
    let key = cache_key(&sha256_hex(&read_file(&cfg.dataset)?), cfg);
    if path.exists() {
        match read_cache(&path) {
            Ok(data) if data.key == key => return Ok((data, true)),
            Ok(_) => log::info!("cache {} is stale, rebuilding", path.display()),
            Err(e) => log::warn!("unreadable cache {}: {e}; rebuilding", path.display()),
        }
    }
    let data = build(cfg)?;
    write_cache(&path, &data)?;
    Ok((data, false))
}

/// Reads the cache and checks it was built for this dataset and config.
pub fn load_prepared(cfg: &RunConfig) -> Result<PreparedData> {
    let path = cfg.cache_path();
    if !path.exists() {
        return Err(Error::StaleCache(format!(
            "no cache at {}; run `prepare` first",
            path.display()
        )));
    }
    let data = read_cache(&path)?;
    let key = cache_key(&sha256_hex(&read_file(&cfg.dataset)?), cfg);
    if data.key != key {
        return Err(Error::StaleCache(format!(
            "{} was built from a different dataset or settings; rerun `prepare`",
            path.display()
        )));
    }
    Ok(data)
}
