//! Coarse-ranking serving path: offline item-index construction, request
//! scoring with exactly one user-tower forward pass, flops accounting, and a
//! latency microbenchmark.

use std::fs::File;
use std::hint::black_box;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Mlp, ModelGraph};
use crate::rng::derived_rng;
use crate::synthdata::Record;
use crate::tensor::{ParamStore, Tensor};

const INDEX_MAGIC: &[u8; 8] = b"PFDINDEX";

/// One catalog entry: an item id with its regular feature buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogItem {
    pub item_id: u32,
    pub item_feats: Vec<u32>,
}

/// Distinct items appearing in a record set, ascending by id. Item features
/// are fixed per item, so the first occurrence defines the entry.
pub fn catalog_from_records(records: &[Record]) -> Vec<CatalogItem> {
    let mut seen: std::collections::BTreeMap<u32, Vec<u32>> = std::collections::BTreeMap::new();
    for rec in records {
        seen.entry(rec.item_id)
            .or_insert_with(|| rec.item_feats.clone());
    }
    seen.into_iter()
        .map(|(item_id, item_feats)| CatalogItem { item_id, item_feats })
        .collect()
}

/// Precomputed, unit-norm item mappings pinned to the producing checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemIndex {
    pub out_dim: usize,
    pub item_ids: Vec<u32>,
    /// Row-major `[num_items × out_dim]`.
    pub rows: Vec<f64>,
    pub checkpoint_hash: String,
}

impl ItemIndex {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.out_dim..(i + 1) * self.out_dim]
    }
}

/// Evaluate the item tower over the catalog (eval-mode statistics) and pin
/// the result to the checkpoint hash.
pub fn build_index(
    graph: &ModelGraph,
    items: &[CatalogItem],
    checkpoint_hash: &str,
) -> Result<ItemIndex> {
    let ids: Vec<u32> = items.iter().map(|i| i.item_id).collect();
    let feats: Vec<&[u32]> = items.iter().map(|i| i.item_feats.as_slice()).collect();
    let out = graph.item_tower_eval(&ids, &feats)?;
    Ok(ItemIndex {
        out_dim: out.cols(),
        item_ids: ids,
        rows: out.values,
        checkpoint_hash: checkpoint_hash.to_string(),
    })
}

/// Index file: magic, version, header (out_dim, num_items, checkpoint hash),
/// item ids, packed little-endian f64 rows. Round-trips bit-exactly.
pub fn write_index(index: &ItemIndex, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(INDEX_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(index.out_dim as u64).to_le_bytes())?;
    w.write_all(&(index.item_ids.len() as u64).to_le_bytes())?;
    w.write_all(&(index.checkpoint_hash.len() as u64).to_le_bytes())?;
    w.write_all(index.checkpoint_hash.as_bytes())?;
    for id in &index.item_ids {
        w.write_all(&id.to_le_bytes())?;
    }
    for v in &index.rows {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<ItemIndex> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(Error::CorruptFile("bad index magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != 1 {
        return Err(Error::CorruptFile(format!("unsupported index version {version}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let out_dim = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let num_items = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let hash_len = u64::from_le_bytes(u64buf) as usize;
    let mut hash_buf = vec![0u8; hash_len];
    r.read_exact(&mut hash_buf)?;
    let checkpoint_hash = String::from_utf8(hash_buf)
        .map_err(|_| Error::CorruptFile("non-utf8 checkpoint hash".into()))?;
    let mut item_ids = Vec::with_capacity(num_items);
    for _ in 0..num_items {
        r.read_exact(&mut u32buf)?;
        item_ids.push(u32::from_le_bytes(u32buf));
    }
    let mut rows = Vec::with_capacity(num_items * out_dim);
    for _ in 0..num_items * out_dim {
        r.read_exact(&mut u64buf)?;
        rows.push(f64::from_le_bytes(u64buf));
    }
    Ok(ItemIndex {
        out_dim,
        item_ids,
        rows,
        checkpoint_hash,
    })
}

/// Request-time scorer over an immutable index. Refuses an index built from
/// a different checkpoint, and counts user-tower forwards so the
/// one-forward-per-request contract is checkable.
pub struct Scorer<'a> {
    graph: &'a ModelGraph,
    index: &'a ItemIndex,
    user_forwards: AtomicU64,
}

impl<'a> Scorer<'a> {
    pub fn new(graph: &'a ModelGraph, model_hash: &str, index: &'a ItemIndex) -> Result<Self> {
        if index.checkpoint_hash != model_hash {
            return Err(Error::CheckpointHashMismatch {
                expected: index.checkpoint_hash.clone(),
                got: model_hash.to_string(),
            });
        }
        Ok(Scorer {
            graph,
            index,
            user_forwards: AtomicU64::new(0),
        })
    }

    pub fn user_forward_count(&self) -> u64 {
        self.user_forwards.load(Ordering::Relaxed)
    }

    /// Score a request: one user-tower forward, an inner product against
    /// every index row, then a deterministic top-k (descending score,
    /// ascending item id on ties).
    pub fn score_request(&self, request: &Record, k: usize) -> Result<Vec<(u32, f64)>> {
        if k > self.index.len() {
            return Err(Error::InvalidArg(format!(
                "k {} exceeds index size {}",
                k,
                self.index.len()
            )));
        }
        let user = self.graph.user_tower_eval(request)?;
        self.user_forwards.fetch_add(1, Ordering::Relaxed);
        let scale = self.graph.config.scale;
        let mut scored: Vec<(u32, f64)> = (0..self.index.len())
            .map(|i| {
                let dot: f64 = user
                    .iter()
                    .zip(self.index.row(i))
                    .map(|(a, b)| a * b)
                    .sum();
                (self.index.item_ids[i], scale * dot)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

/// Fused multiply-add counts for one tower mapping vs. one inner product.
/// Weight matrices only; biases, activations, and normalizations are not
/// counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub mapping_flops: u64,
    pub inner_product_flops: u64,
    pub ratio: f64,
}

pub fn flops_count(input_dim: usize, hidden_dims: &[usize], out_dim: usize) -> FlopsReport {
    assert!(input_dim > 0 && out_dim > 0, "dims must be positive");
    assert!(hidden_dims.iter().all(|&d| d > 0), "dims must be positive");
    let mut chain = Vec::with_capacity(hidden_dims.len() + 2);
    chain.push(input_dim as u64);
    chain.extend(hidden_dims.iter().map(|&d| d as u64));
    chain.push(out_dim as u64);
    let mapping_flops: u64 = chain.windows(2).map(|w| w[0] * w[1]).sum();
    let inner_product_flops = out_dim as u64;
    FlopsReport {
        mapping_flops,
        inner_product_flops,
        ratio: mapping_flops as f64 / inner_product_flops as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mapping_time_s: f64,
    pub inner_product_time_s: f64,
    pub ratio: f64,
}

/// Time `num_candidates` tower forwards against `num_candidates` inner
/// products, repeated `repeats` times, on a throwaway tower of the given
/// dims. Reproduces the ordering (mapping ≫ inner product), not any
/// machine-specific constant.
pub fn latency_bench(
    input_dim: usize,
    hidden_dims: &[usize],
    out_dim: usize,
    num_candidates: usize,
    repeats: usize,
) -> LatencyReport {
    let mut rng = derived_rng(0xbe7c, "latency-bench");
    let mut store = ParamStore::new();
    let (blocks, head) = match hidden_dims.split_last() {
        Some((last, rest)) => {
            let mut dims = rest.to_vec();
            dims.push(*last);
            (dims, out_dim)
        }
        None => (Vec::new(), out_dim),
    };
    let tower = Mlp::init(
        &mut store,
        "bench",
        input_dim,
        &blocks,
        head,
        true,
        0.01,
        &mut rng,
    );
    let input = Tensor::uniform(&[1, input_dim], -1.0, 1.0, &mut rng);
    let user = tower.forward_eval(&store, &input);
    let candidate = Tensor::uniform(&[1, out_dim], -1.0, 1.0, &mut rng);

    // warm-up
    black_box(tower.forward_eval(&store, &input));

    let t0 = Instant::now();
    for _ in 0..repeats {
        for _ in 0..num_candidates {
            black_box(tower.forward_eval(&store, &input));
        }
    }
    let mapping_time_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..repeats {
        for _ in 0..num_candidates {
            let dot: f64 = user
                .row(0)
                .iter()
                .zip(candidate.row(0))
                .map(|(a, b)| a * b)
                .sum();
            acc += black_box(dot);
        }
    }
    let inner_product_time_s = t1.elapsed().as_secs_f64();
    black_box(acc);

    LatencyReport {
        mapping_time_s,
        inner_product_time_s,
        ratio: mapping_time_s / inner_product_time_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_reproduce_published_arithmetic() {
        let report = flops_count(1024, &[512, 256], 128);
        assert_eq!(report.mapping_flops, 688_128);
        assert_eq!(report.inner_product_flops, 128);
        assert_eq!(report.ratio, 5376.0);
    }

    #[test]
    fn flops_single_layer_square() {
        let report = flops_count(64, &[], 64);
        assert_eq!(report.mapping_flops, 64 * 64);
        assert_eq!(report.ratio, 64.0);
    }

    #[test]
    fn flops_desk_scale_dims() {
        let report = flops_count(64, &[32], 16);
        assert_eq!(report.mapping_flops, 64 * 32 + 32 * 16);
        assert_eq!(report.inner_product_flops, 16);
        assert_eq!(report.ratio, 160.0);
    }

    #[test]
    fn latency_mapping_slower_than_inner_product() {
        let report = latency_bench(256, &[128, 64], 32, 50, 2);
        assert!(
            report.ratio > 1.0,
            "a tower forward must cost more than one inner product (ratio {})",
            report.ratio
        );
    }
}
