//! Shared helpers for the integration tests: thin wrappers over the
//! library's gradient-check utilities plus small dataset/model constructors.

#![allow(dead_code)]
#![allow(unused_imports)]

pub use pfd_core::gradcheck::{
    check_graph_grads, check_param_grads, coord_sample, fd_ok, grad_snapshot, randomize_params,
    FD_ABS_FLOOR, FD_REL_TOL, FD_STEP,
};

use pfd_core::models::{ModelConfig, ModelDims};
use pfd_core::synthdata::{generate, Dataset, GeneratorConfig, Record};

pub fn tiny_generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        num_users: 25,
        num_items: 20,
        num_records: 160,
        split_index: 120,
        seed,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_dataset(seed: u64) -> Dataset {
    generate(&tiny_generator(seed)).unwrap()
}

/// Model dims small enough for exhaustive-ish finite differencing.
pub fn tiny_dims() -> ModelDims {
    ModelDims {
        student_hidden: vec![8, 6, 4],
        deep_teacher_hidden: vec![10, 8, 6, 4],
        id_embed_dim: 4,
        feat_embed_dim: 3,
        behavior_embed_dim: 2,
    }
}

pub fn tiny_model_config(
    method: pfd_core::models::Method,
    task: pfd_core::models::Task,
    sharing: pfd_core::models::SharingMode,
    seed: u64,
) -> ModelConfig {
    let mut cfg = ModelConfig::new(method, task, sharing, seed);
    cfg.dims = tiny_dims();
    cfg.attention_heads = 2;
    cfg.attention_head_dim = 2;
    cfg
}

/// Batch mixing empty and non-empty behavior histories so the learned
/// empty-history vector is exercised. Sized to keep small-batch batch-norm
/// variances well away from zero.
pub fn mixed_batch(records: &[Record], size: usize) -> Vec<&Record> {
    let mut batch: Vec<&Record> = Vec::new();
    if let Some(empty) = records.iter().find(|r| r.behavior.valid_len == 0) {
        batch.push(empty);
    }
    for rec in records {
        if batch.len() >= size {
            break;
        }
        if rec.behavior.valid_len > 0 {
            batch.push(rec);
        }
    }
    assert!(batch.len() >= 2, "need at least two records");
    batch
}
