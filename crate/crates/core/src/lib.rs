//! Desk-scale laboratory for privileged-features distillation.
//!
//! The crate trains teacher/student pairs where the teacher may read
//! privileged features (informative but unavailable at serving time) and the
//! student is distilled from its soft predictions. It covers the comparator
//! methods (LUPI, model distillation, multi-task learning), a seeded
//! synthetic data generator with a controllable price confound, AUC-based
//! evaluation, and the inner-product serving path with exact flops
//! accounting.

pub mod attention;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod models;
pub mod rng;
pub mod serving;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
