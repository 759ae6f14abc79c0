//! Central finite-difference verification of analytic gradients.
//!
//! The numerical estimate is taken at step 1e-5 and validated by a half-step
//! re-estimate: where the two disagree the loss is not locally smooth (a
//! LeakyReLU kink crossing or a near-degenerate normalization variance), so
//! no derivative oracle exists there and the coordinate is skipped. A real
//! backward bug produces consistent finite differences that disagree with
//! the analytic value, which this check still catches.

use crate::models::ModelGraph;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Relative-error acceptance with an absolute floor for near-zero pairs.
pub fn fd_ok(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS_FLOOR || diff <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

/// Evenly spaced coordinate sample (every coordinate when small).
pub fn coord_sample(len: usize, max_coords: usize) -> Vec<usize> {
    if len <= max_coords {
        (0..len).collect()
    } else {
        (0..max_coords)
            .map(|k| k * (len - 1) / (max_coords - 1))
            .collect()
    }
}

fn fd_estimate(eval: &mut dyn FnMut(f64) -> f64, orig: f64) -> Option<f64> {
    let full = {
        let up = eval(orig + FD_STEP);
        let down = eval(orig - FD_STEP);
        (up - down) / (2.0 * FD_STEP)
    };
    let half = {
        let up = eval(orig + FD_STEP / 2.0);
        let down = eval(orig - FD_STEP / 2.0);
        (up - down) / FD_STEP
    };
    let diff = (full - half).abs();
    if diff <= FD_ABS_FLOOR || diff <= 0.05 * full.abs().max(half.abs()) {
        Some(full)
    } else {
        None
    }
}

/// Outcome of one sweep: how many coordinates were compared and the worst
/// relative deviation among them.
#[derive(Debug, Clone, Copy, Default)]
pub struct CheckStats {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if (a - n).abs() <= FD_ABS_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Verify captured analytic gradients against finite differences of a loss
/// recomputed from the store. Panics on the first violating coordinate.
pub fn check_param_grads(
    store: &mut ParamStore,
    checks: &[(ParamId, Tensor)],
    loss: &mut dyn FnMut(&mut ParamStore) -> f64,
    max_coords: usize,
    label: &str,
) -> CheckStats {
    let mut stats = CheckStats::default();
    for (pid, analytic) in checks {
        for c in coord_sample(analytic.values.len(), max_coords) {
            let orig = store.value(*pid).values[c];
            let numeric = fd_estimate(
                &mut |v| {
                    store.value_mut(*pid).values[c] = v;
                    let out = loss(store);
                    store.value_mut(*pid).values[c] = orig;
                    out
                },
                orig,
            );
            let Some(numeric) = numeric else {
                stats.skipped += 1;
                continue;
            };
            stats.checked += 1;
            let a = analytic.values[c];
            assert!(
                fd_ok(a, numeric),
                "{label}: param {:?} coord {c}: analytic {a} vs numeric {numeric}",
                store.entry(*pid).name
            );
            stats.worst_rel = stats.worst_rel.max(rel_err(a, numeric));
        }
    }
    assert!(stats.checked > 0, "{label}: no smooth coordinates to check");
    stats
}

/// Same sweep driven through a whole model graph.
pub fn check_graph_grads(
    graph: &mut ModelGraph,
    checks: &[(ParamId, Tensor)],
    loss: &mut dyn FnMut(&mut ModelGraph) -> f64,
    max_coords: usize,
    label: &str,
) -> CheckStats {
    let mut stats = CheckStats::default();
    for (pid, analytic) in checks {
        for c in coord_sample(analytic.values.len(), max_coords) {
            let orig = graph.store.value(*pid).values[c];
            let numeric = fd_estimate(
                &mut |v| {
                    graph.store.value_mut(*pid).values[c] = v;
                    let out = loss(graph);
                    graph.store.value_mut(*pid).values[c] = orig;
                    out
                },
                orig,
            );
            let Some(numeric) = numeric else {
                stats.skipped += 1;
                continue;
            };
            stats.checked += 1;
            let a = analytic.values[c];
            assert!(
                fd_ok(a, numeric),
                "{label}: param {:?} coord {c}: analytic {a} vs numeric {numeric}",
                graph.store.entry(*pid).name
            );
            stats.worst_rel = stats.worst_rel.max(rel_err(a, numeric));
        }
    }
    assert!(stats.checked > 0, "{label}: no smooth coordinates to check");
    stats
}

/// Every trainable parameter's gradient, captured after a backward pass.
pub fn grad_snapshot(store: &ParamStore) -> Vec<(ParamId, Tensor)> {
    (0..store.len())
        .map(ParamId)
        .filter(|id| store.entry(*id).trainable)
        .map(|id| (id, store.grad(id).clone()))
        .collect()
}

/// Re-draw every trainable parameter at a healthy scale. The training init
/// (±0.01 embeddings) leaves layer norms dividing near-zero variances where
/// the loss is too sharply curved for finite differences at step 1e-5, so
/// gradients are checked at a well-conditioned random point instead.
pub fn randomize_params(graph: &mut ModelGraph, seed: u64) {
    use rand::Rng;
    let mut rng = crate::rng::derived_rng(seed, "fd/randomize");
    for e in graph.store.entries_mut() {
        if e.trainable {
            for v in &mut e.value.values {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
}
