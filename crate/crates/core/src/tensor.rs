//! Minimal dense linear algebra with explicit forward/backward passes.
//!
//! Everything is f64 and row-major. There is no autodiff: each op returns a
//! cache from its forward pass and exposes a matching backward that routes
//! gradients into a [`ParamStore`]. Parameters live in the store and are
//! referenced by [`ParamId`], which is what lets the teacher and the student
//! share embedding tables or a behavior encoder simply by holding the same id.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor. `values.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor shape {:?} does not match value count {}",
            shape,
            values.len()
        );
        Tensor {
            shape: shape.to_vec(),
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Tensor::zeros(&[rows, cols])
    }

    /// Uniform fill in `[lo, hi)`, consuming the rng in row-major order.
    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let values = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            values,
        }
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix tensor");
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle into a [`ParamStore`]. Two modules holding the same id share the
/// parameter, its gradient buffer, and its optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Adagrad squared-gradient accumulators, same shape as `value`.
    pub accum: Tensor,
    /// Buffers (batch-norm running stats) are stored here too but skipped by
    /// the optimizer.
    pub trainable: bool,
}

/// Arena of all parameters and buffers of a model graph. Insertion order is
/// the canonical order for optimizer sweeps and serialization, which keeps
/// training and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.alloc_entry(name, value, true)
    }

    pub fn alloc_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.alloc_entry(name, value, false)
    }

    fn alloc_entry(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let shape = value.shape.clone();
        self.entries.push(ParamEntry {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            accum: Tensor::zeros(&shape),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].grad
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.values.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Fully connected layer `y = x·W + b` with `W: [in×out]`, `b: [out]`.
#[derive(Debug, Clone, Copy)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Forward cache: the input is retained for the weight gradient.
pub struct DenseCache {
    x: Tensor,
}

impl DenseLayer {
    /// Allocate with uniform `±sqrt(6/(in+out))` weights and zero bias.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.alloc(
            format!("{name}/w"),
            Tensor::uniform(&[in_dim, out_dim], -limit, limit, rng),
        );
        let bias = store.alloc(format!("{name}/b"), Tensor::zeros(&[out_dim]));
        DenseLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> (Tensor, DenseCache) {
        assert_eq!(
            x.cols(),
            self.in_dim,
            "dense layer expects {} input columns, got {}",
            self.in_dim,
            x.cols()
        );
        let w = store.value(self.weight);
        let b = store.value(self.bias);
        let batch = x.rows();
        let mut y = Tensor::matrix(batch, self.out_dim);
        for r in 0..batch {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            yr.copy_from_slice(&b.values);
            for (k, &xv) in xr.iter().enumerate() {
                let wrow = w.row(k);
                for (yv, &wv) in yr.iter_mut().zip(wrow) {
                    *yv += xv * wv;
                }
            }
        }
        (y, DenseCache { x: x.clone() })
    }

    /// Accumulates dW and db into the store, returns dL/dx.
    pub fn backward(&self, store: &mut ParamStore, cache: &DenseCache, grad_out: &Tensor) -> Tensor {
        let batch = cache.x.rows();
        assert_eq!(grad_out.rows(), batch, "stale dense cache");
        assert_eq!(grad_out.cols(), self.out_dim, "stale dense cache");

        let mut grad_x = Tensor::matrix(batch, self.in_dim);
        {
            let w = store.value(self.weight);
            for r in 0..batch {
                let go = grad_out.row(r);
                let gx = grad_x.row_mut(r);
                for (k, gxv) in gx.iter_mut().enumerate() {
                    let wrow = w.row(k);
                    let mut acc = 0.0;
                    for (&g, &wv) in go.iter().zip(wrow) {
                        acc += g * wv;
                    }
                    *gxv = acc;
                }
            }
        }
        {
            let gw = store.grad_mut(self.weight);
            for r in 0..batch {
                let xr = cache.x.row(r);
                let go = grad_out.row(r);
                for (k, &xv) in xr.iter().enumerate() {
                    let gwrow = gw.row_mut(k);
                    for (gwv, &g) in gwrow.iter_mut().zip(go) {
                        *gwv += xv * g;
                    }
                }
            }
        }
        {
            let gb = store.grad_mut(self.bias);
            for r in 0..batch {
                for (gbv, &g) in gb.values.iter_mut().zip(grad_out.row(r)) {
                    *gbv += g;
                }
            }
        }
        grad_x
    }
}

/// Elementwise `max(x, slope*x)`, `slope` in (0,1).
pub fn leaky_relu(x: &Tensor, slope: f64) -> (Tensor, Tensor) {
    assert!(slope > 0.0 && slope < 1.0, "leaky_relu slope must be in (0,1)");
    let mut y = x.clone();
    for v in &mut y.values {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    (y, x.clone())
}

pub fn leaky_relu_backward(grad_out: &Tensor, cache: &Tensor, slope: f64) -> Tensor {
    let mut grad = grad_out.clone();
    for (g, &xv) in grad.values.iter_mut().zip(&cache.values) {
        if xv < 0.0 {
            *g *= slope;
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the batch dimension of a `[batch×dim]` tensor.
/// Gamma/beta are trainable, running stats are buffers updated in train mode.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    centered: Tensor,
}

impl BatchNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.alloc(
            format!("{name}/gamma"),
            Tensor::from_values(&[dim], vec![1.0; dim]),
        );
        let beta = store.alloc(format!("{name}/beta"), Tensor::zeros(&[dim]));
        let running_mean = store.alloc_buffer(format!("{name}/running_mean"), Tensor::zeros(&[dim]));
        let running_var = store.alloc_buffer(
            format!("{name}/running_var"),
            Tensor::from_values(&[dim], vec![1.0; dim]),
        );
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            dim,
            momentum: 0.99,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Option<BatchNormCache>)> {
        assert_eq!(x.cols(), self.dim, "batch norm dim mismatch");
        let batch = x.rows();
        match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(Error::InvalidArg(
                        "batch norm in train mode needs batch size >= 2 (variance undefined)"
                            .into(),
                    ));
                }
                let m = batch as f64;
                let mut mean = vec![0.0; self.dim];
                for r in 0..batch {
                    for (mv, &v) in mean.iter_mut().zip(x.row(r)) {
                        *mv += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                let mut var = vec![0.0; self.dim];
                for r in 0..batch {
                    for ((vv, &v), &mu) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        let d = v - mu;
                        *vv += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);

                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
                let mut centered = Tensor::matrix(batch, self.dim);
                let mut x_hat = Tensor::matrix(batch, self.dim);
                for r in 0..batch {
                    for c in 0..self.dim {
                        let d = x.at(r, c) - mean[c];
                        centered.row_mut(r)[c] = d;
                        x_hat.row_mut(r)[c] = d * inv_std[c];
                    }
                }
                let mut y = Tensor::matrix(batch, self.dim);
                {
                    let gamma = store.value(self.gamma);
                    let beta = store.value(self.beta);
                    for r in 0..batch {
                        for c in 0..self.dim {
                            y.row_mut(r)[c] = gamma.values[c] * x_hat.at(r, c) + beta.values[c];
                        }
                    }
                }
                {
                    let mom = self.momentum;
                    let rm = store.value_mut(self.running_mean);
                    for (rv, &mu) in rm.values.iter_mut().zip(&mean) {
                        *rv = mom * *rv + (1.0 - mom) * mu;
                    }
                    let rv = store.value_mut(self.running_var);
                    for (rvv, &v) in rv.values.iter_mut().zip(&var) {
                        *rvv = mom * *rvv + (1.0 - mom) * v;
                    }
                }
                Ok((
                    y,
                    Some(BatchNormCache {
                        x_hat,
                        inv_std,
                        centered,
                    }),
                ))
            }
            Mode::Eval => Ok((self.forward_eval(store, x), None)),
        }
    }

    /// Eval-mode normalization by the frozen running statistics; the store is
    /// only read, so concurrent scoring over a shared model is safe.
    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let batch = x.rows();
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);
        let rm = store.value(self.running_mean);
        let rv = store.value(self.running_var);
        let mut y = Tensor::matrix(batch, self.dim);
        for r in 0..batch {
            for c in 0..self.dim {
                let inv = 1.0 / (rv.values[c] + self.eps).sqrt();
                y.row_mut(r)[c] =
                    gamma.values[c] * (x.at(r, c) - rm.values[c]) * inv + beta.values[c];
            }
        }
        y
    }

    /// Train-mode backward through the batch statistics.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &BatchNormCache,
        grad_out: &Tensor,
    ) -> Tensor {
        let batch = grad_out.rows();
        let m = batch as f64;
        let gamma = store.value(self.gamma).values.clone();

        {
            let g_gamma = store.grad_mut(self.gamma);
            for r in 0..batch {
                for c in 0..self.dim {
                    g_gamma.values[c] += grad_out.at(r, c) * cache.x_hat.at(r, c);
                }
            }
        }
        {
            let g_beta = store.grad_mut(self.beta);
            for r in 0..batch {
                for (gb, &g) in g_beta.values.iter_mut().zip(grad_out.row(r)) {
                    *gb += g;
                }
            }
        }

        // dL/dx through x_hat, batch mean, and batch variance.
        let mut grad_x = Tensor::matrix(batch, self.dim);
        for c in 0..self.dim {
            let inv = cache.inv_std[c];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for r in 0..batch {
                let dxh = grad_out.at(r, c) * gamma[c];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * cache.x_hat.at(r, c);
            }
            for r in 0..batch {
                let dxh = grad_out.at(r, c) * gamma[c];
                let v = (dxh - sum_dxhat / m - cache.x_hat.at(r, c) * sum_dxhat_xhat / m) * inv;
                grad_x.row_mut(r)[c] = v;
            }
        }
        // centered is kept only to assert the cache matches the call.
        debug_assert_eq!(cache.centered.rows(), batch);
        grad_x
    }
}

/// Guard for zero rows in l2 normalization.
pub const EPS_NORM: f64 = 1e-12;

pub struct L2NormCache {
    x: Tensor,
    norms: Vec<f64>,
}

/// Row-wise `x / max(‖x‖₂, EPS_NORM)`.
pub fn l2_normalize(x: &Tensor) -> (Tensor, L2NormCache) {
    let batch = x.rows();
    let cols = x.cols();
    let mut y = Tensor::matrix(batch, cols);
    let mut norms = Vec::with_capacity(batch);
    for r in 0..batch {
        let row = x.row(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS_NORM);
        norms.push(norm);
        for (yv, &xv) in y.row_mut(r).iter_mut().zip(row) {
            *yv = xv / norm;
        }
    }
    (
        y,
        L2NormCache {
            x: x.clone(),
            norms,
        },
    )
}

pub fn l2_normalize_backward(cache: &L2NormCache, grad_out: &Tensor) -> Tensor {
    let batch = cache.x.rows();
    let cols = cache.x.cols();
    let mut grad_x = Tensor::matrix(batch, cols);
    for r in 0..batch {
        let xr = cache.x.row(r);
        let gr = grad_out.row(r);
        let norm = cache.norms[r];
        let raw_norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if raw_norm > EPS_NORM {
            // d/dx (x/‖x‖) = (I - y yᵀ)/‖x‖ with y = x/‖x‖.
            let dot: f64 = xr.iter().zip(gr).map(|(&x, &g)| x * g).sum();
            let n3 = norm * norm * norm;
            for c in 0..cols {
                grad_x.row_mut(r)[c] = gr[c] / norm - xr[c] * dot / n3;
            }
        } else {
            // Below the guard the map is x/EPS_NORM, a constant scaling.
            for c in 0..cols {
                grad_x.row_mut(r)[c] = gr[c] / norm;
            }
        }
    }
    grad_x
}

/// Categorical-feature id to dense vector mapping. Row 0 is reserved for
/// out-of-vocabulary ids: raw id `x` lives in row `x + 1`, and anything at or
/// beyond the vocabulary falls back to row 0. Tables are therefore allocated
/// with one extra row.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable {
    pub param: ParamId,
    /// Physical row count, including the reserved row.
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let param = store.alloc(
            format!("{name}/emb"),
            Tensor::uniform(&[vocab, dim], -0.01, 0.01, rng),
        );
        EmbeddingTable { param, vocab, dim }
    }

    pub fn remap(&self, id: u32) -> usize {
        let row = id as usize + 1;
        if row < self.vocab {
            row
        } else {
            0
        }
    }

    pub fn lookup(&self, store: &ParamStore, ids: &[u32]) -> Tensor {
        let table = store.value(self.param);
        let mut out = Tensor::matrix(ids.len(), self.dim);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(self.remap(id)));
        }
        out
    }

    pub fn lookup_one(&self, store: &ParamStore, id: u32) -> Vec<f64> {
        store.value(self.param).row(self.remap(id)).to_vec()
    }

    /// Sparse gradient accumulation: repeated ids sum their contributions.
    pub fn accumulate_grad(&self, store: &mut ParamStore, ids: &[u32], grads: &Tensor) {
        assert_eq!(grads.rows(), ids.len(), "embedding grad row count mismatch");
        assert_eq!(grads.cols(), self.dim, "embedding grad dim mismatch");
        let gt = store.grad_mut(self.param);
        for (r, &id) in ids.iter().enumerate() {
            let row = self.remap(id);
            for (gv, &g) in gt.row_mut(row).iter_mut().zip(grads.row(r)) {
                *gv += g;
            }
        }
    }

    pub fn accumulate_grad_one(&self, store: &mut ParamStore, id: u32, grad: &[f64]) {
        let gt = store.grad_mut(self.param);
        for (gv, &g) in gt.row_mut(self.remap(id)).iter_mut().zip(grad) {
            *gv += g;
        }
    }
}

/// Adagrad with linear learning-rate warm-up. Accumulators live next to each
/// parameter in the store; this struct carries the shared schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adagrad {
    pub base_lr: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub step: u64,
}

impl Adagrad {
    pub fn new(base_lr: f64, warmup_steps: u64) -> Self {
        Adagrad {
            base_lr,
            eps: 1e-6,
            warmup_steps,
            step: 0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.base_lr
        } else {
            self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// One synchronous update over every trainable parameter:
    /// `G += g²; w -= lr(step)·g/(√G + eps)`. Gradients are left untouched;
    /// callers zero them when assembling the next batch.
    pub fn apply(&mut self, store: &mut ParamStore) -> f64 {
        self.step += 1;
        let lr = self.lr_at(self.step);
        for entry in store.entries_mut() {
            if !entry.trainable {
                continue;
            }
            for ((w, &g), acc) in entry
                .value
                .values
                .iter_mut()
                .zip(&entry.grad.values)
                .zip(entry.accum.values.iter_mut())
            {
                *acc += g * g;
                *w -= lr * g / (acc.sqrt() + self.eps);
            }
        }
        lr
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Target-weighted logistic loss over a batch of logits. Targets may be soft
/// (any value in [0,1]); the gradient w.r.t. logit i is `(σ(f_i) − t_i)/N`.
pub fn logistic_loss(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "logistic_loss",
            expected: logits.len().to_string(),
            got: targets.len().to_string(),
        });
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&f, &t) in logits.iter().zip(targets) {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArg(format!(
                "logistic_loss target {t} outside [0,1]"
            )));
        }
        loss += t * softplus(-f) + (1.0 - t) * softplus(f);
        grad.push((sigmoid(f) - t) / n);
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;

    #[test]
    fn dense_zero_input_yields_bias() {
        let mut store = ParamStore::new();
        let mut rng = derived_rng(1, "t");
        let layer = DenseLayer::init(&mut store, "d", 3, 2, &mut rng);
        store.value_mut(layer.bias).values = vec![0.5, -1.5];
        let x = Tensor::matrix(4, 3);
        let (y, _) = layer.forward(&store, &x);
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.5, -1.5]);
        }
    }

    #[test]
    fn dense_identity() {
        let mut store = ParamStore::new();
        let mut rng = derived_rng(1, "t");
        let layer = DenseLayer::init(&mut store, "d", 2, 2, &mut rng);
        store.value_mut(layer.weight).values = vec![1.0, 0.0, 0.0, 1.0];
        store.value_mut(layer.bias).values = vec![0.0, 0.0];
        let x = Tensor::from_values(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let (y, _) = layer.forward(&store, &x);
        assert_eq!(y.values, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_matches_triple_loop_matmul() {
        let mut store = ParamStore::new();
        let mut rng = derived_rng(7, "t");
        let layer = DenseLayer::init(&mut store, "d", 4, 2, &mut rng);
        let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let (y, _) = layer.forward(&store, &x);
        let w = store.value(layer.weight);
        let b = store.value(layer.bias);
        for r in 0..3 {
            for c in 0..2 {
                let mut expect = b.values[c];
                for k in 0..4 {
                    expect += x.at(r, k) * w.at(k, c);
                }
                assert!((y.at(r, c) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dense_backward_zero_grad_and_scalar_chain() {
        let mut store = ParamStore::new();
        let mut rng = derived_rng(2, "t");
        let layer = DenseLayer::init(&mut store, "d", 1, 1, &mut rng);
        store.value_mut(layer.weight).values = vec![3.0];
        let x = Tensor::from_values(&[1, 1], vec![2.0]);
        let (_, cache) = layer.forward(&store, &x);

        let zero = Tensor::matrix(1, 1);
        let gx = layer.backward(&mut store, &cache, &zero);
        assert_eq!(gx.values, vec![0.0]);
        assert_eq!(store.grad(layer.weight).values, vec![0.0]);

        let one = Tensor::from_values(&[1, 1], vec![1.0]);
        let gx = layer.backward(&mut store, &cache, &one);
        assert_eq!(store.grad(layer.weight).values, vec![2.0]);
        assert_eq!(gx.values, vec![3.0]);
    }

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor::from_values(&[1, 2], vec![1.0, -1.0]);
        let (y, _) = leaky_relu(&x, 0.01);
        assert_eq!(y.values, vec![1.0, -0.01]);
        let grad = leaky_relu_backward(
            &Tensor::from_values(&[1, 2], vec![1.0, 1.0]),
            &x,
            0.01,
        );
        assert_eq!(grad.values, vec![1.0, 0.01]);
    }

    #[test]
    fn batch_norm_constant_column_maps_to_beta() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::init(&mut store, "bn", 2);
        store.value_mut(bn.beta).values = vec![0.7, -0.2];
        let x = Tensor::from_values(&[3, 2], vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let (y, _) = bn.forward(&mut store, &x, Mode::Train).unwrap();
        for r in 0..3 {
            assert!((y.at(r, 0) - 0.7).abs() < 1e-9, "constant column should collapse to beta");
        }
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::init(&mut store, "bn", 3);
        store.value_mut(bn.gamma).values = vec![2.0, 1.0, 0.5];
        store.value_mut(bn.beta).values = vec![0.1, -0.3, 0.0];
        let mut rng = derived_rng(5, "bn");
        let x = Tensor::uniform(&[64, 3], -2.0, 2.0, &mut rng);
        let (y, _) = bn.forward(&mut store, &x, Mode::Train).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..64).map(|r| y.at(r, c)).sum::<f64>() / 64.0;
            let var: f64 = (0..64).map(|r| (y.at(r, c) - mean).powi(2)).sum::<f64>() / 64.0;
            let beta = store.value(bn.beta).values[c];
            let gamma = store.value(bn.gamma).values[c];
            assert!((mean - beta).abs() < 1e-6);
            assert!((var.sqrt() - gamma.abs()).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_rejects_batch_of_one_in_train() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::init(&mut store, "bn", 2);
        let x = Tensor::matrix(1, 2);
        assert!(bn.forward(&mut store, &x, Mode::Train).is_err());
        assert!(bn.forward(&mut store, &x, Mode::Eval).is_ok());
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let x = Tensor::from_values(&[1, 2], vec![3.0, 4.0]);
        let (y, _) = l2_normalize(&x);
        assert!((y.values[0] - 0.6).abs() < 1e-15);
        assert!((y.values[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_idempotent_on_unit_rows() {
        let x = Tensor::from_values(&[1, 2], vec![0.6, 0.8]);
        let (y, _) = l2_normalize(&x);
        assert!((y.values[0] - 0.6).abs() < 1e-12);
        assert!((y.values[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn embedding_duplicate_ids_sum_gradients() {
        let mut store = ParamStore::new();
        let mut rng = derived_rng(3, "emb");
        let table = EmbeddingTable::init(&mut store, "e", 4, 2, &mut rng);
        let grads = Tensor::from_values(&[2, 2], vec![1.0, 2.0, 10.0, 20.0]);
        table.accumulate_grad(&mut store, &[0, 0], &grads);
        let row = table.remap(0);
        assert_eq!(store.grad(table.param).row(row), &[11.0, 22.0]);
    }

    #[test]
    fn embedding_lookup_reads_back_rows() {
        let mut store = ParamStore::new();
        let mut rng = derived_rng(3, "emb");
        let table = EmbeddingTable::init(&mut store, "e", 4, 3, &mut rng);
        let out = table.lookup(&store, &[2, 1]);
        assert_eq!(out.row(0), store.value(table.param).row(3));
        assert_eq!(out.row(1), store.value(table.param).row(2));
        // out-of-vocab falls back to the reserved row 0
        let oov = table.lookup(&store, &[99]);
        assert_eq!(oov.row(0), store.value(table.param).row(0));
        // the largest in-vocabulary raw id is vocab - 2
        let edge = table.lookup(&store, &[2, 3]);
        assert_eq!(edge.row(0), store.value(table.param).row(3));
        assert_eq!(edge.row(1), store.value(table.param).row(0));
    }

    #[test]
    fn adagrad_zero_grad_is_noop() {
        let mut store = ParamStore::new();
        let p = store.alloc("p", Tensor::from_values(&[2], vec![1.0, -1.0]));
        let mut opt = Adagrad::new(0.01, 0);
        opt.apply(&mut store);
        assert_eq!(store.value(p).values, vec![1.0, -1.0]);
        assert_eq!(store.entry(p).accum.values, vec![0.0, 0.0]);
    }

    #[test]
    fn adagrad_first_steps_closed_form() {
        let mut store = ParamStore::new();
        let p = store.alloc("p", Tensor::from_values(&[1], vec![0.0]));
        let mut opt = Adagrad::new(0.01, 0);

        store.grad_mut(p).values[0] = 1.0;
        opt.apply(&mut store);
        let w1 = store.value(p).values[0];
        assert!((w1 - (-0.01 / (1.0 + 1e-6))).abs() < 1e-15);

        store.grad_mut(p).values[0] = 1.0;
        opt.apply(&mut store);
        let w2 = store.value(p).values[0];
        let expect = w1 - 0.01 / (2.0_f64.sqrt() + 1e-6);
        assert!((w2 - expect).abs() < 1e-15);
    }

    #[test]
    fn adagrad_warmup_ramps_linearly() {
        let opt = Adagrad::new(0.01, 100);
        assert!((opt.lr_at(1) - 0.0001).abs() < 1e-15);
        assert!((opt.lr_at(50) - 0.005).abs() < 1e-15);
        assert_eq!(opt.lr_at(100), 0.01);
        assert_eq!(opt.lr_at(5000), 0.01);
    }

    #[test]
    fn logistic_loss_symmetric_point() {
        let (loss, grad) = logistic_loss(&[0.0], &[1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[0] - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn logistic_loss_stationary_at_matched_soft_target() {
        let f = 1.3;
        let t = sigmoid(f);
        let (loss, grad) = logistic_loss(&[f], &[t]).unwrap();
        assert!(grad[0].abs() < 1e-15);
        // loss equals the binary entropy of t, not zero
        let entropy = -(t * t.ln() + (1.0 - t) * (1.0 - t).ln());
        assert!((loss - entropy).abs() < 1e-12);
    }

    #[test]
    fn logistic_loss_rejects_bad_targets() {
        assert!(logistic_loss(&[0.0], &[1.5]).is_err());
        assert!(logistic_loss(&[0.0], &[-0.1]).is_err());
        assert!(logistic_loss(&[0.0, 0.0], &[0.5]).is_err());
    }

    #[test]
    fn logistic_loss_stable_at_extreme_logits() {
        let (loss, grad) = logistic_loss(&[1000.0, -1000.0], &[1.0, 0.0]).unwrap();
        assert!(loss.is_finite());
        assert!(grad.iter().all(|g| g.is_finite()));
        assert!(loss.abs() < 1e-12);
    }
}
