//! Self-attention encoder for the user behavior sequence.
//!
//! One attention layer with multi-head scaled dot-product attention, a
//! position-wise feed-forward sublayer, skip connections, and layer
//! normalization, followed by masked mean pooling over the valid events.
//! There are no positional encodings; event order carries no information and
//! the pooled encoding is permutation invariant by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    leaky_relu, leaky_relu_backward, DenseCache, DenseLayer, EmbeddingTable, ParamId, ParamStore,
    Tensor,
};

/// Additive pre-softmax mask for padding positions.
const MASK_NEG: f64 = -1e30;

/// One event in a user's click/purchase history. All fields are categorical
/// ids; recency and dwell buckets stand in for the extra per-item features
/// used instead of position encodings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub item_id: u32,
    pub category_id: u32,
    pub recency_bucket: u32,
    pub dwell_bucket: u32,
}

/// Behavior history with explicit valid length; events at positions >=
/// `valid_len` are padding and must not influence the encoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub events: Vec<BehaviorEvent>,
    pub valid_len: usize,
}

impl BehaviorSequence {
    pub fn new(events: Vec<BehaviorEvent>) -> Self {
        let valid_len = events.len();
        BehaviorSequence { events, valid_len }
    }

    pub fn valid_events(&self) -> &[BehaviorEvent] {
        &self.events[..self.valid_len]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    /// Combined embedding dimension of one event.
    pub model_dim: usize,
    /// Attention layers; the encoder uses exactly one.
    pub layers: usize,
    /// Inner width of the feed-forward sublayer.
    pub ffn_dim: usize,
    pub leaky_slope: f64,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, head_dim: usize, model_dim: usize) -> Self {
        AttentionConfig {
            num_heads,
            head_dim,
            model_dim,
            layers: 1,
            ffn_dim: 2 * model_dim,
            leaky_slope: 0.01,
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers != 1 {
            return Err(Error::InvalidConfig(format!(
                "attention encoder is single-layer, got layers = {}",
                self.layers
            )));
        }
        if self.num_heads == 0 || self.head_dim == 0 || self.model_dim == 0 {
            return Err(Error::InvalidConfig("attention dims must be positive".into()));
        }
        Ok(())
    }
}

/// Per-position layer normalization with learned gain/offset.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

pub struct LayerNormCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.alloc(
            format!("{name}/gamma"),
            Tensor::from_values(&[dim], vec![1.0; dim]),
        );
        let beta = store.alloc(format!("{name}/beta"), Tensor::zeros(&[dim]));
        LayerNorm {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> (Tensor, LayerNormCache) {
        let rows = x.rows();
        let n = self.dim;
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);
        let mut y = Tensor::matrix(rows, n);
        let mut x_hat = Tensor::matrix(rows, n);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                x_hat.row_mut(r)[c] = xh;
                y.row_mut(r)[c] = gamma.values[c] * xh + beta.values[c];
            }
        }
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LayerNormCache,
        grad_out: &Tensor,
    ) -> Tensor {
        let rows = grad_out.rows();
        let n = self.dim;
        let gamma = store.value(self.gamma).values.clone();
        {
            let g_gamma = store.grad_mut(self.gamma);
            for r in 0..rows {
                for c in 0..n {
                    g_gamma.values[c] += grad_out.at(r, c) * cache.x_hat.at(r, c);
                }
            }
        }
        {
            let g_beta = store.grad_mut(self.beta);
            for r in 0..rows {
                for (gb, &g) in g_beta.values.iter_mut().zip(grad_out.row(r)) {
                    *gb += g;
                }
            }
        }
        let mut grad_x = Tensor::matrix(rows, n);
        let nf = n as f64;
        for r in 0..rows {
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for c in 0..n {
                let dxh = grad_out.at(r, c) * gamma[c];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * cache.x_hat.at(r, c);
            }
            let inv = cache.inv_std[r];
            for c in 0..n {
                let dxh = grad_out.at(r, c) * gamma[c];
                grad_x.row_mut(r)[c] =
                    (dxh - sum_dxhat / nf - cache.x_hat.at(r, c) * sum_dxhat_xhat / nf) * inv;
            }
        }
        grad_x
    }
}

/// Learned parameters of the behavior encoder. The four projection matrices
/// have no bias, matching the usual attention formulation.
#[derive(Debug, Clone)]
pub struct AttentionEncoder {
    pub cfg: AttentionConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ffn1: DenseLayer,
    pub ffn2: DenseLayer,
}

impl AttentionEncoder {
    pub fn init<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.model_dim;
        let w = cfg.proj_dim();
        let limit_in = (6.0 / (n + w) as f64).sqrt();
        let limit_out = (6.0 / (w + n) as f64).sqrt();
        let wq = store.alloc(
            format!("{name}/wq"),
            Tensor::uniform(&[n, w], -limit_in, limit_in, rng),
        );
        let wk = store.alloc(
            format!("{name}/wk"),
            Tensor::uniform(&[n, w], -limit_in, limit_in, rng),
        );
        let wv = store.alloc(
            format!("{name}/wv"),
            Tensor::uniform(&[n, w], -limit_in, limit_in, rng),
        );
        let wo = store.alloc(
            format!("{name}/wo"),
            Tensor::uniform(&[w, n], -limit_out, limit_out, rng),
        );
        let ln1 = LayerNorm::init(store, &format!("{name}/ln1"), n);
        let ffn1 = DenseLayer::init(store, &format!("{name}/ffn1"), n, cfg.ffn_dim, rng);
        let ffn2 = DenseLayer::init(store, &format!("{name}/ffn2"), cfg.ffn_dim, n, rng);
        let ln2 = LayerNorm::init(store, &format!("{name}/ln2"), n);
        Ok(AttentionEncoder {
            cfg,
            wq,
            wk,
            wv,
            wo,
            ln1,
            ln2,
            ffn1,
            ffn2,
        })
    }
}

pub struct AttentionCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per-head softmax weights, each `[len×len]`.
    probs: Vec<Tensor>,
    concat: Tensor,
    attn_out: Tensor,
    ln1_cache: LayerNormCache,
    ffn1_cache: DenseCache,
    ffn_pre: Tensor,
    ffn2_cache: DenseCache,
    ln2_cache: LayerNormCache,
    mask: Vec<bool>,
}

impl AttentionCache {
    /// Attention weights of one head (softmax rows), for inspection in tests.
    pub fn head_probs(&self, head: usize) -> &Tensor {
        &self.probs[head]
    }

    /// Output of the multi-head block after the output projection, before the
    /// residual connection.
    pub fn pre_residual(&self) -> &Tensor {
        &self.attn_out
    }
}

fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (ar, ac, bc) = (a.rows(), a.cols(), b.cols());
    assert_eq!(b.rows(), ac);
    for r in 0..ar {
        let arow = a.row(r);
        let orow = out.row_mut(r);
        orow.iter_mut().for_each(|v| *v = 0.0);
        for (k, &av) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    let _ = bc;
}

/// Single-layer masked multi-head self-attention over `seq_embeddings`
/// (`[len×model_dim]`). `mask[j]` marks position j as a valid event; masked
/// positions receive an additive -1e30 score so no weight can reach them. The
/// rows of the output at masked positions carry no meaning and are excluded
/// from pooling by the caller.
pub fn self_attention(
    store: &ParamStore,
    enc: &AttentionEncoder,
    seq_embeddings: &Tensor,
    mask: &[bool],
) -> Result<(Tensor, AttentionCache)> {
    let len = seq_embeddings.rows();
    let n = enc.cfg.model_dim;
    assert_eq!(seq_embeddings.cols(), n, "sequence embedding dim mismatch");
    assert_eq!(mask.len(), len, "mask length mismatch");
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyBehavior);
    }

    let heads = enc.cfg.num_heads;
    let hd = enc.cfg.head_dim;
    let w = enc.cfg.proj_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut q = Tensor::matrix(len, w);
    let mut k = Tensor::matrix(len, w);
    let mut v = Tensor::matrix(len, w);
    matmul_into(seq_embeddings, store.value(enc.wq), &mut q);
    matmul_into(seq_embeddings, store.value(enc.wk), &mut k);
    matmul_into(seq_embeddings, store.value(enc.wv), &mut v);

    let mut concat = Tensor::matrix(len, w);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * hd;
        let mut p = Tensor::matrix(len, len);
        for i in 0..len {
            let qi = &q.row(i)[off..off + hd];
            let row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                let kj = &k.row(j)[off..off + hd];
                let mut s = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                s *= scale;
                if !mask[j] {
                    s += MASK_NEG;
                }
                row[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut denom = 0.0;
            for val in row.iter_mut() {
                *val = (*val - max).exp();
                denom += *val;
            }
            for val in row.iter_mut() {
                *val /= denom;
            }
        }
        for i in 0..len {
            let orow = &mut concat.row_mut(i)[off..off + hd];
            orow.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..len {
                let pij = p.at(i, j);
                if pij == 0.0 {
                    continue;
                }
                let vj = &v.row(j)[off..off + hd];
                for (ov, &vv) in orow.iter_mut().zip(vj) {
                    *ov += pij * vv;
                }
            }
        }
        probs.push(p);
    }

    let mut attn_out = Tensor::matrix(len, n);
    matmul_into(&concat, store.value(enc.wo), &mut attn_out);

    // residual + layer norm
    let mut r1 = attn_out.clone();
    for (rv, &xv) in r1.values.iter_mut().zip(&seq_embeddings.values) {
        *rv += xv;
    }
    let (l1, ln1_cache) = enc.ln1.forward(store, &r1);

    // position-wise feed-forward with residual + layer norm
    let (ffn_pre, ffn1_cache) = enc.ffn1.forward(store, &l1);
    let (ffn_act, _) = leaky_relu(&ffn_pre, enc.cfg.leaky_slope);
    let (ffn_out, ffn2_cache) = enc.ffn2.forward(store, &ffn_act);
    let mut r2 = ffn_out;
    for (rv, &lv) in r2.values.iter_mut().zip(&l1.values) {
        *rv += lv;
    }
    let (out, ln2_cache) = enc.ln2.forward(store, &r2);

    Ok((
        out,
        AttentionCache {
            x: seq_embeddings.clone(),
            q,
            k,
            v,
            probs,
            concat,
            attn_out,
            ln1_cache,
            ffn1_cache,
            ffn_pre,
            ffn2_cache,
            ln2_cache,
            mask: mask.to_vec(),
        },
    ))
}

/// Backward pass through [`self_attention`]. Accumulates parameter gradients
/// into the store and returns dL/d(seq_embeddings).
pub fn self_attention_backward(
    store: &mut ParamStore,
    enc: &AttentionEncoder,
    cache: &AttentionCache,
    grad_out: &Tensor,
) -> Tensor {
    let len = cache.x.rows();
    let n = enc.cfg.model_dim;
    let heads = enc.cfg.num_heads;
    let hd = enc.cfg.head_dim;
    let w = enc.cfg.proj_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // layer norm 2 -> residual split
    let d_r2 = enc.ln2.backward(store, &cache.ln2_cache, grad_out);
    let mut d_l1 = d_r2.clone();

    // feed-forward
    let d_ffn_act = enc.ffn2.backward(store, &cache.ffn2_cache, &d_r2);
    let d_ffn_pre = leaky_relu_backward(&d_ffn_act, &cache.ffn_pre, enc.cfg.leaky_slope);
    let d_l1_ffn = enc.ffn1.backward(store, &cache.ffn1_cache, &d_ffn_pre);
    for (a, &b) in d_l1.values.iter_mut().zip(&d_l1_ffn.values) {
        *a += b;
    }

    // layer norm 1 -> residual split
    let d_r1 = enc.ln1.backward(store, &cache.ln1_cache, &d_l1);
    let mut d_x = d_r1.clone();
    let d_attn = d_r1;

    // output projection
    {
        let g_wo = store.grad_mut(enc.wo);
        for r in 0..len {
            let crow = cache.concat.row(r);
            let grow = d_attn.row(r);
            for (kk, &cv) in crow.iter().enumerate() {
                let gw = g_wo.row_mut(kk);
                for (gv, &g) in gw.iter_mut().zip(grow) {
                    *gv += cv * g;
                }
            }
        }
    }
    let mut d_concat = Tensor::matrix(len, w);
    {
        let wo = store.value(enc.wo);
        for r in 0..len {
            let grow = d_attn.row(r);
            let drow = d_concat.row_mut(r);
            for (kk, dv) in drow.iter_mut().enumerate() {
                let worow = wo.row(kk);
                let mut acc = 0.0;
                for (&g, &wv) in grow.iter().zip(worow) {
                    acc += g * wv;
                }
                *dv = acc;
            }
        }
    }

    // per-head attention core
    let mut d_q = Tensor::matrix(len, w);
    let mut d_k = Tensor::matrix(len, w);
    let mut d_v = Tensor::matrix(len, w);
    for h in 0..heads {
        let off = h * hd;
        let p = &cache.probs[h];
        // dV and dP
        let mut d_p = Tensor::matrix(len, len);
        for i in 0..len {
            let doi = &d_concat.row(i)[off..off + hd];
            for j in 0..len {
                let pij = p.at(i, j);
                if pij != 0.0 {
                    let dvj = &mut d_v.row_mut(j)[off..off + hd];
                    for (dv, &g) in dvj.iter_mut().zip(doi) {
                        *dv += pij * g;
                    }
                }
                let vj = &cache.v.row(j)[off..off + hd];
                let mut acc = 0.0;
                for (&g, &vv) in doi.iter().zip(vj) {
                    acc += g * vv;
                }
                d_p.row_mut(i)[j] = acc;
            }
        }
        // softmax backward: dS_ij = P_ij (dP_ij - sum_j' P_ij' dP_ij')
        let mut d_s = Tensor::matrix(len, len);
        for i in 0..len {
            let prow = p.row(i);
            let dprow = d_p.row(i);
            let dot: f64 = prow.iter().zip(dprow).map(|(&a, &b)| a * b).sum();
            for j in 0..len {
                d_s.row_mut(i)[j] = prow[j] * (dprow[j] - dot);
            }
        }
        // dQ_i += sum_j dS_ij * K_j * scale; dK_j += sum_i dS_ij * Q_i * scale
        for i in 0..len {
            let dsrow = d_s.row(i);
            let dqi = &mut d_q.row_mut(i)[off..off + hd];
            for j in 0..len {
                let ds = dsrow[j] * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[off..off + hd];
                for (dq, &kv) in dqi.iter_mut().zip(kj) {
                    *dq += ds * kv;
                }
            }
        }
        for j in 0..len {
            let dkj = &mut d_k.row_mut(j)[off..off + hd];
            for i in 0..len {
                let ds = d_s.at(i, j) * scale;
                if ds == 0.0 {
                    continue;
                }
                let qi = &cache.q.row(i)[off..off + hd];
                for (dk, &qv) in dkj.iter_mut().zip(qi) {
                    *dk += ds * qv;
                }
            }
        }
    }

    // projection weight grads and input grads
    for (mat, dmat) in [(enc.wq, &d_q), (enc.wk, &d_k), (enc.wv, &d_v)] {
        {
            let g = store.grad_mut(mat);
            for r in 0..len {
                let xrow = cache.x.row(r);
                let drow = dmat.row(r);
                for (kk, &xv) in xrow.iter().enumerate() {
                    let grow = g.row_mut(kk);
                    for (gv, &dv) in grow.iter_mut().zip(drow) {
                        *gv += xv * dv;
                    }
                }
            }
        }
        let wmat = store.value(mat);
        for r in 0..len {
            let drow = dmat.row(r);
            let dxrow = d_x.row_mut(r);
            for (kk, dxv) in dxrow.iter_mut().enumerate().take(n) {
                let wrow = wmat.row(kk);
                let mut acc = 0.0;
                for (&dv, &wv) in drow.iter().zip(wrow) {
                    acc += dv * wv;
                }
                *dxv += acc;
            }
        }
    }

    let _ = &cache.mask;
    d_x
}

/// Behavior embedding tables: item, category, recency bucket, dwell bucket.
/// Their dims must sum to the encoder's model_dim.
#[derive(Debug, Clone)]
pub struct BehaviorTables {
    pub item: EmbeddingTable,
    pub category: EmbeddingTable,
    pub recency: EmbeddingTable,
    pub dwell: EmbeddingTable,
}

impl BehaviorTables {
    pub fn total_dim(&self) -> usize {
        self.item.dim + self.category.dim + self.recency.dim + self.dwell.dim
    }

    fn embed_event(&self, store: &ParamStore, ev: &BehaviorEvent, out: &mut [f64]) {
        let mut off = 0;
        for (table, id) in [
            (&self.item, ev.item_id),
            (&self.category, ev.category_id),
            (&self.recency, ev.recency_bucket),
            (&self.dwell, ev.dwell_bucket),
        ] {
            out[off..off + table.dim].copy_from_slice(&table.lookup_one(store, id));
            off += table.dim;
        }
    }

    fn scatter_event_grad(&self, store: &mut ParamStore, ev: &BehaviorEvent, grad: &[f64]) {
        let mut off = 0;
        for (table, id) in [
            (&self.item, ev.item_id),
            (&self.category, ev.category_id),
            (&self.recency, ev.recency_bucket),
            (&self.dwell, ev.dwell_bucket),
        ] {
            table.accumulate_grad_one(store, id, &grad[off..off + table.dim]);
            off += table.dim;
        }
    }
}

pub struct EncodeCache {
    attn: AttentionCache,
    valid_len: usize,
}

/// Embed a slice of behavior events, run the attention layer, and mean-pool
/// over all of them. Fails on an empty slice; the caller substitutes its
/// learned empty-history vector.
pub fn encode_events(
    store: &ParamStore,
    enc: &AttentionEncoder,
    tables: &BehaviorTables,
    events: &[BehaviorEvent],
) -> Result<(Vec<f64>, EncodeCache)> {
    if events.is_empty() {
        return Err(Error::EmptyBehavior);
    }
    let n = enc.cfg.model_dim;
    assert_eq!(tables.total_dim(), n, "behavior table dims must sum to model_dim");
    let len = events.len();
    let mut x = Tensor::matrix(len, n);
    for (r, ev) in events.iter().enumerate() {
        tables.embed_event(store, ev, x.row_mut(r));
    }
    let mask = vec![true; len];
    let (out, attn) = self_attention(store, enc, &x, &mask)?;
    let mut pooled = vec![0.0; n];
    for r in 0..len {
        for (pv, &ov) in pooled.iter_mut().zip(out.row(r)) {
            *pv += ov;
        }
    }
    pooled.iter_mut().for_each(|v| *v /= len as f64);
    Ok((
        pooled,
        EncodeCache {
            attn,
            valid_len: len,
        },
    ))
}

/// Encode the valid prefix of a behavior sequence.
pub fn encode_behavior(
    store: &ParamStore,
    enc: &AttentionEncoder,
    tables: &BehaviorTables,
    seq: &BehaviorSequence,
) -> Result<(Vec<f64>, EncodeCache)> {
    encode_events(store, enc, tables, seq.valid_events())
}

/// Backward through pooling, attention, and the event embeddings. `events`
/// must be the same slice that produced the cache.
pub fn encode_events_backward(
    store: &mut ParamStore,
    enc: &AttentionEncoder,
    tables: &BehaviorTables,
    events: &[BehaviorEvent],
    cache: &EncodeCache,
    d_pooled: &[f64],
) {
    let n = enc.cfg.model_dim;
    let len = cache.valid_len;
    assert_eq!(events.len(), len, "stale encode cache");
    let mut d_out = Tensor::matrix(len, n);
    let inv = 1.0 / len as f64;
    for r in 0..len {
        for (dv, &g) in d_out.row_mut(r).iter_mut().zip(d_pooled) {
            *dv = g * inv;
        }
    }
    let d_x = self_attention_backward(store, enc, &cache.attn, &d_out);
    for (r, ev) in events.iter().enumerate() {
        tables.scatter_event_grad(store, ev, d_x.row(r));
    }
}
