//! Training engine: the synchronous teacher/student loop with warm-up
//! swapping and teacher stop-gradient, plus the asynchronous two-phase
//! variant (teacher to convergence first, then the student against the
//! frozen teacher).
//!
//! Per step, the student minimizes `(1-λ)·L_s + λ·L_d` once the swap step is
//! reached (plain `L_s` before), the teacher always minimizes `L_t` alone —
//! the distillation loss never reaches teacher parameters, so the teacher
//! cannot co-adapt to the student. Shared input components accumulate
//! gradients from both paths and receive a single combined update per step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::median_step_time;
use crate::models::{encode_batch, encode_batch_backward, BehaviorBatch, ModelGraph, TeacherInputs};
use crate::rng::derived_rng;
use crate::synthdata::{Dataset, Record};
use crate::tensor::{logistic_loss, sigmoid, Adagrad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainOrder {
    /// One pass interleaving both models per step.
    Sync,
    /// Full teacher training first, then the student against the frozen
    /// teacher with the distillation loss active from step 0.
    Async,
}

impl std::fmt::Display for TrainOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainOrder::Sync => "sync",
            TrainOrder::Async => "async",
        })
    }
}

impl FromStr for TrainOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(TrainOrder::Sync),
            "async" => Ok(TrainOrder::Async),
            other => Err(Error::InvalidArg(format!("unknown train order `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the distillation loss in the student objective.
    pub lambda: f64,
    /// Step at which the student starts seeing the distillation loss;
    /// defaults to 10% of the total step count.
    pub swap_step: Option<u64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub train_order: TrainOrder,
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.5,
            swap_step: None,
            batch_size: 256,
            epochs: 1,
            seed: 42,
            train_order: TrainOrder::Sync,
            base_lr: 0.01,
            warmup_steps: 1000,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda {} outside [0,1]",
                self.lambda
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be at least 2 (batch norm needs a variance)".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        (train_len / self.batch_size) as u64
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        self.steps_per_epoch(train_len) * self.epochs as u64
    }

    pub fn effective_swap_step(&self, train_len: usize) -> u64 {
        self.swap_step
            .unwrap_or_else(|| self.total_steps(train_len) / 10)
    }
}

/// Per-step losses. Fields are absent when the corresponding model or loss
/// does not exist at that step (no teacher, or warm-up before the swap).
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_s: Option<f64>,
    pub l_t: Option<f64>,
    pub l_d: Option<f64>,
    pub combined_student: Option<f64>,
    pub lr: f64,
}

/// Cross-entropy of the student against the teacher's soft labels
/// `σ(f_t)`. Teacher logits are constants here: the returned gradient is
/// with respect to the student logits only.
pub fn distillation_loss(teacher_logits: &[f64], student_logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if teacher_logits.len() != student_logits.len() {
        return Err(Error::ShapeMismatch {
            op: "distillation_loss",
            expected: teacher_logits.len().to_string(),
            got: student_logits.len().to_string(),
        });
    }
    let soft: Vec<f64> = teacher_logits.iter().map(|&f| sigmoid(f)).collect();
    logistic_loss(student_logits, &soft)
}

/// Mean squared error with gradient, used by the MTL regression heads.
pub fn mse_loss(preds: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(preds.len(), targets.len());
    let n = preds.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(preds.len());
    for (&p, &t) in preds.iter().zip(targets) {
        let d = p - t;
        loss += d * d;
        grad.push(2.0 * d / n);
    }
    (loss / n, grad)
}

pub struct TrainOutcome {
    pub history: Vec<LossBreakdown>,
    pub step_times: Vec<f64>,
    pub median_step_time_s: f64,
    pub total_time_s: f64,
}

fn check_finite(value: f64, what: &str, step: u64, batch: usize, seed: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            step,
            batch,
            seed,
            detail: format!("{what} = {value}"),
        })
    }
}

struct StepContext<'a> {
    cfg: &'a DistillConfig,
    swap_step: u64,
    batch_index: usize,
}

/// One synchronous update: student (and teacher, when present) forward,
/// losses, backward into a zeroed gradient buffer, one optimizer sweep.
fn sync_step(
    graph: &mut ModelGraph,
    opt: &mut Adagrad,
    batch: &[&Record],
    ctx: &StepContext<'_>,
) -> Result<LossBreakdown> {
    let step = opt.step; // 0-based index of the update about to happen
    let cfg = ctx.cfg;
    graph.store.zero_grads();

    let labels: Vec<f64> = batch.iter().map(|r| f64::from(r.label)).collect();
    let max_len = graph.config.max_behavior_len;
    let shared = graph.shares_input_components();

    let student_beh = encode_batch(
        &graph.store,
        &graph.student_encoder,
        &graph.student_tables,
        batch,
        max_len,
    )?;
    let teacher_needs_beh = graph
        .teacher_inputs
        .map(|i| i != TeacherInputs::PrivilegedOnly)
        .unwrap_or(false);
    let teacher_beh: Option<BehaviorBatch> = if graph.teacher.is_some() && teacher_needs_beh {
        if shared {
            None // reuse the student's encodings
        } else {
            Some(encode_batch(
                &graph.store,
                graph.teacher_encoder.as_ref().unwrap(),
                graph.teacher_tables.as_ref().unwrap(),
                batch,
                max_len,
            )?)
        }
    } else {
        None
    };

    let student_fwd = graph.student_forward_train(batch, &student_beh)?;
    let (l_s, grad_s_hard) = logistic_loss(&student_fwd.logits, &labels)?;
    let l_s = check_finite(l_s, "L_s", step, ctx.batch_index, cfg.seed)?;

    let teacher_fwd = if graph.teacher.is_some() {
        let beh_ref = if shared || !teacher_needs_beh {
            &student_beh
        } else {
            teacher_beh.as_ref().unwrap()
        };
        Some(graph.teacher_forward_train(batch, beh_ref)?)
    } else {
        None
    };
    let teacher_loss = match &teacher_fwd {
        Some(fwd) => {
            let (l_t, grad_t) = logistic_loss(&fwd.logits, &labels)?;
            Some((
                check_finite(l_t, "L_t", step, ctx.batch_index, cfg.seed)?,
                grad_t,
            ))
        }
        None => None,
    };

    let distill_active =
        teacher_fwd.is_some() && step >= ctx.swap_step && cfg.lambda > 0.0;
    let (l_d, d_student, combined) = if distill_active {
        let t_logits = &teacher_fwd.as_ref().unwrap().logits;
        let (l_d, grad_d) = distillation_loss(t_logits, &student_fwd.logits)?;
        let l_d = check_finite(l_d, "L_d", step, ctx.batch_index, cfg.seed)?;
        let lam = cfg.lambda;
        let d: Vec<f64> = grad_s_hard
            .iter()
            .zip(&grad_d)
            .map(|(&gs, &gd)| (1.0 - lam) * gs + lam * gd)
            .collect();
        (Some(l_d), d, (1.0 - lam) * l_s + lam * l_d)
    } else {
        (None, grad_s_hard, l_s)
    };

    // MTL auxiliary heads: forward on the shared first hidden layer, losses
    // against the privileged targets, gradient tapped back into the student
    let mut combined = combined;
    let aux_tap = if let Some(aux) = graph.mtl_aux.clone() {
        let hidden0 = match &student_fwd.cache {
            crate::models::StudentCache::Ranker { net, .. } => net.block_outputs[0].clone(),
            _ => unreachable!("mtl student is a ranker"),
        };
        let (dwell_pred, dwell_cache) = aux.dwell_head.forward_train(&mut graph.store, &hidden0)?;
        let dwell_targets: Vec<f64> = batch.iter().map(|r| r.dwell).collect();
        let (l_dwell, g_dwell) = mse_loss(&dwell_pred.values, &dwell_targets);

        let (viewed_logit, viewed_cache) =
            aux.viewed_head.forward_train(&mut graph.store, &hidden0)?;
        let viewed_targets: Vec<f64> =
            batch.iter().map(|r| f64::from(r.viewed_comments)).collect();
        let (l_viewed, g_viewed) = logistic_loss(&viewed_logit.values, &viewed_targets)?;

        combined += aux.aux_weight * (l_dwell + l_viewed);
        check_finite(combined, "L_aux", step, ctx.batch_index, cfg.seed)?;

        let w = aux.aux_weight;
        let g_dwell = Tensor::from_values(
            &[batch.len(), 1],
            g_dwell.iter().map(|g| g * w).collect(),
        );
        let g_viewed = Tensor::from_values(
            &[batch.len(), 1],
            g_viewed.iter().map(|g| g * w).collect(),
        );
        let mut tap = aux
            .dwell_head
            .backward(&mut graph.store, &dwell_cache, &g_dwell);
        let tap2 = aux
            .viewed_head
            .backward(&mut graph.store, &viewed_cache, &g_viewed);
        for (a, &b) in tap.values.iter_mut().zip(&tap2.values) {
            *a += b;
        }
        Some(tap)
    } else {
        None
    };

    let taps: Vec<(usize, &Tensor)> = aux_tap.iter().map(|t| (0usize, t)).collect();
    let upstream_s = graph.student_backward(&student_fwd.cache, &d_student, &taps);

    let upstream_t = match (&teacher_fwd, &teacher_loss) {
        (Some(fwd), Some((_, grad_t))) => graph.teacher_backward(&fwd.cache, grad_t),
        _ => None,
    };

    // behavior gradients: one encoder pass per owner; shared components sum
    // the student and teacher contributions before the (single) update
    match (upstream_s, upstream_t) {
        (Some(mut us), Some(ut)) if shared => {
            for (a, b) in us.iter_mut().zip(&ut) {
                for (av, &bv) in a.iter_mut().zip(b) {
                    *av += bv;
                }
            }
            encode_batch_backward(
                &mut graph.store,
                &graph.student_encoder.clone(),
                &graph.student_tables.clone(),
                batch,
                &student_beh,
                &us,
            );
        }
        (us, ut) => {
            if let Some(us) = us {
                encode_batch_backward(
                    &mut graph.store,
                    &graph.student_encoder.clone(),
                    &graph.student_tables.clone(),
                    batch,
                    &student_beh,
                    &us,
                );
            }
            if let Some(ut) = ut {
                let (enc, tabs) = (
                    graph.teacher_encoder.clone().unwrap(),
                    graph.teacher_tables.clone().unwrap(),
                );
                let beh = if shared {
                    &student_beh
                } else {
                    teacher_beh.as_ref().unwrap()
                };
                encode_batch_backward(&mut graph.store, &enc, &tabs, batch, beh, &ut);
            }
        }
    }

    let lr = opt.apply(&mut graph.store);
    Ok(LossBreakdown {
        step,
        l_s: Some(l_s),
        l_t: teacher_loss.map(|(l, _)| l),
        l_d,
        combined_student: Some(combined),
        lr,
    })
}

/// Teacher-only update, used by the asynchronous first phase.
fn teacher_step(
    graph: &mut ModelGraph,
    opt: &mut Adagrad,
    batch: &[&Record],
    ctx: &StepContext<'_>,
) -> Result<LossBreakdown> {
    let step = opt.step;
    let cfg = ctx.cfg;
    graph.store.zero_grads();
    let labels: Vec<f64> = batch.iter().map(|r| f64::from(r.label)).collect();
    let max_len = graph.config.max_behavior_len;

    let needs_beh = graph
        .teacher_inputs
        .map(|i| i != TeacherInputs::PrivilegedOnly)
        .unwrap_or(false);
    let beh = encode_batch(
        &graph.store,
        graph.teacher_encoder.as_ref().unwrap(),
        graph.teacher_tables.as_ref().unwrap(),
        batch,
        max_len,
    )?;
    let fwd = graph.teacher_forward_train(batch, &beh)?;
    let (l_t, grad_t) = logistic_loss(&fwd.logits, &labels)?;
    let l_t = check_finite(l_t, "L_t", step, ctx.batch_index, cfg.seed)?;
    let upstream = graph.teacher_backward(&fwd.cache, &grad_t);
    if needs_beh {
        if let Some(ut) = upstream {
            let (enc, tabs) = (
                graph.teacher_encoder.clone().unwrap(),
                graph.teacher_tables.clone().unwrap(),
            );
            encode_batch_backward(&mut graph.store, &enc, &tabs, batch, &beh, &ut);
        }
    }
    let lr = opt.apply(&mut graph.store);
    Ok(LossBreakdown {
        step,
        l_s: None,
        l_t: Some(l_t),
        l_d: None,
        combined_student: None,
        lr,
    })
}

/// Student-phase update against a frozen teacher (eval-mode forward, no
/// teacher gradients), distillation active from step 0.
fn frozen_teacher_step(
    graph: &mut ModelGraph,
    opt: &mut Adagrad,
    batch: &[&Record],
    ctx: &StepContext<'_>,
) -> Result<LossBreakdown> {
    let step = opt.step;
    let cfg = ctx.cfg;
    graph.store.zero_grads();
    let labels: Vec<f64> = batch.iter().map(|r| f64::from(r.label)).collect();
    let max_len = graph.config.max_behavior_len;

    let student_beh = encode_batch(
        &graph.store,
        &graph.student_encoder,
        &graph.student_tables,
        batch,
        max_len,
    )?;
    let student_fwd = graph.student_forward_train(batch, &student_beh)?;
    let (l_s, grad_s_hard) = logistic_loss(&student_fwd.logits, &labels)?;
    let l_s = check_finite(l_s, "L_s", step, ctx.batch_index, cfg.seed)?;

    let owned: Vec<Record> = batch.iter().map(|&r| r.clone()).collect();
    let t_logits = graph.teacher_logits_eval(&owned)?;
    let (l_d, grad_d) = distillation_loss(&t_logits, &student_fwd.logits)?;
    let l_d = check_finite(l_d, "L_d", step, ctx.batch_index, cfg.seed)?;

    let lam = cfg.lambda;
    let d_student: Vec<f64> = grad_s_hard
        .iter()
        .zip(&grad_d)
        .map(|(&gs, &gd)| (1.0 - lam) * gs + lam * gd)
        .collect();
    let combined = (1.0 - lam) * l_s + lam * l_d;

    let upstream_s = graph.student_backward(&student_fwd.cache, &d_student, &[]);
    if let Some(us) = upstream_s {
        encode_batch_backward(
            &mut graph.store,
            &graph.student_encoder.clone(),
            &graph.student_tables.clone(),
            batch,
            &student_beh,
            &us,
        );
    }
    let lr = opt.apply(&mut graph.store);
    Ok(LossBreakdown {
        step,
        l_s: Some(l_s),
        l_t: None,
        l_d: Some(l_d),
        combined_student: Some(combined),
        lr,
    })
}

fn epoch_order(seed: u64, epoch: usize, train_len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..train_len).collect();
    let mut rng = derived_rng(seed, &format!("data/epoch{epoch}"));
    order.shuffle(&mut rng);
    order
}

enum Phase {
    Sync,
    TeacherOnly,
    FrozenTeacher,
}

fn run_phase(
    graph: &mut ModelGraph,
    dataset: &Dataset,
    cfg: &DistillConfig,
    phase: Phase,
    data_tag: &str,
    observer: &mut dyn FnMut(u64, &ModelGraph),
) -> Result<(Vec<LossBreakdown>, Vec<f64>)> {
    let train = dataset.train();
    let swap_step = cfg.effective_swap_step(train.len());
    let mut opt = Adagrad::new(cfg.base_lr, cfg.warmup_steps);
    let mut history = Vec::new();
    let mut step_times = Vec::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train.len());
        let full_batches = train.len() / cfg.batch_size;
        for b in 0..full_batches {
            let idxs = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let batch: Vec<&Record> = idxs.iter().map(|&i| &train[i]).collect();
            let ctx = StepContext {
                cfg,
                swap_step,
                batch_index: b,
            };
            let t0 = Instant::now();
            let row = match phase {
                Phase::Sync => sync_step(graph, &mut opt, &batch, &ctx)?,
                Phase::TeacherOnly => teacher_step(graph, &mut opt, &batch, &ctx)?,
                Phase::FrozenTeacher => frozen_teacher_step(graph, &mut opt, &batch, &ctx)?,
            };
            step_times.push(t0.elapsed().as_secs_f64());
            observer(row.step, graph);
            history.push(row);
        }
    }
    let _ = data_tag;
    Ok((history, step_times))
}

/// Train the graph on the dataset's train split. Sync interleaves teacher
/// and student updates in one pass; Async trains the teacher to completion
/// first and then the student against the frozen teacher.
pub fn train(graph: &mut ModelGraph, dataset: &Dataset, cfg: &DistillConfig) -> Result<TrainOutcome> {
    train_observed(graph, dataset, cfg, &mut |_, _| {})
}

/// [`train`] with a per-step observer (called after each optimizer update)
/// used by trajectory-comparison tests and instrumentation.
pub fn train_observed(
    graph: &mut ModelGraph,
    dataset: &Dataset,
    cfg: &DistillConfig,
    observer: &mut dyn FnMut(u64, &ModelGraph),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graph.config.method.needs_privileged() {
        // generator always emits the fields; guard anyway for foreign data
        let has_priv = match graph.config.task {
            crate::models::Task::Ctr => !graph.schema.interacted_decls().is_empty(),
            crate::models::Task::Cvr => !graph.schema.post_event_decls().is_empty(),
        };
        if !has_priv {
            return Err(Error::InvalidConfig(
                "privileged features absent from the dataset schema".into(),
            ));
        }
    }
    let started = Instant::now();
    let (history, step_times) = match (cfg.train_order, graph.teacher.is_some()) {
        (TrainOrder::Sync, _) | (TrainOrder::Async, false) => {
            run_phase(graph, dataset, cfg, Phase::Sync, "sync", observer)?
        }
        (TrainOrder::Async, true) => {
            let (mut h1, mut t1) =
                run_phase(graph, dataset, cfg, Phase::TeacherOnly, "teacher", observer)?;
            let (h2, t2) =
                run_phase(graph, dataset, cfg, Phase::FrozenTeacher, "student", observer)?;
            h1.extend(h2);
            t1.extend(t2);
            (h1, t1)
        }
    };
    Ok(TrainOutcome {
        median_step_time_s: median_step_time(&step_times),
        total_time_s: started.elapsed().as_secs_f64(),
        history,
        step_times,
    })
}

/// Train only the teacher (the asynchronous first phase), leaving the
/// student untouched. Exposed so a standalone teacher run can be compared
/// against the teacher that comes out of a full async run.
pub fn train_teacher_only(
    graph: &mut ModelGraph,
    dataset: &Dataset,
    cfg: &DistillConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graph.teacher.is_none() {
        return Err(Error::InvalidConfig("graph has no teacher to train".into()));
    }
    let started = Instant::now();
    let (history, step_times) =
        run_phase(graph, dataset, cfg, Phase::TeacherOnly, "teacher", &mut |_, _| {})?;
    Ok(TrainOutcome {
        median_step_time_s: median_step_time(&step_times),
        total_time_s: started.elapsed().as_secs_f64(),
        history,
        step_times,
    })
}

/// Training-log CSV: `step,l_s,l_t,l_d,combined,lr`, empty cells where a
/// loss does not exist at that step.
pub fn write_training_log(history: &[LossBreakdown], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,l_s,l_t,l_d,combined,lr")?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            row.step,
            fmt(row.l_s),
            fmt(row.l_t),
            fmt(row.l_d),
            fmt(row.combined_student),
            row.lr
        )?;
    }
    w.flush()?;
    Ok(())
}
