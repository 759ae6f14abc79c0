//! Metrics and the experiment runner.
//!
//! AUC is computed from rank statistics with average ranks for tied scores,
//! which makes it agree exactly (not just approximately) with the O(N²)
//! pairwise comparison that credits ties 0.5.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{train, DistillConfig, TrainOrder};
use crate::error::{Error, Result};
use crate::models::{build_model, Method, ModelConfig, SharingMode};
use crate::synthdata::Dataset;

/// Probability that a uniformly random positive outscores a uniformly random
/// negative, ties counted 0.5. O(N log N) via the rank-sum identity.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "auc",
            expected: scores.len().to_string(),
            got: labels.len().to_string(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArg("auc: non-finite score".into()));
    }
    let n = scores.len();
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::AucUndefined);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));

    // average 1-based ranks within tie groups; all values are multiples of
    // 0.5 and sums stay far below 2^53, so the arithmetic is exact
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1) + (j + 1)) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let q = negatives as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Brute-force AUC over all positive/negative pairs, 0.5 credit for ties.
/// Kept as the independent oracle for the rank-based implementation.
pub fn auc_pairwise_oracle(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let positives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let negatives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::AucUndefined);
    }
    let mut credit = 0.0f64;
    for &p in &positives {
        for &q in &negatives {
            if p > q {
                credit += 1.0;
            } else if p == q {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (positives.len() as f64 * negatives.len() as f64))
}

/// Item under the GMV ranking rule: expected value = ctr × cvr × price.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub item_id: u32,
    pub ctr: f64,
    pub cvr: f64,
    pub price: f64,
    pub expected_gmv: f64,
}

impl RankedItem {
    pub fn new(item_id: u32, ctr: f64, cvr: f64, price: f64) -> Self {
        assert!(ctr > 0.0 && ctr < 1.0, "ctr must be in (0,1)");
        assert!(cvr > 0.0 && cvr < 1.0, "cvr must be in (0,1)");
        assert!(price >= 0.0, "price must be nonnegative");
        RankedItem {
            item_id,
            ctr,
            cvr,
            price,
            expected_gmv: ctr * cvr * price,
        }
    }
}

/// Top-k by descending expected GMV, ties broken by ascending item id.
pub fn gmv_rank(items: &[RankedItem], k: usize) -> Result<Vec<RankedItem>> {
    if k > items.len() {
        return Err(Error::InvalidArg(format!(
            "gmv_rank: k {} exceeds item count {}",
            k,
            items.len()
        )));
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| {
        b.expected_gmv
            .partial_cmp(&a.expected_gmv)
            .unwrap()
            .then(a.item_id.cmp(&b.item_id))
    });
    sorted.truncate(k);
    Ok(sorted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub sharing: SharingMode,
    pub train_order: TrainOrder,
    pub lambda: f64,
    pub seed: u64,
    pub student_auc: f64,
    pub teacher_auc: Option<f64>,
    pub step_time_s: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "method,sharing,train_order,lambda,seed,student_auc,teacher_auc,step_time_s";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.sharing,
            self.train_order,
            self.lambda,
            self.seed,
            self.student_auc,
            self.teacher_auc.map(|v| v.to_string()).unwrap_or_default(),
            self.step_time_s
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::InvalidArg(format!(
                "metrics row needs 8 fields, got {}: `{line}`",
                parts.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidArg(format!("bad {what}: `{s}`")))
        };
        Ok(MetricsRow {
            method: Method::from_str(parts[0])?,
            sharing: SharingMode::from_str(parts[1])?,
            train_order: TrainOrder::from_str(parts[2])?,
            lambda: parse_f(parts[3], "lambda")?,
            seed: parts[4]
                .parse()
                .map_err(|_| Error::InvalidArg(format!("bad seed: `{}`", parts[4])))?,
            student_auc: parse_f(parts[5], "student_auc")?,
            teacher_auc: if parts[6].is_empty() {
                None
            } else {
                Some(parse_f(parts[6], "teacher_auc")?)
            },
            step_time_s: parse_f(parts[7], "step_time_s")?,
        })
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_CSV_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.to_csv_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != METRICS_CSV_HEADER {
                return Err(Error::CorruptFile(format!("unexpected CSV header `{line}`")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        rows.push(MetricsRow::from_csv_line(&line)?);
    }
    Ok(rows)
}

/// Plain-text table of the metrics rows.
pub fn render_table(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<22} {:<6} {:>6} {:>6} {:>12} {:>12} {:>12}\n",
        "method", "sharing", "order", "lambda", "seed", "student_auc", "teacher_auc", "step_time_s"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:<22} {:<6} {:>6} {:>6} {:>12.6} {:>12} {:>12.6}\n",
            r.method.to_string(),
            r.sharing.to_string(),
            r.train_order.to_string(),
            r.lambda,
            r.seed,
            r.student_auc,
            r.teacher_auc
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "-".into()),
            r.step_time_s,
        ));
    }
    out
}

/// One experiment cell: everything needed to train and score one run.
#[derive(Debug, Clone)]
pub struct ExperimentCell {
    pub model: ModelConfig,
    pub distill: DistillConfig,
}

/// Grid specification expanded into cells in deterministic order.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub methods: Vec<Method>,
    pub sharings: Vec<SharingMode>,
    pub train_orders: Vec<TrainOrder>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base_model: ModelConfig,
    pub base_distill: DistillConfig,
}

impl ExperimentSpec {
    pub fn cells(&self) -> Vec<ExperimentCell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &sharing in &self.sharings {
                for &order in &self.train_orders {
                    let lambdas: &[f64] = if method.has_teacher() {
                        &self.lambdas
                    } else {
                        // lambda is meaningless without a distillation loss
                        std::slice::from_ref(&self.base_distill.lambda)
                    };
                    for &lambda in lambdas {
                        for &seed in &self.seeds {
                            let mut model = self.base_model.clone();
                            model.method = method;
                            model.sharing = sharing;
                            model.seed = seed;
                            let mut distill = self.base_distill.clone();
                            distill.lambda = lambda;
                            distill.seed = seed;
                            distill.train_order = order;
                            out.push(ExperimentCell { model, distill });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Train each cell and evaluate student (and teacher, when present) AUC on
/// the held-out split, recording the median per-step wall time.
pub fn run_experiment(dataset: &Dataset, spec: &ExperimentSpec) -> Result<Vec<MetricsRow>> {
    run_experiment_parallel(dataset, spec, 1)
}

/// Cells are independent and internally single-threaded, so they may run on
/// a small worker pool. Row order follows the cell order regardless of the
/// worker count; only the wall-time fields are load-sensitive.
pub fn run_experiment_parallel(
    dataset: &Dataset,
    spec: &ExperimentSpec,
    workers: usize,
) -> Result<Vec<MetricsRow>> {
    let cells = spec.cells();
    if workers <= 1 || cells.len() <= 1 {
        let mut rows = Vec::new();
        for cell in &cells {
            rows.push(run_cell(dataset, cell)?);
        }
        return Ok(rows);
    }
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<MetricsRow>>>> =
        (0..cells.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let row = run_cell(dataset, &cells[i]);
                *slots[i].lock().unwrap() = Some(row);
            });
        }
    });
    let mut rows = Vec::with_capacity(cells.len());
    for slot in slots {
        rows.push(slot.into_inner().unwrap().expect("cell ran")?);
    }
    Ok(rows)
}

pub fn run_cell(dataset: &Dataset, cell: &ExperimentCell) -> Result<MetricsRow> {
    let mut graph = build_model(&cell.model, &dataset.schema)?;
    let outcome = train(&mut graph, dataset, &cell.distill)?;
    let test = dataset.test();
    let labels: Vec<bool> = test.iter().map(|r| r.label).collect();
    let student_scores = graph.student_logits_eval(test)?;
    let student_auc = auc(&student_scores, &labels)?;
    let teacher_auc = if graph.teacher.is_some() {
        let teacher_scores = graph.teacher_logits_eval(test)?;
        Some(auc(&teacher_scores, &labels)?)
    } else {
        None
    };
    Ok(MetricsRow {
        method: cell.model.method,
        sharing: cell.model.sharing,
        train_order: cell.distill.train_order,
        lambda: cell.distill.lambda,
        seed: cell.distill.seed,
        student_auc,
        teacher_auc,
        step_time_s: outcome.median_step_time_s,
    })
}

/// Median per-step wall time over the last 80% of steps (warm-up excluded).
pub fn median_step_time(step_times: &[f64]) -> f64 {
    if step_times.is_empty() {
        return 0.0;
    }
    let skip = step_times.len() / 5;
    let mut tail: Vec<f64> = step_times[skip..].to_vec();
    tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
    tail[tail.len() / 2]
}
