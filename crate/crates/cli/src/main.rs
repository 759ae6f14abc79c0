//! Command-line driver: synthetic data generation, teacher/student training,
//! evaluation, method comparison grids, flops accounting, and the serving
//! latency microbenchmark. Every subcommand is deterministic given its flags
//! and seed (timing fields excluded); artifacts land in the `--out`
//! directory together with an echo of the effective configuration.

mod config_file;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use config_file::{resolve, ConfigFile};
use pfd_core::checkpoint;
use pfd_core::distill::{train, write_training_log, DistillConfig, TrainOrder};
use pfd_core::eval::{
    auc, read_metrics_csv, render_table, run_experiment_parallel, write_metrics_csv,
    ExperimentSpec,
};
use pfd_core::models::{build_model, Method, ModelConfig, ModelDims, SharingMode, Task};
use pfd_core::serving::{flops_count, latency_bench};
use pfd_core::synthdata::{export_propensities, generate, read_jsonl, write_jsonl, GeneratorConfig};

#[derive(Parser)]
#[command(name = "pfd", version, about = "Privileged-features distillation lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clickstream dataset (JSON Lines).
    GenData(GenDataArgs),
    /// Train a method on a generated dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's held-out split.
    Evaluate(EvaluateArgs),
    /// Run a method/sharing/λ/seed grid and emit a comparison table.
    Compare(CompareArgs),
    /// Exact fused multiply-add accounting for a tower mapping.
    Flops(FlopsArgs),
    /// Wall-clock microbenchmark of tower mapping vs. inner product.
    ServeBench(ServeBenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    records: Option<usize>,
    /// Train/test boundary by record index.
    #[arg(long)]
    split: Option<usize>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    confound_alpha: Option<f64>,
    #[arg(long)]
    price_beta: Option<f64>,
    #[arg(long)]
    behavior_len_max: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    sharing: Option<String>,
    #[arg(long)]
    train_order: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    swap_step: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    student_seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Use the production-sized layer preset instead of the desk preset.
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional directory for an eval.csv artifact.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated list, e.g. baseline,lupi,md,pfd,pfd_md.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    sharings: Option<String>,
    #[arg(long)]
    train_orders: Option<String>,
    /// Comma-separated lambda grid, e.g. 0.1,0.3,0.5,0.7,0.9.
    #[arg(long)]
    lambda_grid: Option<String>,
    /// Comma-separated training seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    swap_step: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Worker threads for independent cells (wall-time columns get noisy
    /// above 1).
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct FlopsArgs {
    /// Layer chain as input,hidden...,output — e.g. 1024,512,256,128.
    #[arg(long)]
    dims: String,
    /// Optional JSON report path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ServeBenchArgs {
    /// Number of candidate items per repetition.
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Tower dims as input,hidden...,output.
    #[arg(long, default_value = "1024,512,256,128")]
    dims: String,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Evaluate(args) => cmd_evaluate(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::Flops(args) => cmd_flops(args),
        Cmd::ServeBench(args) => cmd_serve_bench(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

fn write_effective_config(out: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (key, value) in entries {
        writeln!(text, "{key} = {value}")?;
    }
    std::fs::write(out.join("config.txt"), text)?;
    Ok(())
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {what} entry `{s}`: {e}"))
        })
        .collect()
}

fn parse_dims(raw: &str) -> Result<(usize, Vec<usize>, usize)> {
    let dims: Vec<usize> = parse_list(raw, "dims")?;
    if dims.len() < 2 {
        bail!("--dims needs at least input and output sizes, got `{raw}`");
    }
    let input = dims[0];
    let output = *dims.last().unwrap();
    let hidden = dims[1..dims.len() - 1].to_vec();
    Ok((input, hidden, output))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let defaults = GeneratorConfig::default();
    let config = GeneratorConfig {
        seed: resolve(args.seed, file.get("seed")?, defaults.seed),
        num_records: resolve(args.records, file.get("records")?, defaults.num_records),
        split_index: resolve(args.split, file.get("split")?, defaults.split_index),
        num_users: resolve(args.users, file.get("users")?, defaults.num_users),
        num_items: resolve(args.items, file.get("items")?, defaults.num_items),
        noise_sigma: resolve(args.noise_sigma, file.get("noise-sigma")?, defaults.noise_sigma),
        confound_alpha: resolve(
            args.confound_alpha,
            file.get("confound-alpha")?,
            defaults.confound_alpha,
        ),
        price_beta: resolve(args.price_beta, file.get("price-beta")?, defaults.price_beta),
        behavior_len_max: resolve(
            args.behavior_len_max,
            file.get("behavior-len-max")?,
            defaults.behavior_len_max,
        ),
        ..defaults
    };

    std::fs::create_dir_all(&args.out)?;
    let dataset = generate(&config)?;
    let data_path = args.out.join("dataset.jsonl");
    write_jsonl(&dataset, &data_path)?;
    export_propensities(&dataset, &args.out.join("propensities.csv"))?;
    write_effective_config(
        &args.out,
        &[
            ("seed", config.seed.to_string()),
            ("records", config.num_records.to_string()),
            ("split", config.split_index.to_string()),
            ("users", config.num_users.to_string()),
            ("items", config.num_items.to_string()),
            ("noise-sigma", config.noise_sigma.to_string()),
            ("confound-alpha", config.confound_alpha.to_string()),
            ("price-beta", config.price_beta.to_string()),
            ("behavior-len-max", config.behavior_len_max.to_string()),
        ],
    )?;
    println!(
        "wrote {} records ({} train / {} test) to {}",
        dataset.records.len(),
        dataset.train().len(),
        dataset.test().len(),
        data_path.display()
    );
    println!("schema_hash = {}", dataset.schema.hash());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let method = Method::from_str(&resolve(
        args.method,
        file.get("method")?,
        "baseline".to_string(),
    ))?;
    let task = Task::from_str(&resolve(args.task, file.get("task")?, "cvr".to_string()))?;
    let sharing = SharingMode::from_str(&resolve(
        args.sharing,
        file.get("sharing")?,
        "share_except_user_id".to_string(),
    ))?;
    let order = TrainOrder::from_str(&resolve(
        args.train_order,
        file.get("train-order")?,
        "sync".to_string(),
    ))?;
    let seed = resolve(args.seed, file.get("seed")?, 42);

    let mut model = ModelConfig::new(method, task, sharing, seed);
    if args.full_scale {
        model.dims = ModelDims::full_scale();
        model.attention_heads = 4;
        model.attention_head_dim = 32;
        model.max_behavior_len = 50;
    }
    model.student_seed = args.student_seed.or(file.get("student-seed")?);

    let base = DistillConfig::default();
    let distill = DistillConfig {
        lambda: resolve(args.lambda, file.get("lambda")?, base.lambda),
        swap_step: args.swap_step.or(file.get("swap-step")?),
        batch_size: resolve(args.batch_size, file.get("batch-size")?, base.batch_size),
        epochs: resolve(args.epochs, file.get("epochs")?, base.epochs),
        seed,
        train_order: order,
        base_lr: resolve(args.lr, file.get("lr")?, base.base_lr),
        warmup_steps: resolve(args.warmup_steps, file.get("warmup-steps")?, base.warmup_steps),
    };

    let dataset = read_jsonl(&args.data, None)?;
    std::fs::create_dir_all(&args.out)?;
    let mut graph = build_model(&model, &dataset.schema)?;
    let outcome = train(&mut graph, &dataset, &distill)?;

    let ckpt_path = args.out.join("checkpoint.bin");
    let hash = checkpoint::save(&graph, &ckpt_path)?;
    write_training_log(&outcome.history, &args.out.join("train_log.csv"))?;
    write_effective_config(
        &args.out,
        &[
            ("method", method.to_string()),
            ("task", task.to_string()),
            ("sharing", sharing.to_string()),
            ("train-order", order.to_string()),
            ("lambda", distill.lambda.to_string()),
            (
                "swap-step",
                distill
                    .effective_swap_step(dataset.train().len())
                    .to_string(),
            ),
            ("batch-size", distill.batch_size.to_string()),
            ("epochs", distill.epochs.to_string()),
            ("seed", seed.to_string()),
            (
                "student-seed",
                model.student_seed.map(|s| s.to_string()).unwrap_or_default(),
            ),
            ("lr", distill.base_lr.to_string()),
            ("warmup-steps", distill.warmup_steps.to_string()),
            ("full-scale", args.full_scale.to_string()),
        ],
    )?;

    let labels: Vec<bool> = dataset.test().iter().map(|r| r.label).collect();
    let student_auc = auc(&graph.student_logits_eval(dataset.test())?, &labels)?;
    println!("checkpoint = {}", ckpt_path.display());
    println!("checkpoint_hash = {hash}");
    println!("student_auc = {student_auc}");
    if graph.teacher.is_some() {
        let teacher_auc = auc(&graph.teacher_logits_eval(dataset.test())?, &labels)?;
        println!("teacher_auc = {teacher_auc}");
    }
    println!("median_step_time_s = {}", outcome.median_step_time_s);
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let (graph, hash) = checkpoint::load(&args.checkpoint)?;
    // refuse datasets whose schema differs from the checkpoint's
    let dataset = read_jsonl(&args.data, Some(&graph.schema.hash()))?;
    let labels: Vec<bool> = dataset.test().iter().map(|r| r.label).collect();
    let student_auc = auc(&graph.student_logits_eval(dataset.test())?, &labels)?;
    println!("checkpoint_hash = {hash}");
    println!("student_auc = {student_auc}");
    let teacher_auc = if graph.teacher.is_some() {
        let t = auc(&graph.teacher_logits_eval(dataset.test())?, &labels)?;
        println!("teacher_auc = {t}");
        Some(t)
    } else {
        None
    };
    if let Some(out) = args.out {
        std::fs::create_dir_all(&out)?;
        let mut text = String::from("metric,value\n");
        writeln!(text, "student_auc,{student_auc}")?;
        if let Some(t) = teacher_auc {
            writeln!(text, "teacher_auc,{t}")?;
        }
        std::fs::write(out.join("eval.csv"), text)?;
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let methods: Vec<Method> = parse_list(
        &resolve(args.methods, file.get("methods")?, "baseline,pfd".to_string()),
        "method",
    )?;
    let task = Task::from_str(&resolve(args.task, file.get("task")?, "cvr".to_string()))?;
    let sharings: Vec<SharingMode> = parse_list(
        &resolve(
            args.sharings,
            file.get("sharings")?,
            "share_except_user_id".to_string(),
        ),
        "sharing",
    )?;
    let orders: Vec<TrainOrder> = parse_list(
        &resolve(args.train_orders, file.get("train-orders")?, "sync".to_string()),
        "train order",
    )?;
    let lambdas: Vec<f64> = parse_list(
        &resolve(args.lambda_grid, file.get("lambda-grid")?, "0.5".to_string()),
        "lambda",
    )?;
    let seeds: Vec<u64> = parse_list(
        &resolve(args.seeds, file.get("seeds")?, "1,2,3,4,5".to_string()),
        "seed",
    )?;

    let base = DistillConfig::default();
    let base_distill = DistillConfig {
        batch_size: resolve(args.batch_size, file.get("batch-size")?, base.batch_size),
        epochs: resolve(args.epochs, file.get("epochs")?, base.epochs),
        swap_step: args.swap_step.or(file.get("swap-step")?),
        base_lr: resolve(args.lr, file.get("lr")?, base.base_lr),
        warmup_steps: resolve(args.warmup_steps, file.get("warmup-steps")?, base.warmup_steps),
        ..base
    };

    let dataset = read_jsonl(&args.data, None)?;
    std::fs::create_dir_all(&args.out)?;
    let spec = ExperimentSpec {
        methods: methods.clone(),
        sharings: sharings.clone(),
        train_orders: orders.clone(),
        lambdas: lambdas.clone(),
        seeds: seeds.clone(),
        base_model: ModelConfig::new(Method::Baseline, task, sharings[0], seeds[0]),
        base_distill,
    };
    let rows = run_experiment_parallel(&dataset, &spec, args.workers.max(1))?;
    write_metrics_csv(&rows, &args.out.join("metrics.csv"))?;
    let table = render_table(&rows);
    std::fs::write(args.out.join("table.txt"), &table)?;
    write_effective_config(
        &args.out,
        &[
            (
                "methods",
                methods
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("task", task.to_string()),
            (
                "sharings",
                sharings
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "train-orders",
                orders.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(","),
            ),
            (
                "lambda-grid",
                lambdas.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
            ),
            (
                "seeds",
                seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("batch-size", spec.base_distill.batch_size.to_string()),
            ("epochs", spec.base_distill.epochs.to_string()),
            ("lr", spec.base_distill.base_lr.to_string()),
            ("warmup-steps", spec.base_distill.warmup_steps.to_string()),
        ],
    )?;
    print!("{table}");
    // sanity: the CSV parses back into the same rows
    let reread = read_metrics_csv(&args.out.join("metrics.csv"))?;
    if reread.len() != rows.len() {
        bail!("metrics.csv round-trip mismatch");
    }
    Ok(())
}

fn cmd_flops(args: FlopsArgs) -> Result<()> {
    let (input, hidden, output) = parse_dims(&args.dims)?;
    let report = flops_count(input, &hidden, output);
    println!("mapping_flops = {}", report.mapping_flops);
    println!("inner_product_flops = {}", report.inner_product_flops);
    if report.ratio.fract() == 0.0 {
        println!("ratio = {}", report.ratio as u64);
    } else {
        println!("ratio = {}", report.ratio);
    }
    if let Some(path) = args.json {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn cmd_serve_bench(args: ServeBenchArgs) -> Result<()> {
    if args.items == 0 || args.repeats == 0 {
        bail!("--items and --repeats must be positive");
    }
    let (input, hidden, output) = parse_dims(&args.dims)?;
    let report = latency_bench(input, &hidden, output, args.items, args.repeats);
    println!("mapping_time_s = {}", report.mapping_time_s);
    println!("inner_product_time_s = {}", report.inner_product_time_s);
    println!("ratio = {}", report.ratio);
    if let Some(path) = args.json {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}
