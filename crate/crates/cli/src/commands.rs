//! One function per verb. Each validates its inputs, calls into the
//! library, and writes a CSV table plus a JSON summary.

use std::path::{Path, PathBuf};
use std::time::Instant;

use modelslice::applications::{
    self, cascade_csv, cascade_from_models, error_set, inclusion_coefficient, predict_classes,
    LatencyPolicy, QueryStream, StageMetrics,
};
use modelslice::checkpoint;
use modelslice::config::{ExperimentConfig, DEFAULT_RATES};
use modelslice::cost::{self, CostReport};
use modelslice::data::{self, Dataset, Task};
use modelslice::incremental::{widen_model, ActivationCache, BatchToken, LayerWidening, WidenMode};
use modelslice::scheduler::SliceRateList;
use modelslice::trainer::{evaluate, Metrics, MetricsRow, Trainer};
use modelslice::{Error, Inputs, Model, ModelSpec, Result, SliceRate};
use serde::Serialize;

use crate::output::{append_csv, write_csv, write_json, write_text, OutDir};
use crate::{Command, DataArgs, RunArgs};

/// Experiment config stored next to each checkpoint.
pub const CONFIG_FILE: &str = "config.toml";
/// Seed offset for held-out evaluation sets.
pub const HELDOUT_SEED_OFFSET: u64 = 1000;

const METRICS_HEADER: &[&str] = &["epoch", "rate", "loss", "accuracy", "ppl", "wall_time"];

pub fn run(command: Command, out: OutDir) -> Result<()> {
    match command {
        Command::GenData { task, seed, size } => gen_data(task.into(), seed, size, &out),
        Command::Train {
            config,
            task,
            epochs,
            seed,
            data,
            resume,
            dry_run,
        } => train(
            TrainArgs {
                config,
                task: task.map(Into::into),
                epochs,
                seed,
                data,
                resume,
                dry_run,
            },
            &out,
        ),
        Command::Eval { run, data, rates } => eval(&run, &data, rates, &out),
        Command::Sweep {
            checkpoint,
            config,
            model,
            data,
            rates,
        } => sweep(checkpoint, config, model, &data, rates, &out),
        Command::Cost { model, spec, rates } => cost_cmd(model, spec, rates, &out),
        Command::Simulate {
            trace,
            latency,
            unit_time,
            rates,
            wall_clock,
        } => simulate(trace, latency, unit_time, rates, wall_clock, &out),
        Command::Cascade {
            run,
            data,
            rates,
            independent,
        } => cascade(&run, &data, rates, independent, &out),
        Command::Widen {
            run,
            data,
            from,
            to,
            mode,
            batch,
        } => widen(&run, &data, from, to, mode.into(), batch, &out),
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn rate(r: f64) -> Result<SliceRate> {
    SliceRate::new(r)
}

/// Architecture by name: `vgg13` or a task preset.
fn named_spec(name: &str) -> Result<ModelSpec> {
    if name.eq_ignore_ascii_case("vgg13") {
        return Ok(ModelSpec::vgg13(8, 10));
    }
    let task: Task = name
        .parse()
        .map_err(|_| Error::Config(format!("unknown model '{name}' (vgg13, spirals, tinyimages, charlm)")))?;
    ExperimentConfig::preset(task).model.build(task)
}

fn load_run(run: &RunArgs) -> Result<(Model, ExperimentConfig)> {
    let cfg_path = run
        .config
        .clone()
        .unwrap_or_else(|| run.checkpoint.join(CONFIG_FILE));
    let (model, _) = checkpoint::load(&run.checkpoint)?;
    if !cfg_path.exists() {
        return Err(Error::Config(format!(
            "{} not found; pass --config",
            cfg_path.display()
        )));
    }
    let cfg = ExperimentConfig::load(&cfg_path)?;
    Ok((model, cfg))
}

fn dataset(cfg: &ExperimentConfig, args: &DataArgs) -> Result<(Dataset, String)> {
    let (task, size, steps) = (cfg.task, cfg.data.size, cfg.data.steps);
    Ok(match (&args.data, args.heldout) {
        (Some(path), _) => (data::load(task, path, steps)?, display(path)),
        (None, true) => {
            let seed = cfg.seed + HELDOUT_SEED_OFFSET;
            (
                data::generate(task, seed, size, steps)?,
                format!("{task} generated, seed {seed} (held out)"),
            )
        }
        (None, false) => (
            data::generate(task, cfg.seed, size, steps)?,
            format!("{task} generated, seed {} (training set)", cfg.seed),
        ),
    })
}

fn rate_list(rates: Option<Vec<f64>>, fallback: &[f64]) -> Result<Vec<f64>> {
    let mut rates = rates.unwrap_or_else(|| fallback.to_vec());
    if rates.is_empty() {
        return Err(Error::Config("rate list is empty".into()));
    }
    for &r in &rates {
        rate(r)?;
    }
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    Ok(rates)
}

// ---------------------------------------------------------------- gen-data

#[derive(Serialize)]
struct GenDataReport {
    command: &'static str,
    task: Task,
    seed: u64,
    size: usize,
    path: String,
}

fn gen_data(task: Task, seed: u64, size: Option<usize>, out: &OutDir) -> Result<()> {
    let size = size.unwrap_or(ExperimentConfig::preset(task).data.size);
    if size == 0 {
        return Err(Error::Config("size must be positive".into()));
    }
    let dir = out.create(None)?;
    let path = data::gen_data(task, seed, size, &dir)?;
    println!("wrote {}", path.display());
    write_json(
        &dir.join("gen-data.json"),
        &GenDataReport {
            command: "gen-data",
            task,
            seed,
            size,
            path: display(&path),
        },
    )
}

// ------------------------------------------------------------------- train

pub struct TrainArgs {
    config: Option<PathBuf>,
    task: Option<Task>,
    epochs: Option<usize>,
    seed: Option<u64>,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
    dry_run: bool,
}

#[derive(Serialize)]
struct TrainReport {
    command: &'static str,
    task: Task,
    seed: u64,
    epochs: usize,
    steps: u64,
    wall_time: f64,
    resumed_from: Option<String>,
    checkpoint: String,
    metrics_csv: String,
    final_metrics: Vec<MetricsRow>,
}

fn train(args: TrainArgs, out: &OutDir) -> Result<()> {
    let mut cfg = match (&args.config, args.task, &args.resume) {
        (Some(path), _, _) => ExperimentConfig::load(path)?,
        (None, Some(task), _) => ExperimentConfig::preset(task),
        (None, None, Some(dir)) => ExperimentConfig::load(&dir.join(CONFIG_FILE))?,
        (None, None, None) => {
            return Err(Error::Config(
                "train needs --config, --task or --resume".into(),
            ))
        }
    };
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if args.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let spec = cfg.model.build(cfg.task)?;
    let dir = out.create(Some(&cfg.out_dir))?;
    let data = match &args.data {
        Some(path) => data::load(cfg.task, path, cfg.data.steps)?,
        None => data::generate(cfg.task, cfg.seed, cfg.data.size, cfg.data.steps)?,
    };
    let mut model = Model::new(spec.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(&model, cfg.train_config())?;
    if let Some(resume) = &args.resume {
        let (saved, state) = checkpoint::load(resume)?;
        if saved.spec() != &spec {
            return Err(Error::Config(format!(
                "checkpoint {} holds a different architecture than the config",
                resume.display()
            )));
        }
        model = saved;
        if let Some(state) = state {
            trainer.restore(state)?;
        }
    }
    let ckpt = dir.join("checkpoint");
    let metrics = dir.join("metrics.csv");
    if args.resume.is_none() && metrics.exists() {
        std::fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    cfg.save(&dir.join(CONFIG_FILE))?;
    let start = Instant::now();
    let epochs = cfg.train.epochs;
    trainer.fit(&mut model, &data, &data, |t, m, rows| {
        append_csv(&metrics, rows, METRICS_HEADER)?;
        checkpoint::save(&ckpt, m, Some(&t.training_state()))?;
        cfg.save(&ckpt.join(CONFIG_FILE))?;
        let summary: Vec<String> = rows
            .iter()
            .map(|r| match cfg.task {
                Task::CharLm => format!("r={} ppl={:.4}", r.rate, r.ppl),
                _ => format!("r={} acc={:.4}", r.rate, r.accuracy),
            })
            .collect();
        eprintln!("epoch {}/{epochs}: {}", t.epoch(), summary.join(" "));
        Ok(())
    })?;
    if !ckpt.join(checkpoint::MANIFEST).exists() {
        checkpoint::save(&ckpt, &model, Some(&trainer.training_state()))?;
        cfg.save(&ckpt.join(CONFIG_FILE))?;
    }
    let wall_time = start.elapsed().as_secs_f64();
    let final_metrics = trainer.evaluate_rates(&model, &data, wall_time)?;
    println!("checkpoint: {}", ckpt.display());
    write_json(
        &dir.join("train.json"),
        &TrainReport {
            command: "train",
            task: cfg.task,
            seed: cfg.seed,
            epochs,
            steps: trainer.steps(),
            wall_time,
            resumed_from: args.resume.as_deref().map(display),
            checkpoint: display(&ckpt),
            metrics_csv: display(&metrics),
            final_metrics,
        },
    )
}

// -------------------------------------------------------------------- eval

#[derive(Serialize)]
struct EvalReport {
    command: &'static str,
    checkpoint: String,
    task: Task,
    data: String,
    rows: Vec<Metrics>,
}

fn eval(run: &RunArgs, args: &DataArgs, rates: Option<Vec<f64>>, out: &OutDir) -> Result<()> {
    let (model, cfg) = load_run(run)?;
    let (data, source) = dataset(&cfg, args)?;
    let rates = rate_list(rates, &cfg.train.rates)?;
    let mut rows = Vec::new();
    for &r in rates.iter().rev() {
        let m = evaluate(&model, rate(r)?, &data)?;
        println!(
            "r={r}: loss={:.4} accuracy={:.4} ppl={:.4}",
            m.loss, m.accuracy, m.perplexity
        );
        rows.push(m);
    }
    let dir = out.create(None)?;
    write_csv(
        &dir.join("eval.csv"),
        &rows,
        &["rate", "loss", "accuracy", "ppl", "count"],
    )?;
    write_json(
        &dir.join("eval.json"),
        &EvalReport {
            command: "eval",
            checkpoint: display(&run.checkpoint),
            task: cfg.task,
            data: source,
            rows,
        },
    )
}

// ------------------------------------------------------------------- sweep

#[derive(Serialize)]
struct SweepRow {
    rate: f64,
    effective_rate: f64,
    params: u64,
    flops: u64,
    params_ratio: f64,
    flops_ratio: f64,
    metric: Option<&'static str>,
    value: Option<f64>,
    note: String,
}

#[derive(Serialize)]
struct SweepReport {
    command: &'static str,
    source: String,
    data: Option<String>,
    rows: Vec<SweepRow>,
}

fn sweep(
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
    model_name: Option<String>,
    args: &DataArgs,
    rates: Option<Vec<f64>>,
    out: &OutDir,
) -> Result<()> {
    let (spec, scored, source) = match (checkpoint, model_name) {
        (Some(ckpt), _) => {
            let (model, cfg) = load_run(&RunArgs {
                checkpoint: ckpt.clone(),
                config,
            })?;
            let (data, data_source) = dataset(&cfg, args)?;
            (
                model.spec().clone(),
                Some((model, cfg, data, data_source)),
                display(&ckpt),
            )
        }
        (None, Some(name)) => (named_spec(&name)?, None, name),
        (None, None) => return Err(Error::Config("sweep needs --checkpoint or --model".into())),
    };
    let fallback = scored
        .as_ref()
        .map_or(DEFAULT_RATES.to_vec(), |s| s.1.train.rates.clone());
    let rates = rate_list(rates, &fallback)?;
    let full = rate(1.0)?;
    let (full_params, full_flops) = (cost::count_params(&spec, full)?, cost::count_flops(&spec, full)?);
    let mut rows = Vec::new();
    for &r in &rates {
        let sr = rate(r)?;
        let effective_rate = spec.effective_rate(sr)?;
        let params = cost::count_params(&spec, sr)?;
        let flops = cost::count_flops(&spec, sr)?;
        let (metric, value) = match &scored {
            Some((model, _, data, _)) => {
                let m = evaluate(model, sr, data)?;
                match data {
                    Dataset::Corpus(_) => (Some("ppl"), Some(m.perplexity)),
                    Dataset::Labeled(_) => (Some("accuracy"), Some(m.accuracy)),
                }
            }
            None => (None, None),
        };
        let note = if effective_rate < r {
            format!("off-boundary rate rounded down to {effective_rate}")
        } else {
            String::new()
        };
        if !note.is_empty() {
            eprintln!("warning: r={r}: {note}");
        }
        rows.push(SweepRow {
            rate: r,
            effective_rate,
            params,
            flops,
            params_ratio: params as f64 / full_params as f64,
            flops_ratio: flops as f64 / full_flops as f64,
            metric,
            value,
            note,
        });
    }
    for row in &rows {
        println!(
            "r={}: flops={:.2}% params={} {}",
            row.rate,
            100.0 * row.flops_ratio,
            row.params,
            row.value
                .map(|v| format!("{}={v:.4}", row.metric.unwrap_or("")))
                .unwrap_or_default()
        );
    }
    let dir = out.create(None)?;
    write_csv(
        &dir.join("sweep.csv"),
        &rows,
        &[
            "rate",
            "effective_rate",
            "params",
            "flops",
            "params_ratio",
            "flops_ratio",
            "metric",
            "value",
            "note",
        ],
    )?;
    write_json(
        &dir.join("sweep.json"),
        &SweepReport {
            command: "sweep",
            source,
            data: scored.map(|s| s.3),
            rows,
        },
    )
}

// -------------------------------------------------------------------- cost

#[derive(Serialize)]
struct CostSummaryRow {
    rate: f64,
    params: u64,
    flops: u64,
    params_ratio: f64,
    flops_ratio: f64,
}

#[derive(Serialize)]
struct CostJson {
    command: &'static str,
    model: String,
    full_params: u64,
    full_flops: u64,
    summary: Vec<CostSummaryRow>,
    reports: Vec<CostReport>,
}

fn spec_from_file(path: &Path) -> Result<ModelSpec> {
    if path.extension().is_some_and(|e| e == "toml") {
        let cfg = ExperimentConfig::load(path)?;
        return cfg.model.build(cfg.task);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cost_cmd(
    model: Option<String>,
    spec_path: Option<PathBuf>,
    rates: Option<Vec<f64>>,
    out: &OutDir,
) -> Result<()> {
    let (spec, name) = match (model, spec_path) {
        (Some(name), _) => (named_spec(&name)?, name),
        (None, Some(path)) => (spec_from_file(&path)?, display(&path)),
        (None, None) => return Err(Error::Config("cost needs --model or --spec".into())),
    };
    let rates = rate_list(rates, &DEFAULT_RATES)?;
    let dir = out.create(None)?;
    let mut reports = Vec::new();
    for &r in &rates {
        let report = cost::cost_report(&spec, rate(r)?)?;
        write_text(&dir.join(format!("cost_{r}.csv")), &report.to_csv()?)?;
        println!(
            "r={r}: params={} ({:.2}%) flops={} ({:.2}%)",
            report.total_params,
            100.0 * report.params_ratio,
            report.total_flops,
            100.0 * report.flops_ratio
        );
        reports.push(report);
    }
    let summary: Vec<CostSummaryRow> = reports
        .iter()
        .map(|r| CostSummaryRow {
            rate: r.rate,
            params: r.total_params,
            flops: r.total_flops,
            params_ratio: r.params_ratio,
            flops_ratio: r.flops_ratio,
        })
        .collect();
    write_csv(
        &dir.join("cost_summary.csv"),
        &summary,
        &["rate", "params", "flops", "params_ratio", "flops_ratio"],
    )?;
    let (full_params, full_flops) = reports
        .first()
        .map_or((0, 0), |r| (r.full_params, r.full_flops));
    write_json(
        &dir.join("cost.json"),
        &CostJson {
            command: "cost",
            model: name,
            full_params,
            full_flops,
            summary,
            reports,
        },
    )
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct RateUsage {
    rate: f64,
    batches: usize,
    queries: usize,
}

#[derive(Serialize)]
struct SimulateReport {
    command: &'static str,
    trace: String,
    processing: &'static str,
    latency: f64,
    unit_time: f64,
    interval: f64,
    rates: Vec<f64>,
    summary: applications::SimulationSummary,
    rate_usage: Vec<RateUsage>,
}

/// Measured seconds for a forward pass of `n` examples at rate `r`.
fn timed_forward(model: &Model, data: &Dataset, n: usize, r: f64) -> Result<f64> {
    let indices: Vec<usize> = (0..n).map(|i| i % data.len()).collect();
    let batch = data.batch(&indices)?;
    let start = Instant::now();
    model.predict(&batch.inputs, rate(r)?)?;
    Ok(start.elapsed().as_secs_f64())
}

fn simulate(
    trace: Option<PathBuf>,
    latency: f64,
    unit_time: f64,
    rates: Option<Vec<f64>>,
    wall_clock: Option<PathBuf>,
    out: &OutDir,
) -> Result<()> {
    let (stream, trace_name) = match &trace {
        Some(path) => (QueryStream::from_trace(path)?, display(path)),
        None => (QueryStream::bundled_burst(), "bundled burst16_trace.csv".into()),
    };
    let list = SliceRateList::new(rate_list(rates, &DEFAULT_RATES)?)?;
    let policy = LatencyPolicy::new(latency, unit_time, list)?;
    let (sim, processing) = match &wall_clock {
        None => (applications::simulate_workload(&stream, &policy), "modeled"),
        Some(ckpt) => {
            let (model, cfg) = load_run(&RunArgs {
                checkpoint: ckpt.clone(),
                config: None,
            })?;
            let data = data::generate(cfg.task, cfg.seed, cfg.data.size, cfg.data.steps)?;
            let mut failure = None;
            let sim = applications::simulate_workload_with(&stream, &policy, |n, r| {
                timed_forward(&model, &data, n, r).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    0.0
                })
            });
            if let Some(e) = failure {
                return Err(e);
            }
            (sim, "wall-clock")
        }
    };
    let mut rate_usage: Vec<RateUsage> = Vec::new();
    for e in &sim.events {
        match rate_usage.iter_mut().find(|u| u.rate == e.rate) {
            Some(u) => {
                u.batches += 1;
                u.queries += e.n;
            }
            None => rate_usage.push(RateUsage {
                rate: e.rate,
                batches: 1,
                queries: e.n,
            }),
        }
    }
    rate_usage.sort_by(|a, b| b.rate.total_cmp(&a.rate));
    let s = &sim.summary;
    println!(
        "{} queries in {} batches; max latency {:.4}s (limit {latency}s); {} violations",
        s.queries, s.batches, s.max_latency, s.violations
    );
    for u in &rate_usage {
        println!("  r={}: {} batches, {} queries", u.rate, u.batches, u.queries);
    }
    let dir = out.create(None)?;
    write_text(&dir.join("events.csv"), &sim.events_csv()?)?;
    write_json(
        &dir.join("simulate.json"),
        &SimulateReport {
            command: "simulate",
            trace: trace_name,
            processing,
            latency,
            unit_time,
            interval: policy.interval(),
            rates: policy.rates.rates().to_vec(),
            summary: sim.summary.clone(),
            rate_usage,
        },
    )
}

// ----------------------------------------------------------------- cascade

#[derive(Serialize)]
struct InclusionPair {
    small: usize,
    large: usize,
    coefficient: f64,
}

#[derive(Serialize)]
struct Pipeline {
    stages: Vec<StageMetrics>,
    inclusion: Vec<InclusionPair>,
    mean_inclusion: f64,
}

#[derive(Serialize)]
struct CascadeReport {
    command: &'static str,
    checkpoint: String,
    data: String,
    sliced: Pipeline,
    independent: Option<Pipeline>,
}

fn pipeline(stages: &[(&Model, SliceRate)], data: &Dataset) -> Result<Pipeline> {
    let metrics = cascade_from_models(stages, data)?;
    let labels = data.labels().expect("checked by cascade_from_models");
    let errors = stages
        .iter()
        .map(|(m, r)| Ok(error_set(&predict_classes(m, *r, data)?, labels)))
        .collect::<Result<Vec<_>>>()?;
    let mut inclusion = Vec::new();
    for i in 0..errors.len() {
        for j in i + 1..errors.len() {
            inclusion.push(InclusionPair {
                small: i + 1,
                large: j + 1,
                coefficient: inclusion_coefficient(&errors[i], &errors[j]),
            });
        }
    }
    let mean_inclusion = if inclusion.is_empty() {
        1.0
    } else {
        inclusion.iter().map(|p| p.coefficient).sum::<f64>() / inclusion.len() as f64
    };
    Ok(Pipeline {
        stages: metrics,
        inclusion,
        mean_inclusion,
    })
}

fn print_pipeline(label: &str, p: &Pipeline) {
    println!("{label}:");
    for s in &p.stages {
        println!(
            "  stage {} r={}: precision={:.4} aggregate_recall={:.4} survivors={}",
            s.stage, s.rate, s.precision, s.aggregate_recall, s.survivors
        );
    }
    println!("  mean pairwise inclusion {:.4}", p.mean_inclusion);
}

fn cascade(
    run: &RunArgs,
    args: &DataArgs,
    rates: Option<Vec<f64>>,
    independent: Option<Vec<PathBuf>>,
    out: &OutDir,
) -> Result<()> {
    let (model, cfg) = load_run(run)?;
    let (data, source) = dataset(&cfg, args)?;
    let stage_rates = match rates {
        Some(r) => {
            for &x in &r {
                rate(x)?;
            }
            r
        }
        None => cfg.train.rates.clone(),
    };
    let stages = stage_rates
        .iter()
        .map(|&r| Ok((&model, rate(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let sliced = pipeline(&stages, &data)?;
    print_pipeline("sliced subnets", &sliced);
    let dir = out.create(None)?;
    write_text(&dir.join("cascade.csv"), &cascade_csv(&sliced.stages)?)?;
    let independent = match independent {
        None => None,
        Some(paths) => {
            if paths.len() != stage_rates.len() {
                return Err(Error::Config(format!(
                    "{} independent checkpoints for {} stages",
                    paths.len(),
                    stage_rates.len()
                )));
            }
            let models = paths
                .iter()
                .map(|p| checkpoint::load(p).map(|(m, _)| m))
                .collect::<Result<Vec<_>>>()?;
            let full = rate(1.0)?;
            let stages: Vec<(&Model, SliceRate)> = models.iter().map(|m| (m, full)).collect();
            let p = pipeline(&stages, &data)?;
            print_pipeline("independent models", &p);
            write_text(&dir.join("cascade_independent.csv"), &cascade_csv(&p.stages)?)?;
            Some(p)
        }
    };
    write_json(
        &dir.join("cascade.json"),
        &CascadeReport {
            command: "cascade",
            checkpoint: display(&run.checkpoint),
            data: source,
            sliced,
            independent,
        },
    )
}

// ------------------------------------------------------------------- widen

#[derive(Serialize)]
struct WidenReport {
    command: &'static str,
    checkpoint: String,
    data: String,
    from: f64,
    to: f64,
    mode: WidenMode,
    batch: usize,
    max_deviation: f64,
    agreement: f64,
    flops: u64,
    full_flops: u64,
    flops_ratio: f64,
    max_error_bound: f64,
    layers: Vec<LayerWidening>,
}

fn widen(
    run: &RunArgs,
    args: &DataArgs,
    from: f64,
    to: f64,
    mode: WidenMode,
    batch: usize,
    out: &OutDir,
) -> Result<()> {
    let (model, cfg) = load_run(run)?;
    let (data, source) = dataset(&cfg, args)?;
    if !matches!(data, Dataset::Labeled(_)) {
        return Err(Error::Usage(
            "widening needs feature or image inputs; token models are not supported".into(),
        ));
    }
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let n = batch.min(data.len());
    let indices: Vec<usize> = (0..n).collect();
    let x = match data.batch(&indices)?.inputs {
        Inputs::Features(t) => t,
        Inputs::Tokens { .. } => unreachable!("labeled data has feature inputs"),
    };
    let (r_a, r_b) = (rate(from)?, rate(to)?);
    let token = BatchToken(0);
    let cache = ActivationCache::build(&model, &x, r_a, token)?;
    let widened = widen_model(&model, &cache, token, &x, r_b, mode)?;
    let direct = model.predict(&Inputs::Features(x), r_b)?;
    let max_deviation = widened
        .logits
        .data()
        .iter()
        .zip(direct.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let agree = widened
        .logits
        .argmax_rows()?
        .iter()
        .zip(direct.argmax_rows()?)
        .filter(|(a, b)| **a == *b)
        .count();
    let (flops, full_flops) = (widened.flops(), widened.full_flops());
    let report = WidenReport {
        command: "widen",
        checkpoint: display(&run.checkpoint),
        data: source,
        from,
        to,
        mode,
        batch: n,
        max_deviation,
        agreement: agree as f64 / n as f64,
        flops,
        full_flops,
        flops_ratio: if full_flops == 0 {
            0.0
        } else {
            flops as f64 / full_flops as f64
        },
        max_error_bound: widened.max_error_bound(),
        layers: widened.layers,
    };
    println!(
        "{from} -> {to} ({mode:?}): max deviation {:.3e}, agreement {:.4}, flops {} of {} ({:.2}%)",
        report.max_deviation,
        report.agreement,
        flops,
        full_flops,
        100.0 * report.flops_ratio
    );
    let dir = out.create(None)?;
    write_csv(
        &dir.join("widen.csv"),
        &report.layers,
        &["layer", "flops", "full_flops", "error_bound"],
    )?;
    write_json(&dir.join("widen.json"), &report)
}
