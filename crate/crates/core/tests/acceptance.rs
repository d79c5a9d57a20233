//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure or exceeded time budget.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{random, rate, FD_TOLERANCE};
use modelslice::applications::{
    cascade_evaluate, cascade_from_models, error_set, inclusion_coefficient, predict_classes,
    simulate_workload, LatencyPolicy, QueryStream,
};
use modelslice::config::ExperimentConfig;
use modelslice::cost::{cost_report, count_flops, count_params, SliceRole};
use modelslice::data::{self, shuffled_indices, Dataset, Task};
use modelslice::incremental::{
    apply_block, partition_weight, widen_exact, widen_model, ActivationCache, BatchToken,
    BlockKind, WidenMode,
};
use modelslice::model::InputSpec;
use modelslice::scheduler::{RateDistribution, SchedulingScheme, SliceRateList};
use modelslice::trainer::{evaluate, Trainer};
use modelslice::{GroupSpec, Inputs, LayerSpec, Model, ModelSpec, SliceRate, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

// ---------------------------------------------------------------- cost

const VGG_WIDTHS: [f64; 6] = [0.375, 0.5, 0.625, 0.75, 0.875, 1.0];
const VGG_PARAMS_M: [f64; 6] = [1.33, 2.36, 3.68, 5.30, 7.21, 9.42];
const VGG_FLOPS_M: [f64; 6] = [144.6, 256.5, 400.2, 575.8, 783.2, 1022.5];

fn cost_fixtures() -> Outcome {
    let spec = ModelSpec::vgg13(8, 10);
    let params = count_params(&spec, rate(1.0)).map_err(|e| e.to_string())? as f64;
    let flops = count_flops(&spec, rate(1.0)).map_err(|e| e.to_string())? as f64;
    ensure(rel(params, 9.42e6) <= 0.02, || format!("params {params}"))?;
    ensure(rel(flops, 1022.5e6) <= 0.01, || format!("flops {flops}"))?;
    let mut worst = (0.0f64, 0.0f64);
    for ((&r, &p_ref), &f_ref) in VGG_WIDTHS.iter().zip(&VGG_PARAMS_M).zip(&VGG_FLOPS_M) {
        let p = count_params(&spec, rate(r)).map_err(|e| e.to_string())? as f64;
        let f = count_flops(&spec, rate(r)).map_err(|e| e.to_string())? as f64;
        worst = (worst.0.max(rel(p, p_ref * 1e6)), worst.1.max(rel(f, f_ref * 1e6)));
        ensure(rel(p, p_ref * 1e6) <= 0.03, || format!("params at {r}: {p}"))?;
        ensure(rel(f, f_ref * 1e6) <= 0.02, || format!("flops at {r}: {f}"))?;
    }
    Ok(format!(
        "params {:.3}M, flops {:.1}M, worst table deviation {:.2}%/{:.2}%",
        params / 1e6,
        flops / 1e6,
        worst.0 * 100.0,
        worst.1 * 100.0
    ))
}

/// Model inputs and class outputs are never narrowed, so the law is checked
/// on every layer whose axes are all sliced, individually and in total.
fn quadratic_law() -> Outcome {
    let g = 16;
    let dense = |inputs, outputs, in_groups, out_groups| LayerSpec::Dense {
        inputs, outputs, in_groups, out_groups, rescale: false,
    };
    let conv = |in_channels, out_channels, in_groups, out_groups| LayerSpec::Conv2d {
        in_channels, out_channels, kernel: 3, stride: 1, padding: 1, in_groups, out_groups,
    };
    let mlp = ModelSpec {
        input: InputSpec::Features { dim: 32 },
        layers: vec![dense(32, 64, 1, g), dense(64, 64, g, g), dense(64, 48, g, g), dense(48, 10, g, 1)],
    };
    let cnn = ModelSpec {
        input: InputSpec::Image { channels: 3, height: 8, width: 8 },
        layers: vec![
            conv(3, 32, 1, g),
            conv(32, 64, g, g),
            conv(64, 64, g, g),
            LayerSpec::GlobalAvgPool,
            dense(64, 10, g, 1),
        ],
    };
    let mut hidden_layers = 0;
    for spec in [&mlp, &cnn] {
        let hidden_flops = |r: f64| -> Result<(u64, Vec<u64>), String> {
            let report = cost_report(spec, rate(r)).map_err(|e| e.to_string())?;
            let rows: Vec<u64> = report.rows.iter().filter(|row| row.role == SliceRole::Hidden).map(|row| row.flops).collect();
            Ok((rows.iter().sum(), rows))
        };
        let (full, full_rows) = hidden_flops(1.0)?;
        hidden_layers += full_rows.len();
        for k in 1..=16u64 {
            let r = k as f64 / 16.0;
            let (f, rows) = hidden_flops(r)?;
            // exact integer form of flops(r) / flops(1) = r^2
            ensure(f * 256 == k * k * full, || format!("rate {r}: {f} of {full}"))?;
            for (a, b) in rows.iter().zip(&full_rows) {
                ensure(a * 256 == k * k * b, || format!("rate {r}: layer {a} of {b}"))?;
            }
        }
    }
    let ratio = |r: f64| {
        let report = cost_report(&mlp, rate(r)).unwrap();
        let rows = report.rows.iter().filter(|row| row.role == SliceRole::Hidden);
        rows.clone().map(|row| row.flops).sum::<u64>() as f64 / rows.map(|row| row.flops as f64 / row.flops_ratio).sum::<f64>()
    };
    Ok(format!(
        "{hidden_layers} fully sliced layers at 16 rates; 0.5 -> {:.2}%, 0.375 -> {:.2}%, 0.25 -> {:.2}%",
        ratio(0.5) * 100.0,
        ratio(0.375) * 100.0,
        ratio(0.25) * 100.0
    ))
}

// ------------------------------------------------------------ gradients

fn gradient_suite() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut kinds = BTreeSet::new();
    for r in [0.25, 0.5, 1.0] {
        for mut case in common::layer_cases(rate(r), 11) {
            kinds.insert(case.name);
            let g = case.gradients();
            worst = worst.max(g.max_rel_error);
            checked += g.checked;
            ensure(g.max_rel_error <= FD_TOLERANCE, || {
                format!("{} at {r}: relative error {:e}", case.name, g.max_rel_error)
            })?;
            ensure(case.outside_slice_is_zero(), || format!("{} at {r}: gradient leaks outside the slice", case.name))?;
            if r < 1.0 {
                ensure(case.survives_poisoning(), || format!("{} at {r}: poisoned weights reached the output", case.name))?;
            }
        }
    }
    Ok(format!("{} layer variants, {checked} elements, max rel. error {worst:.1e}", kinds.len()))
}

// ------------------------------------------------------------ widening

fn block_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let pick_pair = |rng: &mut ChaCha8Rng, spec_in: &GroupSpec, spec_out: &GroupSpec| loop {
        let rates = spec_out.rates();
        let a = rng.random_range(0..rates.len());
        let b = rng.random_range(0..rates.len());
        if a < b {
            let (ra, rb) = (rate(rates[a]), rate(rates[b]));
            let distinct = spec_in.boundary(ra) != spec_in.boundary(rb) || spec_out.boundary(ra) != spec_out.boundary(rb);
            if distinct {
                return (ra, rb);
            }
        }
    };
    for (count, conv) in [(100, false), (20, true)] {
        for i in 0..count {
            let groups = rng.random_range(2..=6);
            let spec_in = GroupSpec::new(groups * rng.random_range(1..=4), groups).unwrap();
            let spec_out = GroupSpec::new(groups * rng.random_range(1..=4), groups).unwrap();
            let (ra, rb) = pick_pair(&mut rng, &spec_in, &spec_out);
            let seed = rng.random();
            let (kind, w, x) = if conv {
                let kind = BlockKind::Conv { stride: rng.random_range(1..=2), padding: rng.random_range(0..=1) };
                let w = random(&[spec_out.total(), spec_in.total(), 3, 3], seed);
                let x = random(&[2, spec_in.boundary(rb), 7, 7], seed ^ 1);
                (kind, w, x)
            } else {
                let w = random(&[spec_out.total(), spec_in.total()], seed);
                let x = random(&[3, spec_in.boundary(rb)], seed ^ 1);
                (BlockKind::Dense, w, x)
            };
            let p = partition_weight("l", &w, kind, &spec_in, &spec_out, ra, rb).map_err(|e| e.to_string())?;
            let prefix = w
                .narrow(0, 0..spec_out.boundary(rb)).unwrap()
                .narrow(1, 0..spec_in.boundary(rb)).unwrap();
            ensure(p.reassemble().unwrap() == prefix, || format!("instance {i}: reassembly differs"))?;
            let (ia, ib) = p.inputs;
            let x_a = x.narrow(1, 0..ia).unwrap();
            let x_b = x.narrow(1, ia..ib).unwrap();
            let y_a = apply_block(&p.base, &x_a, kind).unwrap();
            let (updated, added) = widen_exact(&p, &y_a, &x_a, &x_b).map_err(|e| e.to_string())?;
            let direct = apply_block(&prefix, &x, kind).unwrap();
            let widened = Tensor::concat(&[&updated, &added], 1).unwrap();
            let d = widened.max_abs_diff(&direct);
            worst = worst.max(d);
            ensure(d <= 1e-12, || format!("instance {i} (conv: {conv}): deviation {d:e}"))?;
        }
    }
    let model = Model::new(ModelSpec::mlp(4, &[16, 16, 16], 3, 8), 9).map_err(|e| e.to_string())?;
    let x = random(&[16, 4], 10);
    let mut model_worst = 0.0f64;
    for (a, b) in [(0.125, 0.5), (0.25, 1.0), (0.5, 0.75), (0.125, 1.0)] {
        let cache = ActivationCache::build(&model, &x, rate(a), BatchToken(1)).map_err(|e| e.to_string())?;
        let w = widen_model(&model, &cache, BatchToken(1), &x, rate(b), WidenMode::Exact).map_err(|e| e.to_string())?;
        let direct = model.predict(&Inputs::Features(x.clone()), rate(b)).unwrap();
        let d = w.logits.max_abs_diff(&direct);
        model_worst = model_worst.max(d);
        ensure(d <= 1e-10, || format!("model widening {a} -> {b}: deviation {d:e}"))?;
    }
    Ok(format!("120 blocks max deviation {worst:.1e}; dense+groupnorm stack {model_worst:.1e}"))
}

// ------------------------------------------------------------ scheduler

fn scheduler_statistics() -> Outcome {
    let list = SliceRateList::new(vec![0.25, 0.5, 0.75, 1.0]).unwrap();
    let scheme = SchedulingScheme::from_distribution(&list, &RateDistribution::Uniform { low: 0.0, high: 1.0 }, 1)
        .map_err(|e| e.to_string())?;
    let expected = [0.375, 0.25, 0.25, 0.125];
    let probs = match scheme.kind() {
        modelslice::scheduler::SchemeKind::Random { probabilities, .. } => probabilities.clone(),
        other => return Err(format!("unexpected scheme {other:?}")),
    };
    ensure(probs.iter().zip(&expected).all(|(p, e)| (p - e).abs() <= 1e-12), || format!("probabilities {probs:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let r = scheme.draw_one(&mut rng).unwrap();
        counts[list.rates().iter().position(|x| *x == r).unwrap()] += 1;
    }
    let freqs: Vec<f64> = counts.iter().map(|c| *c as f64 / draws as f64).collect();
    let worst = freqs.iter().zip(&expected).map(|(f, e)| (f - e).abs()).fold(0.0, f64::max);
    ensure(worst <= 0.01, || format!("frequencies {freqs:?}"))?;
    let min_max = SchedulingScheme::preset("r-min-max", &list).unwrap();
    for _ in 0..10_000 {
        let picked: Vec<f64> = min_max.next_slice_rate_batch(&mut rng).iter().map(|r| r.get()).collect();
        ensure(picked.contains(&0.25) && picked.contains(&1.0), || format!("r-min-max drew {picked:?}"))?;
    }
    Ok(format!("frequencies {freqs:.4?}, max deviation {worst:.4}"))
}

// ------------------------------------------------------------- training

fn train_preset(cfg: &ExperimentConfig, eval: &Dataset) -> Result<(Model, Dataset), String> {
    let spec = cfg.model.build(cfg.task).map_err(|e| e.to_string())?;
    let train = data::generate(cfg.task, cfg.seed, cfg.data.size, cfg.data.steps).map_err(|e| e.to_string())?;
    let mut model = Model::new(spec, cfg.seed).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(&model, cfg.train_config()).map_err(|e| e.to_string())?;
    trainer.fit(&mut model, &train, eval, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
    Ok((model, train))
}

fn probe_corpus(cfg: &ExperimentConfig) -> Dataset {
    data::generate(Task::CharLm, cfg.seed, 4 * cfg.data.steps + 1, cfg.data.steps).unwrap()
}

fn training_sanity() -> Outcome {
    let sliced_cfg = ExperimentConfig::preset(Task::Spirals);
    let probe = data::generate(Task::Spirals, sliced_cfg.seed, 8, 1).unwrap();
    let (sliced, train) = train_preset(&sliced_cfg, &probe)?;
    let mut accs = Vec::new();
    for &r in &sliced_cfg.train.rates {
        let m = evaluate(&sliced, rate(r), &train).map_err(|e| e.to_string())?;
        accs.push(m.accuracy);
        ensure(m.accuracy >= 0.9, || format!("subnet {r} reaches only {:.3}", m.accuracy))?;
    }
    let mut fixed_cfg = sliced_cfg.clone();
    fixed_cfg.train.scheme = "static".into();
    fixed_cfg.train.rates = vec![1.0];
    let (fixed, _) = train_preset(&fixed_cfg, &probe)?;
    let fixed_acc = evaluate(&fixed, rate(1.0), &train).map_err(|e| e.to_string())?.accuracy;
    let full_acc = *accs.last().unwrap();
    ensure(full_acc >= fixed_acc - 0.02, || format!("full subnet {full_acc:.3} vs fixed model {fixed_acc:.3}"))?;

    let lm_cfg = ExperimentConfig::preset(Task::CharLm);
    // the seed picks the repeating pattern, so the corpus is scored as trained
    let (lm, corpus) = train_preset(&lm_cfg, &probe_corpus(&lm_cfg))?;
    let ppl = evaluate(&lm, rate(1.0), &corpus).map_err(|e| e.to_string())?.perplexity;
    ensure(ppl <= 1.5, || format!("char lm perplexity {ppl:.3}"))?;
    Ok(format!(
        "spirals subnets {accs:.3?}, fixed model {fixed_acc:.3}; char lm perplexity {ppl:.3}"
    ))
}

/// Plain minibatch momentum SGD on the full network, written out by hand.
fn conventional_training(cfg: &ExperimentConfig, train: &Dataset, steps: usize) -> Model {
    let mut model = Model::new(cfg.model.build(cfg.task).unwrap(), cfg.seed).unwrap();
    let t = cfg.train_config();
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut velocity: Vec<Vec<f64>> = model.store().iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
    let full = rate(1.0);
    let mut done = 0;
    for epoch in 0..t.epochs {
        let lr = t.lr.at(epoch, t.epochs);
        let order = shuffled_indices(train.len(), &mut rng);
        for chunk in order.chunks(t.batch_size) {
            if done == steps {
                return model;
            }
            let batch = train.batch(chunk).unwrap();
            model.store_mut().zero_grad();
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &batch, full, Some(&mut rng)).unwrap();
            tape.backward(loss, model.store_mut()).unwrap();
            for (p, v) in model.store_mut().iter_mut().zip(&mut velocity) {
                let grads = p.grad.clone();
                let values = p.value.data_mut();
                for i in 0..values.len() {
                    v[i] = t.momentum * v[i] + (grads[i] + t.weight_decay * values[i]);
                    values[i] -= lr * v[i];
                }
            }
            done += 1;
        }
    }
    model
}

fn degenerate_schedule() -> Outcome {
    let mut cfg = ExperimentConfig::preset(Task::Spirals);
    cfg.train.scheme = "static".into();
    cfg.train.rates = vec![1.0];
    cfg.train.epochs = 10;
    cfg.data.size = 320;
    let steps = 100;
    let train = data::generate(Task::Spirals, cfg.seed, cfg.data.size, 1).unwrap();
    let mut model = Model::new(cfg.model.build(cfg.task).unwrap(), cfg.seed).unwrap();
    let mut trainer = Trainer::new(&model, cfg.train_config()).map_err(|e| e.to_string())?;
    while trainer.epoch() < cfg.train.epochs {
        trainer.run_epoch(&mut model, &train).map_err(|e| e.to_string())?;
    }
    ensure(trainer.steps() == steps as u64, || format!("{} steps", trainer.steps()))?;
    let reference = conventional_training(&cfg, &train, steps);
    let mut elements = 0;
    for ((_, a), (_, b)) in model.store().iter().zip(reference.store().iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("parameter {} differs", a.name))?;
        elements += a.value.len();
    }
    Ok(format!("{steps} steps, {elements} parameters bit-identical"))
}

// ------------------------------------------------------------ simulator

fn workload_simulator() -> Outcome {
    let policy = LatencyPolicy::new(2.0, 0.01, SliceRateList::new(vec![0.25, 0.5, 0.75, 1.0]).unwrap())
        .map_err(|e| e.to_string())?;
    let sim = simulate_workload(&QueryStream::bundled_burst(), &policy);
    for e in &sim.events {
        let cost = e.n as f64 * e.rate * e.rate * policy.unit_time;
        ensure(cost <= policy.interval() * (1.0 + 1e-12), || format!("batch {} costs {cost}", e.batch_id))?;
    }
    let rates_for = |n: usize| {
        let mut r: Vec<f64> = sim.events.iter().filter(|e| e.n == n).map(|e| e.rate).collect();
        r.dedup();
        r
    };
    let (base, burst) = (rates_for(100), rates_for(1600));
    ensure(base == [1.0] && burst == [0.25], || format!("rates {base:?} before, {burst:?} during the burst"))?;
    ensure(base[0] / burst[0] == 4.0, || "rate does not drop by 4x".into())?;
    ensure(sim.summary.violations == 0, || format!("{} violations", sim.summary.violations))?;
    ensure(sim.events.len() == 20, || format!("{} batches", sim.events.len()))?;
    Ok(format!(
        "{} batches, rate 1.0 -> 0.25 in the burst, max latency {:.3}, 0 violations",
        sim.events.len(),
        sim.summary.max_latency
    ))
}

// -------------------------------------------------------------- cascade

/// Sliced mean pairwise inclusion must beat the independent pipeline by at
/// least this margin (first measured gap: 0.075).
const INCLUSION_MARGIN: f64 = 0.02;

fn mean_pairwise_inclusion(stages: &[(&Model, SliceRate)], data: &Dataset) -> Result<f64, String> {
    let labels = data.labels().unwrap();
    let errors = stages
        .iter()
        .map(|(m, r)| predict_classes(m, *r, data).map(|p| error_set(&p, labels)))
        .collect::<modelslice::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..errors.len() {
        for j in i + 1..errors.len() {
            sum += inclusion_coefficient(&errors[i], &errors[j]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

fn cascade_harness() -> Outcome {
    let a: BTreeSet<usize> = [1, 4, 9].into();
    let b: BTreeSet<usize> = [2, 3].into();
    ensure(inclusion_coefficient(&a, &a) == 1.0, || "identical sets".into())?;
    ensure(inclusion_coefficient(&a, &b) == 0.0, || "disjoint sets".into())?;

    let seed = 1;
    let held_out = Dataset::Labeled(data::spirals_with_noise(1000, seed + 1000, 0.15));
    let mut cfg = ExperimentConfig::preset(Task::Spirals);
    cfg.seed = seed;
    let (sliced, _) = train_preset(&cfg, &held_out)?;
    let rates = cfg.train.rates.clone();
    let sliced_stages: Vec<(&Model, SliceRate)> = rates.iter().map(|r| (&sliced, rate(*r))).collect();

    let mut independent = Vec::new();
    for &r in &rates {
        let w = (64.0 * r) as usize;
        let mut c = cfg.clone();
        c.model = modelslice::config::ModelConfig::Mlp { hidden: vec![w, w], groups: w / 8 };
        c.train.scheme = "static".into();
        c.train.rates = vec![1.0];
        independent.push(train_preset(&c, &held_out)?.0);
    }
    let independent_stages: Vec<(&Model, SliceRate)> = independent.iter().map(|m| (m, rate(1.0))).collect();

    for (name, stages) in [("sliced", &sliced_stages), ("independent", &independent_stages)] {
        let metrics = cascade_from_models(stages, &held_out).map_err(|e| e.to_string())?;
        ensure(
            metrics.windows(2).all(|w| w[1].aggregate_recall <= w[0].aggregate_recall),
            || format!("{name} pipeline recall increases"),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let preds: Vec<Vec<usize>> = (0..4)
            .map(|_| labels.iter().map(|l| if rng.random_bool(0.8) { *l } else { rng.random_range(0..3) }).collect())
            .collect();
        let m = cascade_evaluate(&[0.25, 0.5, 0.75, 1.0], &preds, &labels).map_err(|e| e.to_string())?;
        ensure(m.windows(2).all(|w| w[1].aggregate_recall <= w[0].aggregate_recall), || "random cascade recall increases".into())?;
    }
    let s = mean_pairwise_inclusion(&sliced_stages, &held_out)?;
    let i = mean_pairwise_inclusion(&independent_stages, &held_out)?;
    ensure(s >= i + INCLUSION_MARGIN, || format!("sliced inclusion {s:.3} vs independent {i:.3}"))?;
    Ok(format!("mean pairwise inclusion sliced {s:.3} vs independent {i:.3}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("cost fixtures", Duration::from_secs(1), cost_fixtures),
        ("quadratic cost law", Duration::from_secs(1), quadratic_law),
        ("gradient suite", Duration::from_secs(30), gradient_suite),
        ("block-matrix exactness", Duration::from_secs(30), block_exactness),
        ("scheduler statistics", Duration::from_secs(5), scheduler_statistics),
        ("training sanity", Duration::from_secs(300), training_sanity),
        ("degenerate schedule equivalence", Duration::from_secs(30), degenerate_schedule),
        ("workload simulator", Duration::from_secs(5), workload_simulator),
        ("cascade harness", Duration::from_secs(120), cascade_harness),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > *budget => Err(format!("{detail}; over the {budget:?} budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail} ({elapsed:.2?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why} ({elapsed:.2?})", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
