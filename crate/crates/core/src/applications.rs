//! Serving harnesses: a virtual-clock simulator for latency-bounded serving
//! under a volatile query load, and a cascade-ranking evaluator.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scheduler::SliceRateList;
use crate::slicing::SliceRate;

/// Arrival timestamps of the shipped burst trace, one per line.
pub const BUNDLED_BURST_TRACE: &str = include_str!("../data/burst16_trace.csv");

/// Relative slack for comparisons against the latency budget.
const REL_EPS: f64 = 1e-12;

fn within(value: f64, bound: f64) -> bool {
    value <= bound * (1.0 + REL_EPS)
}

/// Query arrival times in seconds, nondecreasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryStream {
    arrivals: Vec<f64>,
}

impl QueryStream {
    pub fn new(arrivals: Vec<f64>) -> Result<Self> {
        if arrivals.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::Data(
                "arrival times must be finite and nonnegative".into(),
            ));
        }
        if let Some(i) = arrivals.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Data(format!(
                "arrival times decrease at entry {}: {} after {}",
                i + 1,
                arrivals[i + 1],
                arrivals[i]
            )));
        }
        Ok(Self { arrivals })
    }

    /// `counts[k]` queries spread evenly over window `k` of length `interval`.
    pub fn from_window_counts(counts: &[usize], interval: f64) -> Result<Self> {
        let mut arrivals = Vec::with_capacity(counts.iter().sum());
        for (k, &n) in counts.iter().enumerate() {
            let start = k as f64 * interval;
            arrivals.extend((0..n).map(|i| start + (i as f64 + 0.5) / n as f64 * interval));
        }
        Self::new(arrivals)
    }

    /// The same load in every window.
    pub fn constant(per_window: usize, windows: usize, interval: f64) -> Result<Self> {
        Self::from_window_counts(&vec![per_window; windows], interval)
    }

    /// Base load with the windows in `burst` multiplied by `factor`.
    pub fn burst(
        per_window: usize,
        factor: usize,
        windows: usize,
        burst: std::ops::Range<usize>,
        interval: f64,
    ) -> Result<Self> {
        let counts: Vec<usize> = (0..windows)
            .map(|k| {
                if burst.contains(&k) {
                    per_window * factor
                } else {
                    per_window
                }
            })
            .collect();
        Self::from_window_counts(&counts, interval)
    }

    /// Poisson arrivals at `rate` per second over `[0, duration)`.
    pub fn poisson(rate: f64, duration: f64, seed: u64) -> Result<Self> {
        let exp = Exp::new(rate)
            .map_err(|e| Error::Config(format!("invalid arrival rate {rate}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrivals = Vec::new();
        let mut t = exp.sample(&mut rng);
        while t < duration {
            arrivals.push(t);
            t += exp.sample(&mut rng);
        }
        Self::new(arrivals)
    }

    /// Reads one timestamp per line; blank lines and a non-numeric first
    /// line (a header) are skipped.
    pub fn from_trace(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_trace(&text, &path.display().to_string())
    }

    /// As [`QueryStream::from_trace`] on text already in memory; `origin`
    /// names the source in error messages.
    pub fn parse_trace(text: &str, origin: &str) -> Result<Self> {
        let mut arrivals = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match line.parse::<f64>() {
                Ok(v) => arrivals.push(v),
                Err(_) if i == 0 => {}
                Err(_) => {
                    return Err(Error::Data(format!(
                        "{origin}:{}: bad timestamp '{line}'",
                        i + 1
                    )))
                }
            }
        }
        Self::new(arrivals)
    }

    /// The shipped 16x-burst trace: 20 one-second windows of 100 queries,
    /// windows 10..14 carrying 1600.
    pub fn bundled_burst() -> Self {
        Self::parse_trace(BUNDLED_BURST_TRACE, "burst16_trace.csv")
            .expect("bundled trace is well formed")
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let body: String = self.arrivals.iter().map(|a| format!("{a}\n")).collect();
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn arrivals(&self) -> &[f64] {
        &self.arrivals
    }

    pub fn len(&self) -> usize {
        self.arrivals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty()
    }
}

/// Serving constraint: every query answered within `latency` seconds, where
/// one query costs `unit_time` seconds on the full model and `r^2` of that
/// on Subnet-`r`. Batches close every `latency / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyPolicy {
    pub latency: f64,
    pub unit_time: f64,
    pub rates: SliceRateList,
}

impl LatencyPolicy {
    pub fn new(latency: f64, unit_time: f64, rates: SliceRateList) -> Result<Self> {
        if !(latency > 0.0 && latency.is_finite() && unit_time > 0.0 && unit_time.is_finite()) {
            return Err(Error::Config(format!(
                "latency ({latency}) and per-query time ({unit_time}) must be positive"
            )));
        }
        Ok(Self {
            latency,
            unit_time,
            rates,
        })
    }

    pub fn interval(&self) -> f64 {
        self.latency / 2.0
    }

    /// Modeled processing time of `n` queries on Subnet-`r`.
    pub fn processing_time(&self, n: usize, r: f64) -> f64 {
        n as f64 * r * r * self.unit_time
    }

    pub fn fits(&self, n: usize, r: f64) -> bool {
        within(self.processing_time(n, r), self.interval())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateChoice {
    /// Nothing to dispatch.
    Idle,
    /// One batch at `rate`.
    Single { rate: f64 },
    /// Even the smallest rate overflows the window: back-to-back sub-batches.
    Split { rate: f64, sizes: Vec<usize> },
}

/// The largest listed rate whose batch fits in half the latency budget.
pub fn choose_rate_for_batch(policy: &LatencyPolicy, n: usize) -> RateChoice {
    if n == 0 {
        return RateChoice::Idle;
    }
    if let Some(&r) = policy
        .rates
        .rates()
        .iter()
        .rev()
        .find(|&&r| policy.fits(n, r))
    {
        return RateChoice::Single { rate: r };
    }
    let r = policy.rates.lower_bound();
    let per = (1..=n).rev().find(|&m| policy.fits(m, r)).unwrap_or(1);
    let mut sizes = vec![per; n / per];
    if n % per > 0 {
        sizes.push(n % per);
    }
    RateChoice::Split { rate: r, sizes }
}

/// One dispatched (sub-)batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchEvent {
    pub batch_id: usize,
    pub close_time: f64,
    pub n: usize,
    pub rate: f64,
    pub proc_time: f64,
    pub max_latency: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub queries: usize,
    pub batches: usize,
    pub split_windows: usize,
    pub max_latency: f64,
    pub mean_latency: f64,
    pub violations: usize,
    /// Largest `n * r^2 * t` over all batches.
    pub max_batch_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub events: Vec<BatchEvent>,
    pub summary: SimulationSummary,
}

impl Simulation {
    pub fn events_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.events {
            w.serialize(e)
                .map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        if self.events.is_empty() {
            w.write_record([
                "batch_id",
                "close_time",
                "n",
                "rate",
                "proc_time",
                "max_latency",
            ])
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }
}

/// Simulates serving with the modeled processing time `n * r^2 * t`.
pub fn simulate_workload(stream: &QueryStream, policy: &LatencyPolicy) -> Simulation {
    simulate_workload_with(stream, policy, |n, r| policy.processing_time(n, r))
}

/// As [`simulate_workload`] with a caller-supplied processing time, for
/// example one measured on real hardware.
pub fn simulate_workload_with(
    stream: &QueryStream,
    policy: &LatencyPolicy,
    mut process: impl FnMut(usize, f64) -> f64,
) -> Simulation {
    let interval = policy.interval();
    let mut events = Vec::new();
    let mut summary = SimulationSummary::default();
    let mut latency_sum = 0.0;
    let mut busy_until = 0.0_f64;
    let arrivals = stream.arrivals();
    let mut next = 0;
    let mut window = 0usize;
    while next < arrivals.len() {
        let close = (window + 1) as f64 * interval;
        let start = next;
        while next < arrivals.len() && arrivals[next] < close {
            next += 1;
        }
        window += 1;
        let pending = &arrivals[start..next];
        let (rate, sizes) = match choose_rate_for_batch(policy, pending.len()) {
            RateChoice::Idle => continue,
            RateChoice::Single { rate } => (rate, vec![pending.len()]),
            RateChoice::Split { rate, sizes } => {
                summary.split_windows += 1;
                (rate, sizes)
            }
        };
        let mut offset = 0;
        for n in sizes {
            let batch = &pending[offset..offset + n];
            offset += n;
            let proc_time = process(n, rate);
            let begin = if within(busy_until, close) {
                close
            } else {
                busy_until
            };
            let finish = begin + proc_time;
            busy_until = finish;
            let max_latency = batch.iter().map(|a| finish - a).fold(0.0, f64::max);
            for a in batch {
                let lat = finish - a;
                latency_sum += lat;
                if !within(lat, policy.latency) {
                    summary.violations += 1;
                }
            }
            summary.max_latency = summary.max_latency.max(max_latency);
            summary.max_batch_cost = summary.max_batch_cost.max(policy.processing_time(n, rate));
            summary.queries += n;
            events.push(BatchEvent {
                batch_id: events.len(),
                close_time: close,
                n,
                rate,
                proc_time,
                max_latency,
            });
        }
    }
    summary.batches = events.len();
    if summary.queries > 0 {
        summary.mean_latency = latency_sum / summary.queries as f64;
    }
    Simulation { events, summary }
}

/// Per-stage cascade metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub rate: f64,
    pub params: u64,
    pub flops: u64,
    /// Accuracy on the items reaching this stage.
    pub precision: f64,
    /// Fraction of all items classified correctly by every stage so far.
    pub aggregate_recall: f64,
    /// Items reaching this stage.
    pub survivors: usize,
    /// Accuracy of this stage's classifier on all items.
    pub accuracy: f64,
}

fn fraction(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        part as f64 / whole as f64
    }
}

/// Evaluates a cascade from each stage's predictions on every item. An item
/// reaches stage `k` if stage `k - 1` kept it and both predicted the same
/// class.
pub fn cascade_evaluate(
    rates: &[f64],
    predictions: &[Vec<usize>],
    labels: &[usize],
) -> Result<Vec<StageMetrics>> {
    if rates.len() != predictions.len() {
        return Err(Error::Config(format!(
            "{} stage rates for {} prediction sets",
            rates.len(),
            predictions.len()
        )));
    }
    if rates.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config(format!(
            "stage rates must be nondecreasing: {rates:?}"
        )));
    }
    if let Some(p) = predictions.iter().find(|p| p.len() != labels.len()) {
        return Err(Error::Config(format!(
            "{} predictions for {} items",
            p.len(),
            labels.len()
        )));
    }
    let total = labels.len();
    let mut alive = vec![true; total];
    let mut all_correct = vec![true; total];
    let mut out = Vec::with_capacity(predictions.len());
    for (k, preds) in predictions.iter().enumerate() {
        if k > 0 {
            let prev = &predictions[k - 1];
            for i in 0..total {
                alive[i] &= preds[i] == prev[i];
            }
        }
        for i in 0..total {
            all_correct[i] &= preds[i] == labels[i];
        }
        let survivors = alive.iter().filter(|a| **a).count();
        let correct_alive = (0..total)
            .filter(|&i| alive[i] && preds[i] == labels[i])
            .count();
        let correct = (0..total).filter(|&i| preds[i] == labels[i]).count();
        out.push(StageMetrics {
            stage: k + 1,
            rate: rates[k],
            params: 0,
            flops: 0,
            precision: fraction(correct_alive, survivors),
            aggregate_recall: fraction(all_correct.iter().filter(|c| **c).count(), total),
            survivors,
            accuracy: fraction(correct, total),
        });
    }
    Ok(out)
}

/// Class predictions of Subnet-`r` for every item of a labeled dataset.
pub fn predict_classes(model: &Model, r: SliceRate, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for batch in data.sequential_batches(256)? {
        out.extend(model.predict(&batch.inputs, r)?.argmax_rows()?);
    }
    Ok(out)
}

/// Runs a cascade whose stages are `(model, rate)` pairs; params and FLOPs
/// come from the cost model.
pub fn cascade_from_models(
    stages: &[(&Model, SliceRate)],
    data: &Dataset,
) -> Result<Vec<StageMetrics>> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Config("cascade evaluation needs a labeled dataset".into()))?;
    let mut preds = Vec::with_capacity(stages.len());
    let mut costs = Vec::with_capacity(stages.len());
    for (model, r) in stages {
        model.spec().trace(*r)?;
        if model.spec().num_classes()? != data.classes() {
            return Err(Error::Config(format!(
                "stage model has {} classes, data has {}",
                model.spec().num_classes()?,
                data.classes()
            )));
        }
        preds.push(predict_classes(model, *r, data)?);
        costs.push((
            crate::cost::count_params(model.spec(), *r)?,
            crate::cost::count_flops(model.spec(), *r)?,
        ));
    }
    let rates: Vec<f64> = stages.iter().map(|(_, r)| r.get()).collect();
    let mut metrics = cascade_evaluate(&rates, &preds, labels)?;
    for (m, (p, f)) in metrics.iter_mut().zip(costs) {
        m.params = p;
        m.flops = f;
    }
    Ok(metrics)
}

pub fn cascade_csv(metrics: &[StageMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "stage",
        "rate",
        "params",
        "flops",
        "precision",
        "aggregate_recall",
        "survivors",
        "accuracy",
    ])
    .map_err(|e| Error::Data(format!("csv: {e}")))?;
    for m in metrics {
        w.write_record([
            m.stage.to_string(),
            m.rate.to_string(),
            m.params.to_string(),
            m.flops.to_string(),
            m.precision.to_string(),
            m.aggregate_recall.to_string(),
            m.survivors.to_string(),
            m.accuracy.to_string(),
        ])
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

/// Indices of misclassified items.
pub fn error_set(predictions: &[usize], labels: &[usize]) -> BTreeSet<usize> {
    predictions
        .iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (p, l))| p != l)
        .map(|(i, _)| i)
        .collect()
}

/// Fraction of the smaller model's errors also made by the larger model;
/// 1.0 when the smaller model makes none.
pub fn inclusion_coefficient(
    errors_small: &BTreeSet<usize>,
    errors_large: &BTreeSet<usize>,
) -> f64 {
    if errors_small.is_empty() {
        return 1.0;
    }
    errors_small.intersection(errors_large).count() as f64 / errors_small.len() as f64
}
