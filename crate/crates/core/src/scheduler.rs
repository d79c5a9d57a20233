//! Slice-rate scheduling: which subnets are trained on each batch.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::slicing::{GroupSpec, SliceRate};

/// Valid slice rates `r_1 < ... < r_G = 1.0`; `r_1` is the lower bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SliceRateList {
    rates: Vec<f64>,
}

impl SliceRateList {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Config("slice rate list is empty".into()));
        }
        for r in &rates {
            SliceRate::new(*r)?;
        }
        if rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "slice rates must be strictly increasing: {rates:?}"
            )));
        }
        if *rates.last().unwrap() != 1.0 {
            return Err(Error::Config("the largest slice rate must be 1.0".into()));
        }
        Ok(Self { rates })
    }

    /// All multiples of `1/groups` from `lower_bound` up to 1.0.
    pub fn uniform(groups: usize, lower_bound: f64) -> Result<Self> {
        if groups == 0 {
            return Err(Error::Config("group count must be positive".into()));
        }
        SliceRate::new(lower_bound)?;
        let rates: Vec<f64> = (1..=groups)
            .map(|i| i as f64 / groups as f64)
            .filter(|r| *r >= lower_bound - 1e-12)
            .collect();
        Self::new(rates)
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn slice_rates(&self) -> Vec<SliceRate> {
        self.rates
            .iter()
            .map(|&r| SliceRate::new(r).expect("validated"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn lower_bound(&self) -> f64 {
        self.rates[0]
    }

    pub fn contains(&self, r: f64) -> bool {
        self.rates.contains(&r)
    }

    /// Fails unless every rate lands exactly on a boundary of `spec`.
    pub fn check_boundaries(&self, spec: &GroupSpec) -> Result<()> {
        for &r in &self.rates {
            if !spec.is_exact(SliceRate::new(r)?) {
                return Err(Error::Config(format!(
                    "slice rate {r} is not a group boundary of width {} with {} groups",
                    spec.total(),
                    spec.groups()
                )));
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for SliceRateList {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SliceRateList> for Vec<f64> {
    fn from(l: SliceRateList) -> Vec<f64> {
        l.rates
    }
}

/// Built-in continuous distributions over slice rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateDistribution {
    Uniform {
        low: f64,
        high: f64,
    },
    /// Normal(mean, std) truncated to `[low, high]`.
    TruncatedNormal {
        mean: f64,
        std: f64,
        low: f64,
        high: f64,
    },
}

impl RateDistribution {
    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            RateDistribution::Uniform { low, high } => ((x - low) / (high - low)).clamp(0.0, 1.0),
            RateDistribution::TruncatedNormal {
                mean,
                std,
                low,
                high,
            } => {
                let n = Normal::new(mean, std).expect("positive std");
                if x <= low {
                    return 0.0;
                }
                if x >= high {
                    return 1.0;
                }
                let (a, b) = (n.cdf(low), n.cdf(high));
                (n.cdf(x) - a) / (b - a)
            }
        }
    }
}

/// Categorical probabilities over `list` obtained by integrating a
/// continuous density between consecutive midpoints.
pub fn probabilities_from_distribution(
    cdf: impl Fn(f64) -> f64,
    list: &SliceRateList,
) -> Result<Vec<f64>> {
    let r = list.rates();
    let mids: Vec<f64> = r.windows(2).map(|w| cdf((w[0] + w[1]) / 2.0)).collect();
    if mids.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::Config("cdf values must lie in [0, 1]".into()));
    }
    if mids.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config(
            "cdf is decreasing between slice rates".into(),
        ));
    }
    let mut probs = Vec::with_capacity(r.len());
    let mut prev = 0.0;
    for &f in &mids {
        probs.push(f - prev);
        prev = f;
    }
    probs.push(1.0 - prev);
    Ok(probs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeKind {
    /// `draws` independent categorical draws over the whole list.
    Random {
        probabilities: Vec<f64>,
        draws: usize,
    },
    /// Every rate, every batch.
    Static,
    /// A fixed subset plus `draws` categorical draws over the remainder.
    RandomStatic {
        fixed: Vec<usize>,
        probabilities: Vec<f64>,
        draws: usize,
    },
}

/// A validated scheduling scheme bound to its slice-rate list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulingScheme {
    list: SliceRateList,
    kind: SchemeKind,
}

pub const PRESET_NAMES: &[&str] = &[
    "static",
    "r-uniform-<k>",
    "r-weighted-<k>",
    "r-min",
    "r-max",
    "r-min-max",
];

fn check_probabilities(p: &[f64], expected: usize) -> Result<()> {
    if p.len() != expected {
        return Err(Error::Config(format!(
            "expected {expected} probabilities, got {}",
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config(format!(
            "probabilities must be nonnegative: {p:?}"
        )));
    }
    let sum: f64 = p.iter().sum();
    if expected > 0 && (sum - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// Weight list for the weighted preset, aligned with ascending rates.
/// For four rates this is 0.25, 0.125, 0.125, 0.5; other sizes keep half
/// the mass on the full network, a quarter on the base network and split
/// the remaining quarter evenly over the middle.
pub fn weighted_probabilities(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        2 => vec![1.0 / 3.0, 2.0 / 3.0],
        _ => {
            let middle = 0.25 / (n - 2) as f64;
            let mut p = vec![middle; n];
            p[0] = 0.25;
            p[n - 1] = 0.5;
            p
        }
    }
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc && pi > 0.0 {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

impl SchedulingScheme {
    pub fn new(list: SliceRateList, kind: SchemeKind) -> Result<Self> {
        let n = list.len();
        match &kind {
            SchemeKind::Static => {}
            SchemeKind::Random {
                probabilities,
                draws,
            } => {
                check_probabilities(probabilities, n)?;
                if *draws == 0 {
                    return Err(Error::Config(
                        "random scheduling needs at least one draw".into(),
                    ));
                }
            }
            SchemeKind::RandomStatic {
                fixed,
                probabilities,
                ..
            } => {
                if fixed.is_empty() {
                    return Err(Error::Config(
                        "random-static needs a non-empty fixed set".into(),
                    ));
                }
                if fixed.iter().any(|&i| i >= n) || fixed.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(format!(
                        "fixed set {fixed:?} must be increasing indices below {n}"
                    )));
                }
                check_probabilities(probabilities, n - fixed.len())?;
            }
        }
        Ok(Self { list, kind })
    }

    pub fn list(&self) -> &SliceRateList {
        &self.list
    }

    pub fn kind(&self) -> &SchemeKind {
        &self.kind
    }

    /// Builds one of the named presets (case-insensitive).
    pub fn preset(name: &str, list: &SliceRateList) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let n = list.len();
        let uniform = |m: usize| vec![1.0 / m as f64; m];
        let random_static = |fixed: Vec<usize>| {
            let rest = n - fixed.len();
            SchemeKind::RandomStatic {
                fixed,
                probabilities: if rest == 0 { Vec::new() } else { uniform(rest) },
                draws: usize::from(rest > 0),
            }
        };
        let kind = match lower.as_str() {
            "static" => SchemeKind::Static,
            "r-min" => random_static(vec![0]),
            "r-max" => random_static(vec![n - 1]),
            "r-min-max" => random_static(if n == 1 { vec![0] } else { vec![0, n - 1] }),
            other => {
                let parse = |prefix: &str| {
                    other
                        .strip_prefix(prefix)
                        .and_then(|k| k.parse::<usize>().ok())
                        .filter(|k| *k > 0)
                };
                if let Some(k) = parse("r-uniform-") {
                    SchemeKind::Random {
                        probabilities: uniform(n),
                        draws: k,
                    }
                } else if let Some(k) = parse("r-weighted-") {
                    SchemeKind::Random {
                        probabilities: weighted_probabilities(n),
                        draws: k,
                    }
                } else {
                    return Err(Error::Config(format!(
                        "unknown scheduling preset '{name}'; valid presets: {}",
                        PRESET_NAMES.join(", ")
                    )));
                }
            }
        };
        Self::new(list.clone(), kind)
    }

    /// A random scheme whose probabilities come from a continuous
    /// distribution over rates.
    pub fn from_distribution(
        list: &SliceRateList,
        dist: &RateDistribution,
        draws: usize,
    ) -> Result<Self> {
        let probabilities = probabilities_from_distribution(|x| dist.cdf(x), list)?;
        Self::new(
            list.clone(),
            SchemeKind::Random {
                probabilities,
                draws,
            },
        )
    }

    /// One categorical draw (random schemes only; `None` otherwise).
    pub fn draw_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        match &self.kind {
            SchemeKind::Random { probabilities, .. } => {
                Some(self.list.rates()[categorical(probabilities, rng)])
            }
            _ => None,
        }
    }

    /// The rates to train on this iteration: sorted descending, no
    /// duplicates, always a subset of the list.
    pub fn next_slice_rate_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<SliceRate> {
        let rates = self.list.rates();
        let mut picked: Vec<usize> = match &self.kind {
            SchemeKind::Static => (0..rates.len()).collect(),
            SchemeKind::Random {
                probabilities,
                draws,
            } => (0..*draws)
                .map(|_| categorical(probabilities, rng))
                .collect(),
            SchemeKind::RandomStatic {
                fixed,
                probabilities,
                draws,
            } => {
                let rest: Vec<usize> = (0..rates.len()).filter(|i| !fixed.contains(i)).collect();
                let mut out = fixed.clone();
                if !rest.is_empty() {
                    out.extend((0..*draws).map(|_| rest[categorical(probabilities, rng)]));
                }
                out
            }
        };
        picked.sort_unstable_by(|a, b| b.cmp(a));
        picked.dedup();
        picked
            .into_iter()
            .map(|i| SliceRate::new(rates[i]).expect("validated"))
            .collect()
    }
}
