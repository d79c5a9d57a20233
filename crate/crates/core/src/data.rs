//! Desk-scale synthetic tasks, their file formats, and batching.
//!
//! * `spirals`: two interleaved 2-D spirals; CSV `x,y,label`.
//! * `tinyimages`: 8x8 single-channel procedural shapes in four classes;
//!   CSV `label,p0,...,p63`.
//! * `charlm`: a periodic character corpus over a 16-letter alphabet;
//!   plain text.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Inputs};
use crate::tensor::Tensor;

pub const ALPHABET: &str = "abcdefghijklmnop";
pub const IMAGE_SIDE: usize = 8;
pub const IMAGE_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Spirals,
    TinyImages,
    CharLm,
}

impl Task {
    pub fn file_name(self) -> &'static str {
        match self {
            Task::Spirals => "spirals.csv",
            Task::TinyImages => "tinyimages.csv",
            Task::CharLm => "charlm.txt",
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spirals" => Ok(Task::Spirals),
            "tinyimages" => Ok(Task::TinyImages),
            "charlm" => Ok(Task::CharLm),
            other => Err(Error::Usage(format!(
                "unknown task '{other}' (expected spirals, tinyimages or charlm)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Spirals => "spirals",
            Task::TinyImages => "tinyimages",
            Task::CharLm => "charlm",
        })
    }
}

/// Labeled examples; `inputs` has the example index as its leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Token stream cut into non-overlapping windows of `steps` for next-token
/// prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub vocab: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Labeled(Labeled),
    Corpus(Corpus),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Labeled(l) => l.labels.len(),
            Dataset::Corpus(c) => c.tokens.len().saturating_sub(1) / c.steps.max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Dataset::Labeled(l) => l.classes,
            Dataset::Corpus(c) => c.vocab,
        }
    }

    /// Assembles the examples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        match self {
            Dataset::Labeled(l) => {
                let shape = l.inputs.shape();
                let row: usize = shape[1..].iter().product();
                let mut data = Vec::with_capacity(indices.len() * row);
                let mut targets = Vec::with_capacity(indices.len());
                for &i in indices {
                    if i >= l.labels.len() {
                        return Err(Error::Data(format!("example {i} out of range")));
                    }
                    data.extend_from_slice(&l.inputs.data()[i * row..(i + 1) * row]);
                    targets.push(l.labels[i]);
                }
                let mut bshape = shape.to_vec();
                bshape[0] = indices.len();
                Ok(Batch {
                    inputs: Inputs::Features(Tensor::new(bshape, data)?),
                    targets,
                })
            }
            Dataset::Corpus(c) => {
                let steps = c.steps;
                let mut ids = Vec::with_capacity(indices.len() * steps);
                let mut targets = vec![0; indices.len() * steps];
                for (b, &w) in indices.iter().enumerate() {
                    let start = w * steps;
                    if start + steps >= c.tokens.len() {
                        return Err(Error::Data(format!("window {w} out of range")));
                    }
                    ids.extend_from_slice(&c.tokens[start..start + steps]);
                    for t in 0..steps {
                        targets[t * indices.len() + b] = c.tokens[start + t + 1];
                    }
                }
                Ok(Batch {
                    inputs: Inputs::Tokens {
                        ids,
                        batch: indices.len(),
                        steps,
                    },
                    targets,
                })
            }
        }
    }

    /// Consecutive batches over `0..len()` in order.
    pub fn sequential_batches(&self, batch_size: usize) -> Result<Vec<Batch>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect()
    }

    /// Per-example ground-truth label (labeled data only).
    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Dataset::Labeled(l) => Some(&l.labels),
            Dataset::Corpus(_) => None,
        }
    }
}

/// A random permutation of `0..n`.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

pub const SPIRAL_NOISE: f64 = 0.02;

/// Two interleaved spirals; the first half of the examples is class 0.
pub fn spirals(size: usize, seed: u64) -> Labeled {
    spirals_with_noise(size, seed, SPIRAL_NOISE)
}

/// [`spirals`] with Gaussian jitter of standard deviation `noise` on each
/// coordinate.
pub fn spirals_with_noise(size: usize, seed: u64, noise: f64) -> Labeled {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise).expect("finite noise");
    let per_class = [size / 2, size - size / 2];
    let mut data = Vec::with_capacity(2 * size);
    let mut labels = Vec::with_capacity(size);
    for (class, &count) in per_class.iter().enumerate() {
        for i in 0..count {
            let t = (i as f64 + 0.5) / count as f64;
            let angle = t * 1.25 * std::f64::consts::TAU + class as f64 * std::f64::consts::PI;
            let radius = 0.1 + 0.9 * t;
            data.push(radius * angle.cos() + noise.sample(&mut rng));
            data.push(radius * angle.sin() + noise.sample(&mut rng));
            labels.push(class);
        }
    }
    Labeled {
        inputs: Tensor::new([size, 2], data).expect("shape"),
        labels,
        classes: 2,
    }
}

/// Procedural 8x8 shapes: horizontal bar, vertical bar, diagonal, box.
pub fn tiny_images(size: usize, seed: u64) -> Labeled {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("std");
    let n = IMAGE_SIDE;
    let mut data = Vec::with_capacity(size * n * n);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let class = i % IMAGE_CLASSES;
        let mut img = vec![0.0; n * n];
        let len = rng.random_range(4..=6);
        match class {
            0 => {
                let (y, x0) = (rng.random_range(0..n), rng.random_range(0..=n - len));
                (x0..x0 + len).for_each(|x| img[y * n + x] = 1.0);
            }
            1 => {
                let (x, y0) = (rng.random_range(0..n), rng.random_range(0..=n - len));
                (y0..y0 + len).for_each(|y| img[y * n + x] = 1.0);
            }
            2 => {
                let (x0, y0) = (rng.random_range(0..=n - len), rng.random_range(0..=n - len));
                (0..len).for_each(|k| img[(y0 + k) * n + x0 + k] = 1.0);
            }
            _ => {
                let side = rng.random_range(3..=4);
                let (x0, y0) = (
                    rng.random_range(0..=n - side),
                    rng.random_range(0..=n - side),
                );
                for k in 0..side {
                    img[y0 * n + x0 + k] = 1.0;
                    img[(y0 + side - 1) * n + x0 + k] = 1.0;
                    img[(y0 + k) * n + x0] = 1.0;
                    img[(y0 + k) * n + x0 + side - 1] = 1.0;
                }
            }
        }
        data.extend(img.into_iter().map(|v| v + noise.sample(&mut rng)));
        labels.push(class);
    }
    Labeled {
        inputs: Tensor::new([size, 1, n, n], data).expect("shape"),
        labels,
        classes: IMAGE_CLASSES,
    }
}

/// `size` characters repeating an 8-letter pattern of distinct letters
/// drawn from [`ALPHABET`].
pub fn periodic_corpus(size: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut letters: Vec<char> = ALPHABET.chars().collect();
    letters.shuffle(&mut rng);
    let pattern = &letters[..8];
    (0..size).map(|i| pattern[i % pattern.len()]).collect()
}

pub fn encode_corpus(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| {
            ALPHABET
                .find(c)
                .ok_or_else(|| Error::Data(format!("character '{c}' is outside the alphabet")))
        })
        .collect()
}

fn labeled_to_csv(l: &Labeled, label_first: bool) -> String {
    let row: usize = l.inputs.shape()[1..].iter().product();
    let mut out = String::new();
    for (i, label) in l.labels.iter().enumerate() {
        let vals: Vec<String> = l.inputs.data()[i * row..(i + 1) * row]
            .iter()
            .map(|v| v.to_string())
            .collect();
        if label_first {
            out.push_str(&format!("{label},{}\n", vals.join(",")));
        } else {
            out.push_str(&format!("{},{label}\n", vals.join(",")));
        }
    }
    out
}

/// Generates `task` and writes it under `dir`; returns the written path.
pub fn gen_data(task: Task, seed: u64, size: usize, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(task.file_name());
    let body = match task {
        Task::Spirals => labeled_to_csv(&spirals(size, seed), false),
        Task::TinyImages => labeled_to_csv(&tiny_images(size, seed), true),
        Task::CharLm => periodic_corpus(size, seed) + "\n",
    };
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn parse_rows(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            line.split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| {
                        Error::Data(format!("{}:{}: bad number '{v}'", path.display(), n + 1))
                    })
                })
                .collect()
        })
        .collect()
}

/// Loads a file written by [`gen_data`]. `steps` sets the window length for
/// the character corpus.
pub fn load(task: Task, path: &Path, steps: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match task {
        Task::Spirals | Task::TinyImages => {
            let rows = parse_rows(&text, path)?;
            let (width, label_first) = match task {
                Task::Spirals => (3, false),
                _ => (1 + IMAGE_SIDE * IMAGE_SIDE, true),
            };
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for (n, row) in rows.iter().enumerate() {
                if row.len() != width {
                    return Err(Error::Data(format!(
                        "{}:{}: expected {width} fields, got {}",
                        path.display(),
                        n + 1,
                        row.len()
                    )));
                }
                let (label, feats) = if label_first {
                    (row[0], &row[1..])
                } else {
                    (row[width - 1], &row[..width - 1])
                };
                if label < 0.0 || label.fract() != 0.0 {
                    return Err(Error::Data(format!(
                        "{}:{}: bad label {label}",
                        path.display(),
                        n + 1
                    )));
                }
                labels.push(label as usize);
                data.extend_from_slice(feats);
            }
            let n = labels.len();
            let (inputs, classes) = match task {
                Task::Spirals => (Tensor::new([n, 2], data)?, 2),
                _ => (
                    Tensor::new([n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
                    IMAGE_CLASSES,
                ),
            };
            if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Data(format!(
                    "label {bad} out of range in {}",
                    path.display()
                )));
            }
            Ok(Dataset::Labeled(Labeled {
                inputs,
                labels,
                classes,
            }))
        }
        Task::CharLm => Ok(Dataset::Corpus(Corpus {
            tokens: encode_corpus(&text)?,
            vocab: ALPHABET.len(),
            steps,
        })),
    }
}

/// Generates a dataset directly in memory.
pub fn generate(task: Task, seed: u64, size: usize, steps: usize) -> Result<Dataset> {
    Ok(match task {
        Task::Spirals => Dataset::Labeled(spirals(size, seed)),
        Task::TinyImages => Dataset::Labeled(tiny_images(size, seed)),
        Task::CharLm => Dataset::Corpus(Corpus {
            tokens: encode_corpus(&periodic_corpus(size, seed))?,
            vocab: ALPHABET.len(),
            steps,
        }),
    })
}
