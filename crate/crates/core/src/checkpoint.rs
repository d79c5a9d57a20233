//! Checkpoint container: a directory holding `manifest.json` and raw
//! little-endian `f64` arrays.
//!
//! * `params.bin`: every parameter, concatenated in manifest order.
//! * `velocity.bin`: optimizer momentum in the same layout (optional).
//!
//! The manifest records the format version, the model spec, each array's
//! name, shape and element offset, and the training progress including the
//! generator position.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const VELOCITY: &str = "velocity.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements (not bytes).
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Word position as a decimal string (128-bit).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Data(format!("bad generator position '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub has_velocity: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub arrays: Vec<ArrayEntry>,
    pub progress: Option<Progress>,
}

/// Resumable training state stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub velocity: Option<Vec<Vec<f64>>>,
}

fn write_f64s<'a>(path: &Path, arrays: impl Iterator<Item = &'a [f64]>) -> Result<()> {
    let mut bytes = Vec::new();
    for a in arrays {
        for v in a {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes `model` (and optionally training state) into `dir`.
pub fn save(dir: &Path, model: &Model, state: Option<&TrainingState>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut offset = 0;
    let arrays: Vec<ArrayEntry> = model
        .store()
        .iter()
        .map(|(_, p)| {
            let e = ArrayEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    write_f64s(
        &dir.join(PARAMS),
        model.store().iter().map(|(_, p)| p.value.data()),
    )?;
    let progress = match state {
        None => None,
        Some(s) => {
            if let Some(v) = &s.velocity {
                write_f64s(&dir.join(VELOCITY), v.iter().map(Vec::as_slice))?;
            }
            Some(Progress {
                epoch: s.epoch,
                step: s.step,
                rng: RngState::capture(&s.rng),
                has_velocity: s.velocity.is_some(),
            })
        }
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: model.spec().clone(),
        arrays,
        progress,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported format version {}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

fn split(flat: &[f64], model: &Model, manifest: &Manifest, what: &str) -> Result<Vec<Vec<f64>>> {
    let expected: usize = manifest
        .arrays
        .iter()
        .map(|a| a.shape.iter().product::<usize>())
        .sum();
    if flat.len() != expected {
        return Err(Error::Data(format!(
            "{what} holds {} values, manifest describes {expected}",
            flat.len()
        )));
    }
    if manifest.arrays.len() != model.store().len() {
        return Err(Error::Data(format!(
            "checkpoint has {} arrays, model has {}",
            manifest.arrays.len(),
            model.store().len()
        )));
    }
    manifest
        .arrays
        .iter()
        .zip(model.store().iter())
        .map(|(entry, (_, p))| {
            if entry.name != p.name || entry.shape != p.value.shape() {
                return Err(Error::Data(format!(
                    "array {} {:?} does not match model parameter {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let n = p.value.len();
            flat.get(entry.offset..entry.offset + n)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Data(format!("array {} lies outside {what}", entry.name)))
        })
        .collect()
}

/// Restores a model and any saved training state from `dir`.
pub fn load(dir: &Path) -> Result<(Model, Option<TrainingState>)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(manifest.spec.clone(), 0)?;
    let values = split(&read_f64s(&dir.join(PARAMS))?, &model, &manifest, PARAMS)?;
    for (p, v) in model.store_mut().iter_mut().zip(values) {
        p.value.data_mut().copy_from_slice(&v);
    }
    let state = match &manifest.progress {
        None => None,
        Some(pr) => Some(TrainingState {
            epoch: pr.epoch,
            step: pr.step,
            rng: pr.rng.restore()?,
            velocity: if pr.has_velocity {
                Some(split(
                    &read_f64s(&dir.join(VELOCITY))?,
                    &model,
                    &manifest,
                    VELOCITY,
                )?)
            } else {
                None
            },
        }),
    };
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Inputs;
    use crate::slicing::SliceRate;
    use crate::tensor::Tensor;
    use rand::RngCore;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelSpec::mlp(2, &[16, 16], 3, 4), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let state = TrainingState {
            epoch: 3,
            step: 42,
            rng: rng.clone(),
            velocity: Some(
                model
                    .store()
                    .iter()
                    .map(|(_, p)| vec![0.5; p.value.len()])
                    .collect(),
            ),
        };
        save(dir.path(), &model, Some(&state)).unwrap();
        let (back, restored) = load(dir.path()).unwrap();
        let x =
            Inputs::Features(Tensor::new([3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap());
        for r in [0.25, 0.5, 1.0] {
            let r = SliceRate::new(r).unwrap();
            assert_eq!(model.predict(&x, r).unwrap(), back.predict(&x, r).unwrap());
        }
        let mut restored = restored.unwrap();
        assert_eq!((restored.epoch, restored.step), (3, 42));
        assert_eq!(restored.rng.next_u64(), rng.next_u64());
        assert_eq!(restored.velocity, state.velocity);
    }

    #[test]
    fn corrupt_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelSpec::mlp(2, &[8], 2, 4), 0).unwrap();
        save(dir.path(), &model, None).unwrap();
        fs::write(dir.path().join(PARAMS), [0u8; 12]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Data(_))));
        assert!(matches!(
            load(&dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
    }
}
