//! Multi-rate training: every iteration draws a set of slice rates, runs one
//! forward/backward per rate into shared gradient slots, then applies a
//! single momentum-SGD update.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::checkpoint::TrainingState;
use crate::data::{shuffled_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::scheduler::{SchedulingScheme, SliceRateList};
use crate::slicing::SliceRate;

/// Step decay: the rate is multiplied by `factor` at each milestone, given as
/// a fraction of the total number of epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub milestones: Vec<f64>,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.initial
            )));
        }
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(Error::Config(format!(
                "decay factor must be positive, got {}",
                self.factor
            )));
        }
        let ordered = self.milestones.windows(2).all(|w| w[0] < w[1]);
        let inside = self.milestones.iter().all(|m| *m > 0.0 && *m < 1.0);
        if !ordered || !inside {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing in (0, 1), got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }

    /// Learning rate for the zero-based `epoch` out of `epochs`.
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|m| epoch as f64 >= **m * epochs as f64)
            .count();
        self.initial * self.factor.powi(passed as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// Every parameter decays every step.
    #[default]
    All,
    /// Only elements that received a gradient this step decay.
    Touched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub decay_mode: WeightDecayMode,
    #[serde(default)]
    pub seed: u64,
    pub scheme: String,
    pub rates: Vec<f64>,
    /// One weight per rate in `rates`; all ones when absent.
    #[serde(default)]
    pub loss_weights: Option<Vec<f64>>,
    /// Divide each scheduled loss by the number of rates drawn this step.
    #[serde(default)]
    pub average_over_rates: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if let Some(w) = &self.loss_weights {
            if w.len() != self.rates.len() {
                return Err(Error::Config(format!(
                    "{} loss weights for {} rates",
                    w.len(),
                    self.rates.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!(
                    "loss weights must be nonnegative: {w:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn rate_list(&self) -> Result<SliceRateList> {
        SliceRateList::new(self.rates.clone())
    }

    pub fn scheduling_scheme(&self) -> Result<SchedulingScheme> {
        SchedulingScheme::preset(&self.scheme, &self.rate_list()?)
    }

    fn loss_weight(&self, r: SliceRate) -> f64 {
        match &self.loss_weights {
            None => 1.0,
            Some(w) => self
                .rates
                .iter()
                .position(|x| (x - r.get()).abs() < 1e-12)
                .map_or(1.0, |i| w[i]),
        }
    }
}

/// Hyperparameters of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Classical momentum SGD on one flat buffer:
/// `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
/// When `touched` is given, decay applies only where it is set.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    touched: Option<&[bool]>,
    hp: SgdParams,
) {
    for i in 0..params.len() {
        let decays = touched.is_none_or(|t| t[i]);
        let g = grads[i]
            + if decays {
                hp.weight_decay * params[i]
            } else {
                0.0
            };
        velocity[i] = hp.momentum * velocity[i] + g;
        params[i] -= hp.lr * velocity[i];
    }
}

/// Momentum buffers for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub mode: WeightDecayMode,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(
        store: &ParamStore,
        momentum: f64,
        weight_decay: f64,
        mode: WeightDecayMode,
    ) -> Self {
        Self {
            momentum,
            weight_decay,
            mode,
            velocity: store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect(),
        }
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocities(&mut self, velocity: Vec<Vec<f64>>) -> Result<()> {
        let ok = velocity.len() == self.velocity.len()
            && velocity
                .iter()
                .zip(&self.velocity)
                .all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::Dimension(
                "velocity buffers do not match the model".into(),
            ));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let hp = SgdParams {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        };
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            let touched = match self.mode {
                WeightDecayMode::All => None,
                WeightDecayMode::Touched => Some(p.touched.as_slice()),
            };
            sgd_update(p.value.data_mut(), &p.grad, v, touched, hp);
        }
    }
}

/// Zeroes gradients and accumulates one backward pass per rate in `rates`,
/// scaling rate `r`'s loss by `weight(r)`. Returns the unscaled losses.
pub fn accumulate_gradients(
    model: &mut Model,
    batch: &Batch,
    rates: &[SliceRate],
    weight: impl Fn(SliceRate) -> f64,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Vec<(SliceRate, f64)>> {
    if rates.is_empty() {
        return Err(Error::Usage(
            "no slice rates scheduled for this step".into(),
        ));
    }
    model.store_mut().zero_grad();
    let mut losses = Vec::with_capacity(rates.len());
    for &r in rates {
        let mut tape = Tape::new();
        let rng = dropout_rng.as_mut().map(|g| &mut **g as &mut dyn RngCore);
        let loss = model.loss(&mut tape, batch, r, rng)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                rate: r.get(),
                message: format!("loss is {value}"),
            });
        }
        tape.backward_scaled(loss, weight(r), model.store_mut())?;
        losses.push((r, value));
    }
    Ok(losses)
}

/// One iteration: accumulate over `rates`, then a single optimizer update.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    rates: &[SliceRate],
    weight: impl Fn(SliceRate) -> f64,
    optimizer: &mut Sgd,
    lr: f64,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Vec<(SliceRate, f64)>> {
    let losses = accumulate_gradients(model, batch, rates, weight, dropout_rng)?;
    optimizer.step(model.store_mut(), lr);
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rate: f64,
    /// Mean cross-entropy per prediction.
    pub loss: f64,
    pub accuracy: f64,
    /// `exp(loss)`.
    pub perplexity: f64,
    pub count: usize,
}

const EVAL_CHUNK: usize = 256;

/// Deterministic single pass of Subnet-`r` over `data`.
pub fn evaluate(model: &Model, r: SliceRate, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let (mut nll, mut correct, mut count) = (0.0, 0usize, 0usize);
    for batch in data.sequential_batches(EVAL_CHUNK)? {
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &batch.inputs, r, None)?;
        let loss = tape.softmax_cross_entropy(logits, &batch.targets)?;
        let n = batch.targets.len();
        nll += tape.value(loss).item() * n as f64;
        correct += tape
            .value(logits)
            .argmax_rows()?
            .iter()
            .zip(&batch.targets)
            .filter(|(p, t)| p == t)
            .count();
        count += n;
    }
    let loss = nll / count as f64;
    Ok(Metrics {
        rate: r.get(),
        loss,
        accuracy: correct as f64 / count as f64,
        perplexity: loss.exp(),
        count,
    })
}

/// One metrics line per (epoch, rate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub rate: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub ppl: f64,
    pub wall_time: f64,
}

/// Drives [`train_step`] over epochs. A single generator supplies shuffling,
/// rate scheduling and dropout masks, so a seed fixes the whole run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    scheme: SchedulingScheme,
    optimizer: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
    steps: u64,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let scheme = config.scheduling_scheme()?;
        model.spec().validate(scheme.list().rates())?;
        let optimizer = Sgd::new(
            model.store(),
            config.momentum,
            config.weight_decay,
            config.decay_mode,
        );
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            scheme,
            optimizer,
            epoch: 0,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn scheme(&self) -> &SchedulingScheme {
        &self.scheme
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.optimizer
    }

    pub fn optimizer_mut(&mut self) -> &mut Sgd {
        &mut self.optimizer
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// One pass over `data` in a fresh random order. Returns the mean
    /// training loss per scheduled rate, in descending rate order.
    pub fn run_epoch(&mut self, model: &mut Model, data: &Dataset) -> Result<Vec<(f64, f64)>> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let lr = self.config.lr.at(self.epoch, self.config.epochs);
        let order = shuffled_indices(data.len(), &mut self.rng);
        let mut sums: Vec<(f64, f64, usize)> = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch = data.batch(chunk)?;
            let rates = self.scheme.next_slice_rate_batch(&mut self.rng);
            let config = &self.config;
            let losses = train_step(
                model,
                &batch,
                &rates,
                |r| {
                    let w = config.loss_weight(r);
                    if config.average_over_rates {
                        w / rates.len() as f64
                    } else {
                        w
                    }
                },
                &mut self.optimizer,
                lr,
                Some(&mut self.rng),
            )?;
            for (r, l) in losses {
                match sums.iter_mut().find(|s| s.0 == r.get()) {
                    Some(s) => {
                        s.1 += l;
                        s.2 += 1;
                    }
                    None => sums.push((r.get(), l, 1)),
                }
            }
            self.steps += 1;
        }
        self.epoch += 1;
        sums.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(sums
            .into_iter()
            .map(|(r, s, n)| (r, s / n as f64))
            .collect())
    }

    /// Evaluates every listed rate on `data`, largest first.
    pub fn evaluate_rates(
        &self,
        model: &Model,
        data: &Dataset,
        wall_time: f64,
    ) -> Result<Vec<MetricsRow>> {
        self.scheme
            .list()
            .slice_rates()
            .into_iter()
            .rev()
            .map(|r| {
                let m = evaluate(model, r, data)?;
                if !m.loss.is_finite() {
                    return Err(Error::Training {
                        rate: r.get(),
                        message: format!("evaluation loss is {}", m.loss),
                    });
                }
                Ok(MetricsRow {
                    epoch: self.epoch,
                    rate: r.get(),
                    loss: m.loss,
                    accuracy: m.accuracy,
                    ppl: m.perplexity,
                    wall_time,
                })
            })
            .collect()
    }

    /// Trains the remaining epochs, evaluating every listed rate on `eval`
    /// after each one and handing that epoch's rows to `sink`.
    pub fn fit(
        &mut self,
        model: &mut Model,
        train: &Dataset,
        eval: &Dataset,
        mut sink: impl FnMut(&Self, &Model, &[MetricsRow]) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let start = Instant::now();
        let mut rows = Vec::new();
        while self.epoch < self.config.epochs {
            self.run_epoch(model, train)?;
            let epoch_rows = self.evaluate_rates(model, eval, start.elapsed().as_secs_f64())?;
            sink(self, model, &epoch_rows)?;
            rows.extend(epoch_rows);
        }
        Ok(rows)
    }

    /// Everything needed to continue this run later.
    pub fn training_state(&self) -> TrainingState {
        TrainingState {
            epoch: self.epoch,
            step: self.steps,
            rng: self.rng.clone(),
            velocity: Some(self.optimizer.velocities().to_vec()),
        }
    }

    pub fn restore(&mut self, state: TrainingState) -> Result<()> {
        if let Some(v) = state.velocity {
            self.optimizer.set_velocities(v)?;
        }
        self.epoch = state.epoch;
        self.steps = state.step;
        self.rng = state.rng;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, Task};
    use crate::model::{Inputs, ModelSpec};
    use crate::tensor::Tensor;

    fn rate(r: f64) -> SliceRate {
        SliceRate::new(r).unwrap()
    }

    fn hp(lr: f64, momentum: f64, weight_decay: f64) -> SgdParams {
        SgdParams {
            lr,
            momentum,
            weight_decay,
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut p, &[0.5, 1.0], &mut v, None, hp(0.1, 0.0, 0.0));
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1]);
        let before = p.clone();
        sgd_update(&mut p, &[0.0, 0.0], &mut [0.0; 2], None, hp(0.1, 0.0, 0.0));
        assert_eq!(p, before);
    }

    #[test]
    fn two_momentum_steps_match_hand_unroll() {
        let (lr, mu) = (0.1, 0.9);
        let (g1, g2) = (0.4, -0.2);
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[g1], &mut v, None, hp(lr, mu, 0.0));
        sgd_update(&mut p, &[g2], &mut v, None, hp(lr, mu, 0.0));
        // v1 = g1, p1 = 1 - lr g1; v2 = mu g1 + g2, p2 = p1 - lr v2
        let expected = 1.0 - lr * g1 - lr * (mu * g1 + g2);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn touched_mode_skips_decay_on_untouched() {
        let mut p = vec![1.0, 1.0];
        let mut v = vec![0.0; 2];
        sgd_update(
            &mut p,
            &[0.0, 0.0],
            &mut v,
            Some(&[true, false]),
            hp(0.1, 0.0, 0.5),
        );
        assert_eq!(p, vec![0.95, 1.0]);
    }

    #[test]
    fn lr_schedule_steps_at_milestones() {
        let s = LrSchedule {
            initial: 0.1,
            milestones: vec![0.5, 0.75],
            factor: 0.1,
        };
        s.validate().unwrap();
        assert_eq!(s.at(0, 8), 0.1);
        assert!((s.at(4, 8) - 0.01).abs() < 1e-15);
        assert!((s.at(6, 8) - 0.001).abs() < 1e-15);
        let bad = LrSchedule {
            milestones: vec![0.75, 0.5],
            ..s.clone()
        };
        assert!(bad.validate().is_err());
        assert!(LrSchedule::constant(0.0).validate().is_err());
    }

    #[test]
    fn uniform_predictor_has_perplexity_c() {
        // zero classifier weights give uniform logits over 4 classes
        let spec = ModelSpec {
            input: crate::model::InputSpec::Features { dim: 3 },
            layers: vec![crate::model::LayerSpec::Dense {
                inputs: 3,
                outputs: 4,
                in_groups: 1,
                out_groups: 1,
                rescale: false,
            }],
        };
        let mut model = Model::new(spec, 0).unwrap();
        for p in model.store_mut().iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let ds = Dataset::Labeled(data::Labeled {
            inputs: Tensor::new([4, 3], vec![1.0; 12]).unwrap(),
            labels: vec![0, 1, 2, 3],
            classes: 4,
        });
        let m = evaluate(&model, SliceRate::FULL, &ds).unwrap();
        assert!((m.perplexity - 4.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let spec = ModelSpec {
            input: crate::model::InputSpec::Features { dim: 2 },
            layers: vec![crate::model::LayerSpec::Dense {
                inputs: 2,
                outputs: 2,
                in_groups: 1,
                out_groups: 1,
                rescale: false,
            }],
        };
        let mut model = Model::new(spec, 0).unwrap();
        let w = model.store().find("l0.dense.weight").unwrap();
        *model.store_mut().value_mut(w) = Tensor::new([2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        let b = model.store().find("l0.dense.bias").unwrap();
        model.store_mut().value_mut(b).data_mut().fill(0.0);
        let ds = Dataset::Labeled(data::Labeled {
            inputs: Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            labels: vec![0, 1],
            classes: 2,
        });
        assert_eq!(
            evaluate(&model, SliceRate::FULL, &ds).unwrap().accuracy,
            1.0
        );
        let empty = Dataset::Labeled(data::Labeled {
            inputs: Tensor::new([0, 2], vec![]).unwrap(),
            labels: vec![],
            classes: 2,
        });
        assert!(matches!(
            evaluate(&model, SliceRate::FULL, &empty),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn accumulation_is_sum_of_individual_gradients() {
        let spec = ModelSpec::mlp(2, &[8, 8], 2, 4);
        let mut model = Model::new(spec, 3).unwrap();
        let ds = Dataset::Labeled(data::spirals(16, 1));
        let batch = ds.batch(&(0..16).collect::<Vec<_>>()).unwrap();
        let grads = |m: &mut Model, rates: &[SliceRate]| {
            accumulate_gradients(m, &batch, rates, |_| 1.0, None).unwrap();
            m.store()
                .iter()
                .map(|(_, p)| p.grad.clone())
                .collect::<Vec<_>>()
        };
        let both = grads(&mut model, &[rate(1.0), rate(0.5)]);
        let full = grads(&mut model, &[rate(1.0)]);
        let half = grads(&mut model, &[rate(0.5)]);
        for ((b, f), h) in both.iter().zip(&full).zip(&half) {
            for i in 0..b.len() {
                assert!((b[i] - (f[i] + h[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameters_outside_subnet_are_not_updated() {
        let spec = ModelSpec::mlp(2, &[8, 8], 2, 4);
        let mut model = Model::new(spec, 3).unwrap();
        let before = model.store().clone();
        let ds = Dataset::Labeled(data::spirals(16, 1));
        let batch = ds.batch(&(0..16).collect::<Vec<_>>()).unwrap();
        let mut opt = Sgd::new(model.store(), 0.9, 0.0, WeightDecayMode::All);
        train_step(
            &mut model,
            &batch,
            &[rate(0.5)],
            |_| 1.0,
            &mut opt,
            0.1,
            None,
        )
        .unwrap();
        // hidden layer 1 weight [8 x 8]: rows and columns 4.. lie outside Subnet-0.5
        let id = model.store().find("l3.dense.weight").unwrap();
        let (old, new) = (before.value(id).data(), model.store().value(id).data());
        let mut moved_inside = false;
        for o in 0..8 {
            for i in 0..8 {
                let k = o * 8 + i;
                if o >= 4 || i >= 4 {
                    assert_eq!(old[k], new[k]);
                } else {
                    moved_inside |= old[k] != new[k];
                }
            }
        }
        assert!(moved_inside);
    }

    #[test]
    fn non_finite_loss_reports_rate() {
        let spec = ModelSpec::mlp(2, &[8], 2, 4);
        let mut model = Model::new(spec, 0).unwrap();
        let batch = Batch {
            inputs: Inputs::Features(Tensor::new([1, 2], vec![f64::NAN, 0.0]).unwrap()),
            targets: vec![0],
        };
        let err =
            accumulate_gradients(&mut model, &batch, &[rate(0.5)], |_| 1.0, None).unwrap_err();
        assert!(matches!(err, Error::Training { rate, .. } if rate == 0.5));
    }

    fn config(scheme: &str) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 32,
            lr: LrSchedule::constant(0.05),
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_mode: WeightDecayMode::All,
            seed: 11,
            scheme: scheme.into(),
            rates: vec![0.25, 0.5, 0.75, 1.0],
            loss_weights: None,
            average_over_rates: false,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let ds = data::generate(Task::Spirals, 4, 128, 0).unwrap();
        let run = || {
            let mut model = Model::new(ModelSpec::mlp(2, &[16, 16], 2, 4), 5).unwrap();
            let mut t = Trainer::new(&model, config("r-weighted-3")).unwrap();
            t.fit(&mut model, &ds, &ds, |_, _, _| Ok(())).unwrap();
            model
                .store()
                .iter()
                .flat_map(|(_, p)| p.value.data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fit_emits_row_per_epoch_and_rate() {
        let ds = data::generate(Task::Spirals, 4, 64, 0).unwrap();
        let mut model = Model::new(ModelSpec::mlp(2, &[8], 2, 4), 5).unwrap();
        let mut t = Trainer::new(&model, config("static")).unwrap();
        let rows = t.fit(&mut model, &ds, &ds, |_, _, _| Ok(())).unwrap();
        assert_eq!(rows.len(), 2 * 4);
        assert_eq!(rows[0].rate, 1.0);
        assert!(rows.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn bad_config_rejected() {
        let model = Model::new(ModelSpec::mlp(2, &[8], 2, 4), 5).unwrap();
        let mut c = config("r-bogus");
        assert!(matches!(
            Trainer::new(&model, c.clone()),
            Err(Error::Config(_))
        ));
        c.scheme = "static".into();
        c.loss_weights = Some(vec![1.0]);
        assert!(Trainer::new(&model, c).is_err());
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let ds = data::generate(Task::Spirals, 4, 96, 0).unwrap();
        let spec = ModelSpec::mlp(2, &[8, 8], 2, 4);
        let mut c = config("r-uniform-2");
        c.epochs = 4;
        let mut straight = Model::new(spec.clone(), 1).unwrap();
        Trainer::new(&straight, c.clone())
            .unwrap()
            .fit(&mut straight, &ds, &ds, |_, _, _| Ok(()))
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = Model::new(spec, 1).unwrap();
        let mut t = Trainer::new(
            &first,
            TrainConfig {
                epochs: 2,
                ..c.clone()
            },
        )
        .unwrap();
        t.fit(&mut first, &ds, &ds, |_, _, _| Ok(())).unwrap();
        crate::checkpoint::save(dir.path(), &first, Some(&t.training_state())).unwrap();
        let (mut resumed, state) = crate::checkpoint::load(dir.path()).unwrap();
        let mut t = Trainer::new(&resumed, c).unwrap();
        t.restore(state.unwrap()).unwrap();
        t.fit(&mut resumed, &ds, &ds, |_, _, _| Ok(())).unwrap();
        for ((_, a), (_, b)) in straight.store().iter().zip(resumed.store().iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}
