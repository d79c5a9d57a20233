//! Finite-difference gradient checks shared by the integration tests.

#![allow(dead_code)]

use std::ops::Range;

use modelslice::{ParamId, ParamStore, Result, SliceRate, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;

pub fn rate(r: f64) -> SliceRate {
    SliceRate::new(r).unwrap()
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds a scalar loss from the given inputs; returns the loss and the
/// recorded input variables in the same order.
pub type Objective<'a> = dyn Fn(&mut Tape, &ParamStore, &[Tensor]) -> Result<(Var, Vec<Var>)> + 'a;

/// Projects `y` onto fixed random weights so every output element matters.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = random(tape.shape(y), seed);
    let w = tape.input(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Worst mismatch between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn loss_value(store: &ParamStore, inputs: &[Tensor], f: &Objective) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = f(&mut tape, store, inputs).unwrap();
    tape.value(loss).item()
}

/// Compares the tape's gradients with central differences for every
/// parameter element and every input element.
pub fn check_gradients(store: &mut ParamStore, inputs: &mut [Tensor], f: &Objective) -> GradCheck {
    store.zero_grad();
    let mut tape = Tape::new();
    let (loss, vars) = f(&mut tape, store, inputs).unwrap();
    let grads = tape.backward(loss, store).unwrap();
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs.iter())
        .map(|(v, x)| grads.get(*v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect();

    let mut out = GradCheck::default();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store.grad(id).to_vec();
        for (i, a) in analytic.into_iter().enumerate() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = loss_value(store, inputs, f);
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = loss_value(store, inputs, f);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            out.max_rel_error = out.max_rel_error.max(rel_error(a, numeric));
            out.checked += 1;
        }
    }
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + FD_STEP;
            let up = loss_value(store, inputs, f);
            inputs[k].data_mut()[i] = orig - FD_STEP;
            let down = loss_value(store, inputs, f);
            inputs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = input_grads[k].data()[i];
            out.max_rel_error = out.max_rel_error.max(rel_error(a, numeric));
            out.checked += 1;
        }
    }
    out
}

/// Row-major membership mask of a per-axis block selection.
pub fn block_mask(shape: &[usize], selection: &[Vec<Range<usize>>]) -> Vec<bool> {
    let n: usize = shape.iter().product();
    let mut mask = vec![false; n];
    let mut index = vec![0; shape.len()];
    for flag in mask.iter_mut() {
        *flag = index
            .iter()
            .zip(selection)
            .all(|(i, ranges)| ranges.iter().any(|r| r.contains(i)));
        for axis in (0..shape.len()).rev() {
            index[axis] += 1;
            if index[axis] < shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    mask
}

/// Runs one backward pass and reports whether every gradient outside the
/// active blocks is exactly zero.
pub fn outside_slice_is_zero(
    store: &mut ParamStore,
    inputs: &[Tensor],
    f: &Objective,
    active: &[(ParamId, Vec<bool>)],
) -> bool {
    store.zero_grad();
    let mut tape = Tape::new();
    let (loss, _) = f(&mut tape, store, inputs).unwrap();
    tape.backward(loss, store).unwrap();
    active.iter().all(|(id, mask)| {
        let p = store.get(*id);
        p.grad
            .iter()
            .zip(mask)
            .zip(&p.touched)
            .all(|((g, inside), t)| *inside || (*g == 0.0 && !*t))
    })
}

/// Overwrites every inactive element with NaN, then checks that the loss
/// and all gradients stay finite.
pub fn survives_poisoning(
    store: &ParamStore,
    inputs: &[Tensor],
    f: &Objective,
    active: &[(ParamId, Vec<bool>)],
) -> bool {
    let mut poisoned = store.clone();
    for (id, mask) in active {
        for (v, inside) in poisoned.value_mut(*id).data_mut().iter_mut().zip(mask) {
            if !inside {
                *v = f64::NAN;
            }
        }
    }
    poisoned.zero_grad();
    let mut tape = Tape::new();
    let (loss, vars) = f(&mut tape, &poisoned, inputs).unwrap();
    if !tape.value(loss).all_finite() {
        return false;
    }
    let grads = tape.backward(loss, &mut poisoned).unwrap();
    let inputs_ok = vars
        .iter()
        .all(|v| grads.get(*v).is_none_or(|g| g.all_finite()));
    let params_ok = active
        .iter()
        .all(|(id, mask)| {
            poisoned
                .grad(*id)
                .iter()
                .zip(mask)
                .all(|(g, inside)| !inside || g.is_finite())
        });
    inputs_ok && params_ok
}

/// One sliced layer wired into a scalar objective at a fixed rate.
pub struct LayerCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub inputs: Vec<Tensor>,
    pub objective: Box<Objective<'static>>,
    /// Per-parameter mask of the elements Subnet-`r` reads.
    pub active: Vec<(ParamId, Vec<bool>)>,
}

impl LayerCase {
    pub fn gradients(&mut self) -> GradCheck {
        check_gradients(&mut self.store, &mut self.inputs, &*self.objective)
    }

    pub fn outside_slice_is_zero(&mut self) -> bool {
        outside_slice_is_zero(&mut self.store, &self.inputs, &*self.objective, &self.active)
    }

    pub fn survives_poisoning(&self) -> bool {
        survives_poisoning(&self.store, &self.inputs, &*self.objective, &self.active)
    }
}

fn mask_of(store: &ParamStore, id: ParamId, selection: &[Vec<Range<usize>>]) -> (ParamId, Vec<bool>) {
    (id, block_mask(store.value(id).shape(), selection))
}

fn spec(total: usize, groups: usize) -> modelslice::GroupSpec {
    modelslice::GroupSpec::new(total, groups).unwrap()
}

/// Every sliced layer kind (plus variants) at rate `r`, seeded by `seed`.
pub fn layer_cases(r: SliceRate, seed: u64) -> Vec<LayerCase> {
    use modelslice::slicing::{
        SlicedConv2d, SlicedDense, SlicedEmbedding, SlicedGroupNorm, SlicedLstm,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    for (name, rescale) in [("dense", false), ("dense_rescaled", true)] {
        let mut store = ParamStore::new();
        let (i_spec, o_spec) = (spec(8, 4), spec(12, 4));
        let layer = SlicedDense::new(&mut store, "d", i_spec, o_spec, rescale, &mut rng);
        // nonzero bias so its gradient path is exercised
        store.value_mut(layer.bias).data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
        let (g_in, g_out) = layer.widths(r, r);
        let active = vec![
            mask_of(&store, layer.weight, &[vec![0..g_out], vec![0..g_in]]),
            mask_of(&store, layer.bias, &[vec![0..g_out]]),
        ];
        cases.push(LayerCase {
            name,
            store,
            inputs: vec![random(&[3, g_in], seed + 1)],
            objective: Box::new(move |tape, store, inputs| {
                let x = tape.input(inputs[0].clone());
                let y = layer.forward(tape, store, x, r, r)?;
                Ok((project(tape, y, 11)?, vec![x]))
            }),
            active,
        });
    }

    for (name, stride, padding) in [("conv2d", 1, 1), ("conv2d_strided", 2, 0)] {
        let mut store = ParamStore::new();
        let layer =
            SlicedConv2d::new(&mut store, "c", spec(4, 4), spec(8, 4), 3, stride, padding, &mut rng)
                .unwrap();
        let (g_in, g_out) = (layer.in_spec.boundary(r), layer.out_spec.boundary(r));
        let active = vec![
            mask_of(&store, layer.kernels, &[vec![0..g_out], vec![0..g_in], vec![0..3], vec![0..3]]),
            mask_of(&store, layer.bias, &[vec![0..g_out]]),
        ];
        cases.push(LayerCase {
            name,
            store,
            inputs: vec![random(&[2, g_in, 5, 5], seed + 2)],
            objective: Box::new(move |tape, store, inputs| {
                let x = tape.input(inputs[0].clone());
                let y = layer.forward(tape, store, x, r, r)?;
                Ok((project(tape, y, 12)?, vec![x]))
            }),
            active,
        });
    }

    for (name, shape) in [("group_norm", vec![3]), ("group_norm_spatial", vec![2, 3, 3])] {
        let mut store = ParamStore::new();
        let layer = SlicedGroupNorm::new(&mut store, "n", spec(8, 4), 1e-5).unwrap();
        for (id, base) in [(layer.gamma, 1.0), (layer.beta, 0.0)] {
            let noise = random(&[8], seed + 3);
            for (v, e) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
                *v = base + 0.3 * e;
            }
        }
        let g = layer.spec.boundary(r);
        let mut full = vec![shape[0], g];
        full.extend(&shape[1..]);
        let active = vec![
            mask_of(&store, layer.gamma, &[vec![0..g]]),
            mask_of(&store, layer.beta, &[vec![0..g]]),
        ];
        cases.push(LayerCase {
            name,
            store,
            inputs: vec![random(&full, seed + 4)],
            objective: Box::new(move |tape, store, inputs| {
                let x = tape.input(inputs[0].clone());
                let y = layer.forward(tape, store, x, r)?;
                Ok((project(tape, y, 13)?, vec![x]))
            }),
            active,
        });
    }

    {
        let mut store = ParamStore::new();
        let layer = SlicedLstm::new(&mut store, "l", spec(4, 4), spec(8, 4), &mut rng);
        let (g_in, g_h) = (layer.in_spec.boundary(r), layer.hidden_spec.boundary(r));
        let rows = layer.gate_rows(g_h);
        let active = vec![
            mask_of(&store, layer.w_ih, &[rows.clone(), vec![0..g_in]]),
            mask_of(&store, layer.w_hh, &[rows.clone(), vec![0..g_h]]),
            mask_of(&store, layer.bias, &[rows]),
        ];
        cases.push(LayerCase {
            name: "lstm",
            store,
            inputs: vec![
                random(&[2, g_in], seed + 5),
                random(&[2, g_in], seed + 6),
                random(&[2, g_h], seed + 7),
                random(&[2, g_h], seed + 8),
            ],
            objective: Box::new(move |tape, store, inputs| {
                let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
                let (h1, c1) = layer.step(tape, store, vars[0], vars[2], vars[3], r)?;
                let (h2, c2) = layer.step(tape, store, vars[1], h1, c1, r)?;
                let lh = project(tape, h2, 14)?;
                let lc = project(tape, c2, 15)?;
                Ok((tape.add(lh, lc)?, vars))
            }),
            active,
        });
    }

    {
        let mut store = ParamStore::new();
        let layer = SlicedEmbedding::new(&mut store, "e", 5, spec(8, 4), &mut rng);
        let g = layer.out_spec.boundary(r);
        let active = vec![mask_of(&store, layer.table, &[vec![0..5], vec![0..g]])];
        cases.push(LayerCase {
            name: "embedding",
            store,
            inputs: Vec::new(),
            objective: Box::new(move |tape, store, _| {
                let y = layer.forward(tape, store, &[0, 3, 3, 1], r)?;
                Ok((project(tape, y, 16)?, Vec::new()))
            }),
            active,
        });
    }
    cases
}
