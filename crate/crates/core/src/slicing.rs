//! Width-sliceable layers.
//!
//! Each layer keeps its full-width parameters and a [`GroupSpec`] per sliced
//! axis. A forward pass at slice rate `r` reads only the leading groups
//! selected by `r`; nothing outside that prefix is touched, and gradients
//! only flow back into it.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// A slice rate in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SliceRate(f64);

impl SliceRate {
    pub const FULL: SliceRate = SliceRate(1.0);

    pub fn new(r: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!("slice rate {r} is outside (0, 1]")));
        }
        Ok(Self(r))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for SliceRate {
    type Error = Error;

    fn try_from(r: f64) -> Result<Self> {
        Self::new(r)
    }
}

impl From<SliceRate> for f64 {
    fn from(r: SliceRate) -> f64 {
        r.0
    }
}

impl fmt::Display for SliceRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Uniform partition of `total` components into `groups` ordered groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    total: usize,
    groups: usize,
}

impl GroupSpec {
    pub fn new(total: usize, groups: usize) -> Result<Self> {
        if total == 0 || groups == 0 {
            return Err(Error::Config(format!(
                "group spec needs positive width and group count, got M={total}, G={groups}"
            )));
        }
        if total % groups != 0 {
            return Err(Error::Config(format!(
                "width {total} is not divisible into {groups} equal groups"
            )));
        }
        Ok(Self { total, groups })
    }

    /// A single group: the layer is never narrowed.
    pub fn unsliced(total: usize) -> Self {
        Self { total, groups: 1 }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_size(&self) -> usize {
        self.total / self.groups
    }

    pub fn boundaries(&self) -> Vec<usize> {
        (1..=self.groups).map(|i| i * self.group_size()).collect()
    }

    /// `g_i / M` for every boundary.
    pub fn rates(&self) -> Vec<f64> {
        self.boundaries()
            .into_iter()
            .map(|g| g as f64 / self.total as f64)
            .collect()
    }

    pub fn is_boundary(&self, width: usize) -> bool {
        width > 0 && width <= self.total && width % self.group_size() == 0
    }

    /// Active width at rate `r`: the largest boundary not above
    /// `round(r * M)`, never below the first group.
    pub fn boundary(&self, r: SliceRate) -> usize {
        let target = (r.get() * self.total as f64).round() as usize;
        let size = self.group_size();
        ((target / size) * size).clamp(size, self.total)
    }

    /// Whether `r` lands exactly on a boundary of this spec.
    pub fn is_exact(&self, r: SliceRate) -> bool {
        self.boundary(r) as f64 == r.get() * self.total as f64
    }
}

/// `slice_boundary` on a raw rate, validating it first.
pub fn slice_boundary(spec: &GroupSpec, r: f64) -> Result<usize> {
    Ok(spec.boundary(SliceRate::new(r)?))
}

fn check_width(actual: usize, expected: usize, what: &str) -> Result<()> {
    if actual != expected {
        return Err(Error::Dimension(format!(
            "{what}: expected width {expected}, got {actual}"
        )));
    }
    Ok(())
}

fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Debug)]
pub struct SlicedDense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_spec: GroupSpec,
    pub out_spec: GroupSpec,
    pub rescale: bool,
}

impl SlicedDense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_spec: GroupSpec,
        out_spec: GroupSpec,
        rescale: bool,
        rng: &mut R,
    ) -> Self {
        let (m, n) = (in_spec.total(), out_spec.total());
        let std = (2.0 / m as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), normal_tensor(&[n, m], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([n]));
        Self {
            weight,
            bias,
            in_spec,
            out_spec,
            rescale,
        }
    }

    pub fn widths(&self, r_in: SliceRate, r_out: SliceRate) -> (usize, usize) {
        (self.in_spec.boundary(r_in), self.out_spec.boundary(r_out))
    }

    /// `x` is `[B, g_in]`; returns `[B, g_out]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        r_in: SliceRate,
        r_out: SliceRate,
    ) -> Result<Var> {
        let (g_in, g_out) = self.widths(r_in, r_out);
        let (_, width) = tape.value(x).dims2()?;
        check_width(width, g_in, "dense input")?;
        let w = tape.param_block(store, self.weight, &[vec![0..g_out], vec![0..g_in]])?;
        let wt = tape.transpose(w)?;
        let mut y = tape.matmul(x, wt)?;
        if self.rescale {
            y = tape.scale(y, self.in_spec.total() as f64 / g_in as f64);
        }
        let b = tape.param_block(store, self.bias, &[vec![0..g_out]])?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct SlicedConv2d {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_spec: GroupSpec,
    pub out_spec: GroupSpec,
}

impl SlicedConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_spec: GroupSpec,
        out_spec: GroupSpec,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel extent {kernel} must be odd")));
        }
        let (m, n) = (in_spec.total(), out_spec.total());
        let std = (2.0 / (m * kernel * kernel) as f64).sqrt();
        let kernels = store.add(
            format!("{name}.kernels"),
            normal_tensor(&[n, m, kernel, kernel], std, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([n]));
        Ok(Self {
            kernels,
            bias,
            kernel,
            stride,
            padding,
            in_spec,
            out_spec,
        })
    }

    /// `x` is `[B, g_in, H, W]`; spatial kernel extents are never sliced.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        r_in: SliceRate,
        r_out: SliceRate,
    ) -> Result<Var> {
        let (g_in, g_out) = (self.in_spec.boundary(r_in), self.out_spec.boundary(r_out));
        let (_, c, _, _) = tape.value(x).dims4()?;
        check_width(c, g_in, "conv input channels")?;
        let k = self.kernel;
        let ker = tape.param_block(
            store,
            self.kernels,
            &[vec![0..g_out], vec![0..g_in], vec![0..k], vec![0..k]],
        )?;
        let b = tape.param_block(store, self.bias, &[vec![0..g_out]])?;
        tape.conv2d(x, ker, Some(b), self.stride, self.padding)
    }
}

/// Group normalization whose statistics groups coincide with the slicing
/// groups, so every active group is normalized independently of the rest.
#[derive(Clone, Debug)]
pub struct SlicedGroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub spec: GroupSpec,
    pub eps: f64,
}

impl SlicedGroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, spec: GroupSpec, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!(
                "group norm epsilon must be positive, got {eps}"
            )));
        }
        let m = spec.total();
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([m], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([m]));
        Ok(Self {
            gamma,
            beta,
            spec,
            eps,
        })
    }

    /// `x` is `[B, g]` or `[B, g, H, W]` with `g` the active width at `r`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        r: SliceRate,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() < 2 {
            return Err(Error::Dimension(format!(
                "group norm needs [B, C, ...], got {shape:?}"
            )));
        }
        let g = shape[1];
        if !self.spec.is_boundary(g) {
            return Err(Error::Config(format!(
                "width {g} is not a group boundary of {:?}",
                self.spec
            )));
        }
        check_width(g, self.spec.boundary(r), "group norm input")?;
        let gamma = tape.param_block(store, self.gamma, &[vec![0..g]])?;
        let beta = tape.param_block(store, self.beta, &[vec![0..g]])?;
        tape.group_norm(x, gamma, beta, self.spec.group_size(), self.eps)
    }
}

/// LSTM cell. Gate rows are stored as `[input, forget, cell, output]`
/// blocks of `H`; slicing keeps the leading `g_h` rows of each block.
#[derive(Clone, Debug)]
pub struct SlicedLstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub in_spec: GroupSpec,
    pub hidden_spec: GroupSpec,
}

impl SlicedLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_spec: GroupSpec,
        hidden_spec: GroupSpec,
        rng: &mut R,
    ) -> Self {
        let (m, h) = (in_spec.total(), hidden_spec.total());
        let bound = 1.0 / (h as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let mut uniform = |shape: [usize; 2]| {
            let n = shape[0] * shape[1];
            Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
        };
        let w_ih = uniform([4 * h, m]);
        let w_hh = uniform([4 * h, h]);
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].fill(1.0);
        let w_ih = store.add(format!("{name}.w_ih"), w_ih);
        let w_hh = store.add(format!("{name}.w_hh"), w_hh);
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::new([4 * h], b).expect("shape"),
        );
        Self {
            w_ih,
            w_hh,
            bias,
            in_spec,
            hidden_spec,
        }
    }

    pub fn gate_rows(&self, g_h: usize) -> Vec<Range<usize>> {
        let h = self.hidden_spec.total();
        (0..4).map(|k| k * h..k * h + g_h).collect()
    }

    /// One time step. `x` is `[B, g_in]`, `h_prev` and `c_prev` are `[B, g_h]`.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        r: SliceRate,
    ) -> Result<(Var, Var)> {
        let g_in = self.in_spec.boundary(r);
        let g_h = self.hidden_spec.boundary(r);
        let (bx, wx) = tape.value(x).dims2()?;
        let (bh, wh) = tape.value(h_prev).dims2()?;
        let (bc, wc) = tape.value(c_prev).dims2()?;
        if bx != bh || bx != bc || wh != wc {
            return Err(Error::Dimension(format!(
                "lstm step: mixed shapes x [{bx}, {wx}], h [{bh}, {wh}], c [{bc}, {wc}]"
            )));
        }
        check_width(wx, g_in, "lstm input")?;
        check_width(wh, g_h, "lstm hidden state")?;

        let rows = self.gate_rows(g_h);
        let w_ih = tape.param_block(store, self.w_ih, &[rows.clone(), vec![0..g_in]])?;
        let w_hh = tape.param_block(store, self.w_hh, &[rows.clone(), vec![0..g_h]])?;
        let bias = tape.param_block(store, self.bias, &[rows])?;
        let w_ih_t = tape.transpose(w_ih)?;
        let w_hh_t = tape.transpose(w_hh)?;
        let from_x = tape.matmul(x, w_ih_t)?;
        let from_h = tape.matmul(h_prev, w_hh_t)?;
        let pre = tape.add(from_x, from_h)?;
        let pre = tape.add_row(pre, bias)?;

        let gate = |tape: &mut Tape, k: usize| tape.columns(pre, k * g_h, g_h);
        let (i, f, c, o) = (
            gate(tape, 0)?,
            gate(tape, 1)?,
            gate(tape, 2)?,
            gate(tape, 3)?,
        );
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let c = tape.tanh(c);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, c)?;
        let c_t = tape.add(keep, write)?;
        let squashed = tape.tanh(c_t);
        let h_t = tape.mul(o, squashed)?;
        Ok((h_t, c_t))
    }
}

/// Token embedding table `[V, D]`; optionally sliced along `D`.
#[derive(Clone, Debug)]
pub struct SlicedEmbedding {
    pub table: ParamId,
    pub vocab: usize,
    pub out_spec: GroupSpec,
}

impl SlicedEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        out_spec: GroupSpec,
        rng: &mut R,
    ) -> Self {
        let table = store.add(
            format!("{name}.table"),
            normal_tensor(&[vocab, out_spec.total()], 1.0, rng),
        );
        Self {
            table,
            vocab,
            out_spec,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        r: SliceRate,
    ) -> Result<Var> {
        let g = self.out_spec.boundary(r);
        let t = tape.param_block(store, self.table, &[vec![0..self.vocab], vec![0..g]])?;
        tape.embed_rows(t, ids)
    }
}
