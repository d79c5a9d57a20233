//! Reverse-mode automatic differentiation over a linear recording.
//!
//! A [`Tape`] records every operation in creation order; [`Tape::backward`]
//! walks it once in reverse. Trainable parameters live in a [`ParamStore`]
//! and enter a recording through [`Tape::param_block`], which copies only
//! the selected index block. Gradients for that block are scattered back and
//! *added* to the store, so several backward passes (one per scheduled
//! subnet) accumulate into the same slots.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Elements that received a gradient contribution since the last `zero_grad`.
    pub touched: Vec<bool>,
}

/// Owner of all trainable tensors of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let n = value.len();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: vec![0.0; n],
            touched: vec![false; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.touched.fill(false);
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Input,
    Param {
        id: ParamId,
        indices: Vec<usize>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Unary(Pointwise, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        group_size: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Columns {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    EmbedRows {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("grad shape"))
    }
}

/// A single-writer recording of operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a constant (no gradient is propagated to a store).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a whole parameter tensor.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let indices = (0..value.len()).collect();
        self.push(value, Op::Param { id, indices })
    }

    /// Records the block of a parameter picked by per-axis ranges. Only the
    /// selected elements are read; gradients scatter back to exactly them.
    pub fn param_block(
        &mut self,
        store: &ParamStore,
        id: ParamId,
        selection: &[Vec<Range<usize>>],
    ) -> Result<Var> {
        let full = store.value(id);
        let indices = tensor::block_indices(full.shape(), selection)?;
        let shape: Vec<usize> = selection
            .iter()
            .map(|rs| rs.iter().map(|r| r.len()).sum())
            .collect();
        let data = indices.iter().map(|&i| full.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Param { id, indices }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        what: &str,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            return Ok((Tensor::new(ta.shape().to_vec(), data)?, false));
        }
        if tb.is_scalar() {
            let s = tb.item();
            let data = ta.data().iter().map(|x| f(*x, s)).collect();
            return Ok((Tensor::new(ta.shape().to_vec(), data)?, true));
        }
        if ta.is_scalar() {
            let s = ta.item();
            let data = tb.data().iter().map(|y| f(s, *y)).collect();
            return Ok((Tensor::new(tb.shape().to_vec(), data)?, true));
        }
        Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} are incompatible",
            ta.shape(),
            tb.shape()
        )))
    }

    /// Elementwise sum; operands must share a shape or one must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary(a, b, |x, y| x + y, "add")?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product; operands must share a shape or one must be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, _) = self.binary(a, b, |x, y| x * y, "mul")?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, factor))
    }

    /// Adds a length-N vector to every row of a `[B, N]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (b, n) = self.value(x).dims2()?;
        let r = self.value(row);
        if r.len() != n || r.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "row vector {:?} does not match matrix width {n}",
                r.shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for i in 0..b {
            for (d, v) in data[i * n..(i + 1) * n].iter_mut().zip(r.data()) {
                *d += v;
            }
        }
        Ok(self.push(Tensor::new([b, n], data)?, Op::AddRow(x, row)))
    }

    pub fn unary(&mut self, kind: Pointwise, a: Var) -> Var {
        let t = self.value(a);
        let f: fn(f64) -> f64 = match kind {
            Pointwise::Relu => |v| if v < 0.0 { 0.0 } else { v },
            Pointwise::Sigmoid => sigmoid,
            Pointwise::Tanh => f64::tanh,
        };
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Unary(kind, a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Pointwise::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Pointwise::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Pointwise::Tanh, a)
    }

    /// Batched cross-correlation: `[B, C, H, W]` by `[N, C, k, k]` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernels), stride, padding)?;
        let bias_data = match bias {
            Some(b) => {
                let t = self.value(b);
                if t.len() != geom.out_channels {
                    return Err(Error::Dimension(format!(
                        "conv bias has {} entries for {} output channels",
                        t.len(),
                        geom.out_channels
                    )));
                }
                Some(t.data().to_vec())
            }
            None => None,
        };
        let data = tensor::conv2d_raw(
            self.value(input).data(),
            self.value(kernels).data(),
            bias_data.as_deref(),
            &geom,
        );
        let value = Tensor::new(
            [
                geom.batch,
                geom.out_channels,
                geom.out_height,
                geom.out_width,
            ],
            data,
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            },
        ))
    }

    /// Per-sample normalization over consecutive channel groups of
    /// `group_size`, followed by a per-channel affine map. Input is `[B, C]`
    /// or `[B, C, ...spatial]`.
    pub fn group_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        group_size: usize,
        eps: f64,
    ) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!(
                "group_norm needs [B, C, ...], got {shape:?}"
            )));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if group_size == 0 || channels % group_size != 0 {
            return Err(Error::Config(format!(
                "{channels} channels do not split into groups of {group_size}"
            )));
        }
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            return Err(Error::Dimension(format!(
                "affine parameters must have {channels} entries"
            )));
        }
        let groups = channels / group_size;
        let count = (group_size * spatial) as f64;
        let xd = x.data();
        let mut normalized = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; batch * groups];
        for b in 0..batch {
            for g in 0..groups {
                let start = (b * channels + g * group_size) * spatial;
                let seg = &xd[start..start + group_size * spatial];
                let mean = seg.iter().sum::<f64>() / count;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[b * groups + g] = inv;
                for (o, v) in normalized[start..start + seg.len()].iter_mut().zip(seg) {
                    *o = (v - mean) * inv;
                }
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = normalized.clone();
        for b in 0..batch {
            for c in 0..channels {
                let start = (b * channels + c) * spatial;
                for o in &mut out[start..start + spatial] {
                    *o = gd[c] * *o + bd[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                group_size,
                normalized,
                inv_std,
            },
        ))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] || (x[i].is_nan() && !x[best].is_nan()) {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([b, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }))
    }

    /// Mean over spatial positions: `[B, C, H, W]` to `[B, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        let hw = h * w;
        let data = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(Tensor::new([b, c], data)?, Op::GlobalAvgPool(input)))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// Columns `start..start+len` of a `[B, N]` matrix.
    pub fn columns(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(input).narrow(1, start..start + len)?;
        if value.shape().len() != 2 {
            return Err(Error::Dimension("columns expects a 2-D input".into()));
        }
        Ok(self.push(value, Op::Columns { input, start }))
    }

    /// Stacks `[B_i, N]` matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        for t in &tensors {
            t.dims2()?;
        }
        let value = Tensor::concat(&tensors, 0)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Looks up rows of a `[V, D]` table.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Data(format!(
                    "token id {id} outside vocabulary of {v}"
                )));
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[labels[i]];
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Differentiates the scalar `loss` and adds parameter adjoints into
    /// `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0, store)
    }

    /// Like [`Tape::backward`] with the seed adjoint set to `seed`.
    pub fn backward_scaled(
        &self,
        loss: Var,
        seed: f64,
        store: &mut ParamStore,
    ) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "loss node does not belong to this recording".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads, store);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let len = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| self.nodes[v.0].value.data();

        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Param { id, indices } => {
                let p = store.get_mut(*id);
                for (k, &i) in indices.iter().enumerate() {
                    p.grad[i] += g[k];
                    p.touched[i] = true;
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().unwrap();
                let m = self.value(*b).shape()[1];
                // dA = G Bᵀ, dB = Aᵀ G
                let bt = tensor::transpose_raw(val(*b), k, m);
                let da = tensor::matmul_raw(g, &bt, n, m, k);
                let at = tensor::transpose_raw(val(*a), n, k);
                let db = tensor::matmul_raw(&at, g, k, n, m);
                for (d, v) in acc(grads, *a, n * k).iter_mut().zip(da) {
                    *d += v;
                }
                for (d, v) in acc(grads, *b, k * m).iter_mut().zip(db) {
                    *d += v;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let gt = tensor::transpose_raw(g, c, r);
                for (d, v) in acc(grads, *a, r * c).iter_mut().zip(gt) {
                    *d += v;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let n = len(v);
                    let dst = acc(grads, v, n);
                    if n == g.len() {
                        dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    } else {
                        dst[0] += g.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let n = len(v);
                    let o = val(other);
                    let contrib: Vec<f64> = if o.len() == g.len() {
                        g.iter().zip(o).map(|(x, y)| x * y).collect()
                    } else {
                        g.iter().map(|x| x * o[0]).collect()
                    };
                    let dst = acc(grads, v, n);
                    if n == g.len() {
                        dst.iter_mut().zip(contrib).for_each(|(d, x)| *d += x);
                    } else {
                        dst[0] += contrib.iter().sum::<f64>();
                    }
                }
            }
            Op::Scale(a, f) => {
                let dst = acc(grads, *a, g.len());
                dst.iter_mut().zip(g).for_each(|(d, x)| *d += x * f);
            }
            Op::AddRow(x, row) => {
                let n = len(*row);
                acc(grads, *x, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
                let dr = acc(grads, *row, n);
                for chunk in g.chunks(n) {
                    dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
            }
            Op::Unary(kind, a) => {
                let out = self.nodes[idx].value.data();
                let x = val(*a);
                let dst = acc(grads, *a, g.len());
                for i in 0..g.len() {
                    let local = match kind {
                        Pointwise::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Pointwise::Sigmoid => out[i] * (1.0 - out[i]),
                        Pointwise::Tanh => 1.0 - out[i] * out[i],
                    };
                    dst[i] += g[i] * local;
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            } => {
                let (dx, dk) = tensor::conv2d_backward_raw(val(*input), val(*kernels), g, geom);
                acc(grads, *input, dx.len())
                    .iter_mut()
                    .zip(dx)
                    .for_each(|(d, v)| *d += v);
                acc(grads, *kernels, dk.len())
                    .iter_mut()
                    .zip(dk)
                    .for_each(|(d, v)| *d += v);
                if let Some(b) = bias {
                    let hw = geom.out_height * geom.out_width;
                    let db = acc(grads, *b, geom.out_channels);
                    for (plane, chunk) in g.chunks(hw).enumerate() {
                        db[plane % geom.out_channels] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                group_size,
                normalized,
                inv_std,
            } => {
                let shape = self.value(*input).shape();
                let (batch, channels) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let groups = channels / group_size;
                let gam = val(*gamma).to_vec();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut dx = vec![0.0; g.len()];
                let count = (group_size * spatial) as f64;
                for b in 0..batch {
                    for grp in 0..groups {
                        let start = (b * channels + grp * group_size) * spatial;
                        let end = start + group_size * spatial;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in start..end {
                            let c = (i / spatial) % channels;
                            dgamma[c] += g[i] * normalized[i];
                            dbeta[c] += g[i];
                            let dxhat = g[i] * gam[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * normalized[i];
                        }
                        let inv = inv_std[b * groups + grp];
                        for i in start..end {
                            let c = (i / spatial) % channels;
                            let dxhat = g[i] * gam[c];
                            dx[i] = inv / count
                                * (count * dxhat - sum_dxhat - normalized[i] * sum_dxhat_xhat);
                        }
                    }
                }
                for (v, d) in [(*input, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    acc(grads, v, d.len())
                        .iter_mut()
                        .zip(d)
                        .for_each(|(a, x)| *a += x);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let dst = acc(grads, *input, len(*input));
                for (k, &i) in argmax.iter().enumerate() {
                    dst[i] += g[k];
                }
            }
            Op::GlobalAvgPool(input) => {
                let n = len(*input);
                let hw = n / g.len();
                let dst = acc(grads, *input, n);
                for (k, gv) in g.iter().enumerate() {
                    for d in &mut dst[k * hw..(k + 1) * hw] {
                        *d += gv / hw as f64;
                    }
                }
            }
            Op::Reshape(a) => {
                acc(grads, *a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
            }
            Op::Columns { input, start } => {
                let (rows, cols) = self.value(*input).dims2().unwrap();
                let width = g.len() / rows.max(1);
                let dst = acc(grads, *input, rows * cols);
                for r in 0..rows {
                    for j in 0..width {
                        dst[r * cols + start + j] += g[r * width + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = len(*p);
                    acc(grads, *p, n)
                        .iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(d, v)| *d += v);
                    offset += n;
                }
            }
            Op::EmbedRows { table, ids } => {
                let d = self.value(*table).shape()[1];
                let dst = acc(grads, *table, len(*table));
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dst[id * d + j] += g[k * d + j];
                    }
                }
            }
            Op::Sum(a) => {
                acc(grads, *a, len(*a)).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b.max(1);
                let dst = acc(grads, *logits, probs.len());
                for i in 0..b {
                    for j in 0..c {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        dst[i * c + j] += g[0] * (probs[i * c + j] - onehot) / b as f64;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sigmoid_tanh_values() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(tape.value(s).data()[1], 0.5);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new([1], vec![0.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.tanh(x);
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id), &[1.0]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros([2, 4]));
        let loss = tape.softmax_cross_entropy(z, &[0, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn dominant_logit_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for big in [1.0, 10.0, 100.0, 1000.0] {
            let mut tape = Tape::new();
            let z = tape.input(Tensor::new([1, 3], vec![big, 0.0, 0.0]).unwrap());
            let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
            let loss = tape.value(l).item();
            assert!(loss <= prev && loss >= 0.0 && loss.is_finite());
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros([1, 2]));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[2]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn incompatible_add_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros([2]));
        let b = tape.input(Tensor::zeros([3]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros([2]));
        assert!(matches!(tape.backward(a, &mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn matmul_adjoint_is_ones_times_b_transpose() {
        let mut store = ParamStore::new();
        let a = store.add(
            "a",
            Tensor::new([2, 3], (0..6).map(f64::from).collect()).unwrap(),
        );
        let b = store.add(
            "b",
            Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let p = tape.matmul(va, vb).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss, &mut store).unwrap();
        // ones(2x2) · Bᵀ: every row is the row sums of B.
        assert_eq!(store.grad(a), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn repeated_backward_doubles_and_unused_param_untouched() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new([2], vec![1.5, -2.0]).unwrap());
        let unused = store.add("u", Tensor::new([2], vec![3.0, 4.0]).unwrap());
        let mut tape = Tape::new();
        let vw = tape.param(&store, w);
        let sq = tape.mul(vw, vw).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        let once = store.grad(w).to_vec();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &[2.0 * once[0], 2.0 * once[1]]);
        assert_eq!(store.grad(unused), &[0.0, 0.0]);
        assert!(store.get(unused).touched.iter().all(|t| !t));
    }

    #[test]
    fn param_block_scatters_only_into_selection() {
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Tensor::new([2, 2], vec![1.0, 2.0, 3.0, f64::NAN]).unwrap(),
        );
        let mut tape = Tape::new();
        let blk = tape
            .param_block(&store, w, &[vec![0..2], vec![0..1]])
            .unwrap();
        assert_eq!(tape.value(blk).data(), &[1.0, 3.0]);
        let loss = tape.sum(blk);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(w), &[1.0, 0.0, 1.0, 0.0]);
    }
}
