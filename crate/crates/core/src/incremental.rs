//! Widening a computed subnet to a larger one by evaluating only the new
//! weight blocks.
//!
//! For a linear layer restricted to its Subnet-`r_b` prefix, the weight
//! splits into four blocks along the `r_a` boundaries:
//!
//! ```text
//! [ base  cross_in  ]   rows 0..out_a
//! [ cross_out  new  ]   rows out_a..out_b
//!   cols 0..in_a | in_a..in_b
//! ```
//!
//! With `y_a = base * x_a` cached, the wider output is
//! `y_a + cross_in * x_b` on the old rows and `cross_out * x_a + new * x_b`
//! on the added rows. The approximate mode keeps `y_a` as is.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::{Layer, Model, ModelSpec};
use crate::slicing::{GroupSpec, SliceRate};
use crate::tensor::{self, ConvGeometry, Tensor};

/// How a weight block is applied to an activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Weight `[out, in]`, activation `[B, in]`.
    Dense,
    /// Kernels `[out, in, k, k]`, activation `[B, in, H, W]`.
    Conv { stride: usize, padding: usize },
}

/// The four blocks of a layer's Subnet-`r_b` weight split at `r_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightPartition {
    pub layer: String,
    pub kind: BlockKind,
    /// `(in_a, in_b)` active input widths.
    pub inputs: (usize, usize),
    /// `(out_a, out_b)` active output widths.
    pub outputs: (usize, usize),
    pub base: Tensor,
    pub cross_in: Tensor,
    pub cross_out: Tensor,
    pub new: Tensor,
}

fn block(w: &Tensor, rows: Range<usize>, cols: Range<usize>) -> Result<Tensor> {
    w.narrow(0, rows)?.narrow(1, cols)
}

/// Splits `weight` (`[N, M]` or `[N, M, k, k]`) at the boundaries of `r_a`
/// and `r_b`.
pub fn partition_weight(
    layer: impl Into<String>,
    weight: &Tensor,
    kind: BlockKind,
    in_spec: &GroupSpec,
    out_spec: &GroupSpec,
    r_a: SliceRate,
    r_b: SliceRate,
) -> Result<WeightPartition> {
    let layer = layer.into();
    if r_a.get() >= r_b.get() {
        return Err(Error::Usage(format!(
            "{layer}: widening needs r_a < r_b, got {r_a} and {r_b}"
        )));
    }
    let inputs = (in_spec.boundary(r_a), in_spec.boundary(r_b));
    let outputs = (out_spec.boundary(r_a), out_spec.boundary(r_b));
    if inputs.0 == inputs.1 && outputs.0 == outputs.1 {
        return Err(Error::Usage(format!(
            "{layer}: rates {r_a} and {r_b} fall on the same group boundaries"
        )));
    }
    let shape = weight.shape();
    if shape.len() < 2 || shape[0] != out_spec.total() || shape[1] != in_spec.total() {
        return Err(Error::Dimension(format!(
            "{layer}: weight shape {shape:?} does not match {}x{}",
            out_spec.total(),
            in_spec.total()
        )));
    }
    let ((ia, ib), (oa, ob)) = (inputs, outputs);
    Ok(WeightPartition {
        base: block(weight, 0..oa, 0..ia)?,
        cross_in: block(weight, 0..oa, ia..ib)?,
        cross_out: block(weight, oa..ob, 0..ia)?,
        new: block(weight, oa..ob, ia..ib)?,
        layer,
        kind,
        inputs,
        outputs,
    })
}

impl WeightPartition {
    /// The Subnet-`r_b` prefix weight rebuilt from its blocks.
    pub fn reassemble(&self) -> Result<Tensor> {
        let top = Tensor::concat(&[&self.base, &self.cross_in], 1)?;
        let bottom = Tensor::concat(&[&self.cross_out, &self.new], 1)?;
        Tensor::concat(&[&top, &bottom], 0)
    }

    fn positions(&self, x: &Tensor) -> Result<usize> {
        match self.kind {
            BlockKind::Dense => Ok(1),
            BlockKind::Conv { stride, padding } => {
                let (_, _, h, w) = x.dims4()?;
                let k = self.base.shape()[2];
                Ok(tensor::out_extent(h, k, stride, padding)?
                    * tensor::out_extent(w, k, stride, padding)?)
            }
        }
    }

    /// Multiply-accumulates of applying a `rows x cols` block to `x`.
    fn block_flops(&self, rows: usize, cols: usize, x: &Tensor) -> Result<u64> {
        let k2 = match self.kind {
            BlockKind::Dense => 1,
            BlockKind::Conv { .. } => self.base.shape()[2].pow(2),
        };
        Ok((rows * cols * k2 * self.positions(x)?) as u64)
    }

    fn check_inputs(&self, y_a: &Tensor, x_a: &Tensor, x_b: &Tensor) -> Result<()> {
        let (ia, ib) = self.inputs;
        if x_a.shape().get(1) != Some(&ia) || x_b.shape().get(1) != Some(&(ib - ia)) {
            return Err(Error::Dimension(format!(
                "{}: inputs {:?} and {:?} do not match widths {ia} and {}",
                self.layer,
                x_a.shape(),
                x_b.shape(),
                ib - ia
            )));
        }
        if y_a.shape().get(1) != Some(&self.outputs.0) {
            return Err(Error::Dimension(format!(
                "{}: cached output {:?} does not have {} channels",
                self.layer,
                y_a.shape(),
                self.outputs.0
            )));
        }
        Ok(())
    }
}

/// Applies a weight block to `x` without bias. Empty blocks yield zeros.
pub fn apply_block(w: &Tensor, x: &Tensor, kind: BlockKind) -> Result<Tensor> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    match kind {
        BlockKind::Dense => {
            let (b, m) = x.dims2()?;
            if m != inp {
                return Err(Error::Dimension(format!(
                    "block {:?} cannot take input {:?}",
                    w.shape(),
                    x.shape()
                )));
            }
            if out == 0 || inp == 0 {
                return Ok(Tensor::zeros([b, out]));
            }
            x.matmul(&w.transpose()?)
        }
        BlockKind::Conv { stride, padding } => {
            let (b, c, h, wd) = x.dims4()?;
            let k = w.shape()[2];
            if c != inp {
                return Err(Error::Dimension(format!(
                    "block {:?} cannot take input {:?}",
                    w.shape(),
                    x.shape()
                )));
            }
            let (oh, ow) = (
                tensor::out_extent(h, k, stride, padding)?,
                tensor::out_extent(wd, k, stride, padding)?,
            );
            if out == 0 || inp == 0 {
                return Ok(Tensor::zeros([b, out, oh, ow]));
            }
            let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
            Tensor::new(
                [b, out, oh, ow],
                tensor::conv2d_raw(x.data(), w.data(), None, &g),
            )
        }
    }
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "cannot add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Exact widening of one linear block. `y_a` must equal `base * x_a`.
/// Returns the updated old rows and the added rows.
pub fn widen_exact(
    p: &WeightPartition,
    y_a: &Tensor,
    x_a: &Tensor,
    x_b: &Tensor,
) -> Result<(Tensor, Tensor)> {
    p.check_inputs(y_a, x_a, x_b)?;
    let updated = add(y_a, &apply_block(&p.cross_in, x_b, p.kind)?)?;
    let added = add(
        &apply_block(&p.cross_out, x_a, p.kind)?,
        &apply_block(&p.new, x_b, p.kind)?,
    )?;
    Ok((updated, added))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApproxWidening {
    /// The cached `y_a`, untouched.
    pub base: Tensor,
    pub added: Tensor,
    /// Multiply-accumulates spent on the added rows.
    pub flops: u64,
    /// `max |cross_in * x_b|`: how far the kept rows are from exact.
    pub error_bound: f64,
}

/// Approximate widening: the old rows keep their cached values and only the
/// added rows are computed. The omitted correction is measured and reported.
pub fn widen_approx(
    p: &WeightPartition,
    y_a: &Tensor,
    x_a: &Tensor,
    x_b: &Tensor,
) -> Result<ApproxWidening> {
    p.check_inputs(y_a, x_a, x_b)?;
    let added = add(
        &apply_block(&p.cross_out, x_a, p.kind)?,
        &apply_block(&p.new, x_b, p.kind)?,
    )?;
    let error_bound = apply_block(&p.cross_in, x_b, p.kind)?.max_abs();
    Ok(ApproxWidening {
        base: y_a.clone(),
        flops: p.block_flops(p.outputs.1 - p.outputs.0, p.inputs.1, x_a)?,
        added,
        error_bound,
    })
}

/// Caller-chosen identity of an input batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchToken(pub u64);

#[derive(Clone, Debug, PartialEq)]
struct CacheEntry {
    input: Tensor,
    /// Pre-scale, pre-bias product of linear layers.
    raw: Option<Tensor>,
    output: Tensor,
}

/// Per-layer activations of one batch at one rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    token: BatchToken,
    rate: SliceRate,
    entries: BTreeMap<usize, CacheEntry>,
    names: Vec<String>,
    logits: Tensor,
}

impl ActivationCache {
    /// Runs Subnet-`rate` on `inputs` and records every layer.
    pub fn build(
        model: &Model,
        inputs: &Tensor,
        rate: SliceRate,
        token: BatchToken,
    ) -> Result<Self> {
        let names = layer_names(model.spec());
        let mut entries = BTreeMap::new();
        let mut x = inputs.clone();
        for (i, layer) in model.layers().iter().enumerate() {
            let (raw, output) = match linear_view(model.store(), layer) {
                Some(lin) => {
                    let raw = lin.raw(&x, rate)?;
                    let out = lin.finish(&raw, rate)?;
                    (Some(raw), out)
                }
                None => (None, other_layer(model, layer, &x, rate)?),
            };
            entries.insert(
                i,
                CacheEntry {
                    input: x,
                    raw,
                    output: output.clone(),
                },
            );
            x = output;
        }
        Ok(Self {
            token,
            rate,
            entries,
            names,
            logits: x,
        })
    }

    pub fn token(&self) -> BatchToken {
        self.token
    }

    pub fn rate(&self) -> SliceRate {
        self.rate
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.entries.contains_key(&layer)
    }

    /// Drops one layer's entry.
    pub fn evict(&mut self, layer: usize) -> bool {
        self.entries.remove(&layer).is_some()
    }

    fn entry(&self, layer: usize) -> Result<&CacheEntry> {
        self.entries.get(&layer).ok_or_else(|| {
            Error::Usage(format!(
                "no cached activation for layer {}",
                self.names.get(layer).map_or("?", String::as_str)
            ))
        })
    }
}

fn layer_names(spec: &ModelSpec) -> Vec<String> {
    spec.layers
        .iter()
        .enumerate()
        .map(|(i, l)| ModelSpec::layer_name(i, l))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidenMode {
    Exact,
    Approx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWidening {
    pub layer: String,
    /// Multiply-accumulates spent widening this layer.
    pub flops: u64,
    /// Multiply-accumulates of computing the layer directly at `r_b`.
    pub full_flops: u64,
    /// Largest omitted correction (zero in exact mode).
    pub error_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Widened {
    pub logits: Tensor,
    pub layers: Vec<LayerWidening>,
}

impl Widened {
    pub fn flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn full_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.full_flops).sum()
    }

    pub fn max_error_bound(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.error_bound)
            .fold(0.0, f64::max)
    }
}

/// Borrowed view of a dense or conv layer.
struct Linear<'a> {
    weight: &'a Tensor,
    bias: &'a Tensor,
    kind: BlockKind,
    in_spec: &'a GroupSpec,
    out_spec: &'a GroupSpec,
    rescale: bool,
}

fn linear_view<'a>(store: &'a ParamStore, layer: &'a Layer) -> Option<Linear<'a>> {
    match layer {
        Layer::Dense(d) => Some(Linear {
            weight: store.value(d.weight),
            bias: store.value(d.bias),
            kind: BlockKind::Dense,
            in_spec: &d.in_spec,
            out_spec: &d.out_spec,
            rescale: d.rescale,
        }),
        Layer::Conv2d(c) => Some(Linear {
            weight: store.value(c.kernels),
            bias: store.value(c.bias),
            kind: BlockKind::Conv {
                stride: c.stride,
                padding: c.padding,
            },
            in_spec: &c.in_spec,
            out_spec: &c.out_spec,
            rescale: false,
        }),
        _ => None,
    }
}

impl Linear<'_> {
    fn prefix(&self, r: SliceRate) -> Result<Tensor> {
        block(
            self.weight,
            0..self.out_spec.boundary(r),
            0..self.in_spec.boundary(r),
        )
    }

    fn raw(&self, x: &Tensor, r: SliceRate) -> Result<Tensor> {
        apply_block(&self.prefix(r)?, x, self.kind)
    }

    /// Rescales and adds the bias to a raw product at rate `r`.
    fn finish(&self, raw: &Tensor, r: SliceRate) -> Result<Tensor> {
        let g_in = self.in_spec.boundary(r);
        let scale = if self.rescale {
            self.in_spec.total() as f64 / g_in as f64
        } else {
            1.0
        };
        let channels = raw.shape()[1];
        let inner: usize = raw.shape()[2..].iter().product();
        let bias = self.bias.data();
        let mut out = raw.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / inner) % channels;
            if self.rescale {
                *v *= scale;
            }
            *v += bias[c];
        }
        Ok(out)
    }

    fn flops(&self, rows: usize, cols: usize, positions: usize) -> u64 {
        let k2 = match self.kind {
            BlockKind::Dense => 1,
            BlockKind::Conv { .. } => self.weight.shape()[2].pow(2),
        };
        (rows * cols * k2 * positions) as u64
    }
}

fn other_layer(model: &Model, layer: &Layer, x: &Tensor, r: SliceRate) -> Result<Tensor> {
    if matches!(layer, Layer::Embedding(_) | Layer::Lstm(_)) {
        return Err(Error::Usage(
            "widening supports feed-forward dense/conv models only".into(),
        ));
    }
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let y = model.apply_layer(&mut tape, layer, v, r, &mut None)?;
    Ok(tape.value(y).clone())
}

/// Computes the Subnet-`r_b` logits of the batch cached at `r_a`, reusing
/// the cached activations layer by layer.
///
/// Exact mode reproduces the direct `r_b` forward; cached base products are
/// reused wherever the layer's base input is unchanged and recomputed
/// otherwise. Approx mode keeps every cached base row and computes only the
/// added rows; layers with a fixed output width (the classifier) still
/// receive the cross-input correction, since they have no added rows.
pub fn widen_model(
    model: &Model,
    cache: &ActivationCache,
    token: BatchToken,
    inputs: &Tensor,
    r_b: SliceRate,
    mode: WidenMode,
) -> Result<Widened> {
    if token != cache.token {
        return Err(Error::Usage(format!(
            "cache belongs to batch {:?}, not {:?}",
            cache.token.0, token.0
        )));
    }
    let r_a = cache.rate;
    if r_b.get() < r_a.get() {
        return Err(Error::Usage(format!(
            "cannot widen from {r_a} down to {r_b}"
        )));
    }
    let names = &cache.names;
    for i in 0..model.layers().len() {
        cache.entry(i)?;
    }
    if r_a == r_b {
        return Ok(Widened {
            logits: cache.logits.clone(),
            layers: Vec::new(),
        });
    }
    let store = model.store();
    let mut x = inputs.clone();
    let mut report = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let entry = cache.entry(i)?;
        let Some(lin) = linear_view(store, layer) else {
            x = other_layer(model, layer, &x, r_b)?;
            continue;
        };
        let (ia, ib) = (lin.in_spec.boundary(r_a), lin.in_spec.boundary(r_b));
        let (oa, ob) = (lin.out_spec.boundary(r_a), lin.out_spec.boundary(r_b));
        let x_a = x.narrow(1, 0..ia)?;
        let x_b = x.narrow(1, ia..ib)?;
        let positions = match lin.kind {
            BlockKind::Dense => 1,
            BlockKind::Conv { .. } => entry.output.shape()[2..].iter().product(),
        };
        let full_flops = lin.flops(ob, ib, positions);
        let raw_a = entry
            .raw
            .as_ref()
            .expect("linear layers cache raw products");
        let grew = ia != ib || oa != ob;
        let p = if grew {
            Some(partition_weight(
                names[i].clone(),
                lin.weight,
                lin.kind,
                lin.in_spec,
                lin.out_spec,
                r_a,
                r_b,
            )?)
        } else {
            None
        };
        let (out, flops, error_bound) = match (mode, &p) {
            (_, None) => {
                // nothing new in this layer at r_b
                if x_a == entry.input {
                    (lin.finish(raw_a, r_b)?, 0, 0.0)
                } else {
                    let raw = lin.raw(&x, r_b)?;
                    (lin.finish(&raw, r_b)?, full_flops, 0.0)
                }
            }
            (WidenMode::Exact, Some(p)) => {
                let (base, mut flops) = if x_a == entry.input {
                    (raw_a.clone(), 0)
                } else {
                    (
                        apply_block(&p.base, &x_a, p.kind)?,
                        lin.flops(oa, ia, positions),
                    )
                };
                let (updated, added) = widen_exact(p, &base, &x_a, &x_b)?;
                flops += lin.flops(oa, ib - ia, positions) + lin.flops(ob - oa, ib, positions);
                let raw = Tensor::concat(&[&updated, &added], 1)?;
                (lin.finish(&raw, r_b)?, flops, 0.0)
            }
            (WidenMode::Approx, Some(p)) if oa == ob => {
                let correction = apply_block(&p.cross_in, &x_b, p.kind)?;
                let raw = add(raw_a, &correction)?;
                let flops = lin.flops(oa, ib - ia, positions);
                (lin.finish(&raw, r_b)?, flops, 0.0)
            }
            (WidenMode::Approx, Some(p)) => {
                let w = widen_approx(p, raw_a, &x_a, &x_b)?;
                let added_raw =
                    Tensor::concat(&[&Tensor::zeros(raw_a.shape().to_vec()), &w.added], 1)?;
                let finished = lin.finish(&added_raw, r_b)?;
                let added = finished.narrow(1, oa..ob)?;
                let out = Tensor::concat(&[&entry.output, &added], 1)?;
                (out, w.flops, w.error_bound)
            }
        };
        report.push(LayerWidening {
            layer: names[i].clone(),
            flops,
            full_flops,
            error_bound,
        });
        x = out;
    }
    Ok(Widened {
        logits: x,
        layers: report,
    })
}
