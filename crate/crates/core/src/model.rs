//! Sequential models built from sliced layers, all sharing one slice rate.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::slicing::{
    GroupSpec, SliceRate, SlicedConv2d, SlicedDense, SlicedEmbedding, SlicedGroupNorm, SlicedLstm,
    DEFAULT_EPS,
};
use crate::tensor::{self, Tensor};

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputSpec {
    Features {
        dim: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Tokens {
        vocab: usize,
    },
}

/// Declarative description of one layer. A group count of 1 leaves that
/// axis unsliced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        in_groups: usize,
        out_groups: usize,
        #[serde(default)]
        rescale: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        in_groups: usize,
        out_groups: usize,
    },
    GroupNorm {
        channels: usize,
        groups: usize,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Embedding {
        vocab: usize,
        dim: usize,
        #[serde(default = "one")]
        groups: usize,
    },
    Lstm {
        inputs: usize,
        hidden: usize,
        in_groups: usize,
        hidden_groups: usize,
    },
    Relu,
    Tanh,
    Dropout {
        p: f64,
    },
    MaxPool2,
    GlobalAvgPool,
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::GroupNorm { .. } => "group_norm",
            LayerSpec::Embedding { .. } => "embedding",
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::MaxPool2 => "max_pool2",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Activation shape at a given rate (batch and time axes omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Vector(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Tokens,
    Sequence(usize),
}

impl ActShape {
    fn channels(&self) -> Option<usize> {
        match *self {
            ActShape::Vector(w) | ActShape::Sequence(w) => Some(w),
            ActShape::Image { channels, .. } => Some(channels),
            ActShape::Tokens => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub name: String,
    pub index: usize,
    pub input: ActShape,
    pub output: ActShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
}

fn spec(total: usize, groups: usize) -> Result<GroupSpec> {
    GroupSpec::new(total, groups)
}

impl ModelSpec {
    pub fn layer_name(index: usize, layer: &LayerSpec) -> String {
        format!("l{index}.{}", layer.kind())
    }

    /// Propagates activation shapes through the stack at rate `r`, checking
    /// that every layer receives the width it expects.
    pub fn trace(&self, r: SliceRate) -> Result<Vec<LayerTrace>> {
        let mut shape = match self.input {
            InputSpec::Features { dim } => ActShape::Vector(dim),
            InputSpec::Image {
                channels,
                height,
                width,
            } => ActShape::Image {
                channels,
                height,
                width,
            },
            InputSpec::Tokens { .. } => ActShape::Tokens,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let name = Self::layer_name(index, layer);
            let mismatch = |expected: &str| {
                Error::Config(format!(
                    "{name} expects {expected}, receives {shape:?} at rate {r}"
                ))
            };
            let next = match *layer {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    in_groups,
                    out_groups,
                    ..
                } => {
                    let g_in = spec(inputs, in_groups)?.boundary(r);
                    let g_out = spec(outputs, out_groups)?.boundary(r);
                    match shape {
                        ActShape::Vector(w) if w == g_in => ActShape::Vector(g_out),
                        ActShape::Sequence(w) if w == g_in => ActShape::Sequence(g_out),
                        _ => return Err(mismatch(&format!("width {g_in}"))),
                    }
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    in_groups,
                    out_groups,
                } => {
                    let g_in = spec(in_channels, in_groups)?.boundary(r);
                    let g_out = spec(out_channels, out_groups)?.boundary(r);
                    if kernel % 2 == 0 {
                        return Err(Error::Config(format!(
                            "{name}: kernel {kernel} must be odd"
                        )));
                    }
                    match shape {
                        ActShape::Image {
                            channels,
                            height,
                            width,
                        } if channels == g_in => ActShape::Image {
                            channels: g_out,
                            height: tensor::out_extent(height, kernel, stride, padding)?,
                            width: tensor::out_extent(width, kernel, stride, padding)?,
                        },
                        _ => return Err(mismatch(&format!("an image with {g_in} channels"))),
                    }
                }
                LayerSpec::GroupNorm {
                    channels,
                    groups,
                    eps,
                } => {
                    if !(eps > 0.0) {
                        return Err(Error::Config(format!("{name}: epsilon must be positive")));
                    }
                    let g = spec(channels, groups)?.boundary(r);
                    if shape.channels() != Some(g) || matches!(shape, ActShape::Tokens) {
                        return Err(mismatch(&format!("{g} channels")));
                    }
                    shape
                }
                LayerSpec::Embedding { vocab, dim, groups } => {
                    match (&self.input, shape) {
                        (InputSpec::Tokens { vocab: v }, ActShape::Tokens) if *v == vocab => {}
                        _ => return Err(mismatch(&format!("tokens from a vocabulary of {vocab}"))),
                    }
                    ActShape::Sequence(spec(dim, groups)?.boundary(r))
                }
                LayerSpec::Lstm {
                    inputs,
                    hidden,
                    in_groups,
                    hidden_groups,
                } => {
                    let g_in = spec(inputs, in_groups)?.boundary(r);
                    match shape {
                        ActShape::Sequence(w) if w == g_in => {
                            ActShape::Sequence(spec(hidden, hidden_groups)?.boundary(r))
                        }
                        _ => return Err(mismatch(&format!("a sequence of width {g_in}"))),
                    }
                }
                LayerSpec::Relu | LayerSpec::Tanh => shape,
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(Error::Config(format!(
                            "{name}: dropout p={p} outside [0, 1)"
                        )));
                    }
                    shape
                }
                LayerSpec::MaxPool2 => match shape {
                    ActShape::Image {
                        channels,
                        height,
                        width,
                    } if height >= 2 && width >= 2 => ActShape::Image {
                        channels,
                        height: height / 2,
                        width: width / 2,
                    },
                    _ => return Err(mismatch("an image of at least 2x2")),
                },
                LayerSpec::GlobalAvgPool => match shape {
                    ActShape::Image { channels, .. } => ActShape::Vector(channels),
                    _ => return Err(mismatch("an image")),
                },
                LayerSpec::Flatten => match shape {
                    ActShape::Image {
                        channels,
                        height,
                        width,
                    } => ActShape::Vector(channels * height * width),
                    _ => return Err(mismatch("an image")),
                },
            };
            out.push(LayerTrace {
                name,
                index,
                input: shape,
                output: next,
            });
            shape = next;
        }
        match shape {
            ActShape::Vector(_) | ActShape::Sequence(_) => Ok(out),
            other => Err(Error::Config(format!(
                "model must end in class scores, ends in {other:?}"
            ))),
        }
    }

    /// Every sliced axis (group count above one) in layer order.
    pub fn sliced_axes(&self) -> Result<Vec<GroupSpec>> {
        let mut axes = Vec::new();
        for layer in &self.layers {
            let pairs: &[(usize, usize)] = &match *layer {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    in_groups,
                    out_groups,
                    ..
                } => {
                    vec![(inputs, in_groups), (outputs, out_groups)]
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    in_groups,
                    out_groups,
                    ..
                } => {
                    vec![(in_channels, in_groups), (out_channels, out_groups)]
                }
                LayerSpec::GroupNorm {
                    channels, groups, ..
                } => vec![(channels, groups)],
                LayerSpec::Embedding { dim, groups, .. } => vec![(dim, groups)],
                LayerSpec::Lstm {
                    inputs,
                    hidden,
                    in_groups,
                    hidden_groups,
                } => {
                    vec![(inputs, in_groups), (hidden, hidden_groups)]
                }
                _ => Vec::new(),
            };
            for &(total, groups) in pairs {
                if groups > 1 {
                    axes.push(spec(total, groups)?);
                }
            }
        }
        Ok(axes)
    }

    /// The rate actually realized at `r`: the largest width fraction over
    /// sliced axes, which is below `r` when `r` is off every boundary.
    pub fn effective_rate(&self, r: SliceRate) -> Result<f64> {
        let axes = self.sliced_axes()?;
        if axes.iter().all(|a| a.is_exact(r)) {
            return Ok(r.get());
        }
        Ok(axes
            .iter()
            .map(|a| a.boundary(r) as f64 / a.total() as f64)
            .fold(0.0, f64::max))
    }

    /// Checks width compatibility at each rate.
    pub fn validate(&self, rates: &[f64]) -> Result<()> {
        for &r in rates {
            self.trace(SliceRate::new(r)?)?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> Result<usize> {
        match self.trace(SliceRate::FULL)?.last().map(|t| t.output) {
            Some(ActShape::Vector(c)) | Some(ActShape::Sequence(c)) => Ok(c),
            _ => Err(Error::Config("model has no layers".into())),
        }
    }

    /// Group-normalized MLP: sliced hidden layers, unsliced input features
    /// and class outputs, with output rescaling on the last dense layer.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize, groups: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = (inputs, 1);
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: prev.0,
                outputs: h,
                in_groups: prev.1,
                out_groups: groups,
                rescale: false,
            });
            layers.push(LayerSpec::GroupNorm {
                channels: h,
                groups,
                eps: DEFAULT_EPS,
            });
            layers.push(LayerSpec::Relu);
            prev = (h, groups);
        }
        layers.push(LayerSpec::Dense {
            inputs: prev.0,
            outputs: classes,
            in_groups: prev.1,
            out_groups: 1,
            rescale: true,
        });
        Self {
            input: InputSpec::Features { dim: inputs },
            layers,
        }
    }

    /// Small VGG-style network: each entry of `stages` is a list of conv
    /// widths followed by a 2x2 max pool (except the last stage).
    pub fn cnn(
        channels: usize,
        height: usize,
        width: usize,
        stages: &[Vec<usize>],
        classes: usize,
        groups: usize,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = (channels, 1);
        for (s, stage) in stages.iter().enumerate() {
            for &c in stage {
                layers.push(LayerSpec::Conv2d {
                    in_channels: prev.0,
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    in_groups: prev.1,
                    out_groups: groups,
                });
                layers.push(LayerSpec::GroupNorm {
                    channels: c,
                    groups,
                    eps: DEFAULT_EPS,
                });
                layers.push(LayerSpec::Relu);
                prev = (c, groups);
            }
            if s + 1 < stages.len() {
                layers.push(LayerSpec::MaxPool2);
            }
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Dense {
            inputs: prev.0,
            outputs: classes,
            in_groups: prev.1,
            out_groups: 1,
            rescale: true,
        });
        Self {
            input: InputSpec::Image {
                channels,
                height,
                width,
            },
            layers,
        }
    }

    /// VGG-13 for 32x32 inputs with group normalization in place of batch
    /// normalization.
    pub fn vgg13(groups: usize, classes: usize) -> Self {
        Self::cnn(
            3,
            32,
            32,
            &[
                vec![64, 64, 128, 128],
                vec![256, 256],
                vec![512, 512, 512, 512],
            ],
            classes,
            groups,
        )
    }

    /// Character language model: embedding, one sliced LSTM, optional
    /// dropout and a rescaled output projection.
    pub fn char_lm(
        vocab: usize,
        embed: usize,
        embed_groups: usize,
        hidden: usize,
        groups: usize,
        dropout: f64,
    ) -> Self {
        let mut layers = vec![
            LayerSpec::Embedding {
                vocab,
                dim: embed,
                groups: embed_groups,
            },
            LayerSpec::Lstm {
                inputs: embed,
                hidden,
                in_groups: embed_groups,
                hidden_groups: groups,
            },
        ];
        if dropout > 0.0 {
            layers.push(LayerSpec::Dropout { p: dropout });
        }
        layers.push(LayerSpec::Dense {
            inputs: hidden,
            outputs: vocab,
            in_groups: groups,
            out_groups: 1,
            rescale: true,
        });
        Self {
            input: InputSpec::Tokens { vocab },
            layers,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(SlicedDense),
    Conv2d(SlicedConv2d),
    GroupNorm(SlicedGroupNorm),
    Embedding(SlicedEmbedding),
    Lstm(SlicedLstm),
    Relu,
    Tanh,
    Dropout(f64),
    MaxPool2,
    GlobalAvgPool,
    Flatten,
}

/// Model inputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// `[B, D]` features or `[B, C, H, W]` images.
    Features(Tensor),
    /// Batch-major token ids: `ids[b * steps + t]`.
    Tokens {
        ids: Vec<usize>,
        batch: usize,
        steps: usize,
    },
}

impl Inputs {
    pub fn batch_size(&self) -> usize {
        match self {
            Inputs::Features(t) => t.shape().first().copied().unwrap_or(0),
            Inputs::Tokens { batch, .. } => *batch,
        }
    }
}

/// Inputs with class targets. For token inputs the targets are time-major
/// (`targets[t * batch + b]`), matching the row order of the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Vec<usize>,
}

enum Flow<'a> {
    Tokens(&'a [usize], usize, usize),
    Single(Var),
    Seq(Vec<Var>),
}

/// Per-layer outputs of one forward pass (used for activation caching).
pub type LayerOutputs = Vec<Vec<Var>>;

pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    store: ParamStore,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            store: self.store.clone(),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("layers", &self.spec.layers.len())
            .field("params", &self.store.total_elements())
            .finish()
    }
}

impl Model {
    /// Allocates and initializes parameters deterministically from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.trace(SliceRate::FULL)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let name = ModelSpec::layer_name(i, ls);
            let layer = match *ls {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    in_groups,
                    out_groups,
                    rescale,
                } => Layer::Dense(SlicedDense::new(
                    &mut store,
                    &name,
                    GroupSpec::new(inputs, in_groups)?,
                    GroupSpec::new(outputs, out_groups)?,
                    rescale,
                    &mut rng,
                )),
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    in_groups,
                    out_groups,
                } => Layer::Conv2d(SlicedConv2d::new(
                    &mut store,
                    &name,
                    GroupSpec::new(in_channels, in_groups)?,
                    GroupSpec::new(out_channels, out_groups)?,
                    kernel,
                    stride,
                    padding,
                    &mut rng,
                )?),
                LayerSpec::GroupNorm {
                    channels,
                    groups,
                    eps,
                } => Layer::GroupNorm(SlicedGroupNorm::new(
                    &mut store,
                    &name,
                    GroupSpec::new(channels, groups)?,
                    eps,
                )?),
                LayerSpec::Embedding { vocab, dim, groups } => {
                    Layer::Embedding(SlicedEmbedding::new(
                        &mut store,
                        &name,
                        vocab,
                        GroupSpec::new(dim, groups)?,
                        &mut rng,
                    ))
                }
                LayerSpec::Lstm {
                    inputs,
                    hidden,
                    in_groups,
                    hidden_groups,
                } => Layer::Lstm(SlicedLstm::new(
                    &mut store,
                    &name,
                    GroupSpec::new(inputs, in_groups)?,
                    GroupSpec::new(hidden, hidden_groups)?,
                    &mut rng,
                )),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Tanh => Layer::Tanh,
                LayerSpec::Dropout { p } => Layer::Dropout(p),
                LayerSpec::MaxPool2 => Layer::MaxPool2,
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::Flatten => Layer::Flatten,
            };
            layers.push(layer);
        }
        Ok(Self {
            spec,
            layers,
            store,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Records the forward pass of Subnet-`r` and returns class logits
    /// (`[B, C]`, or `[T*B, C]` time-major for token inputs). Dropout is
    /// active only when `dropout_rng` is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        inputs: &Inputs,
        r: SliceRate,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let (logits, _) = self.forward_traced(tape, inputs, r, dropout_rng)?;
        Ok(logits)
    }

    /// As [`Model::forward`], also returning every layer's outputs (one
    /// entry per time step for sequence layers).
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        inputs: &Inputs,
        r: SliceRate,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, LayerOutputs)> {
        let mut flow = match inputs {
            Inputs::Features(t) => {
                if matches!(self.spec.input, InputSpec::Tokens { .. }) {
                    return Err(Error::Data("model expects token inputs".into()));
                }
                Flow::Single(tape.input(t.clone()))
            }
            Inputs::Tokens { ids, batch, steps } => {
                if ids.len() != batch * steps {
                    return Err(Error::Dimension(format!(
                        "{} token ids for a {batch}x{steps} batch",
                        ids.len()
                    )));
                }
                Flow::Tokens(ids, *batch, *steps)
            }
        };
        let mut outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            flow = match (flow, layer) {
                (Flow::Tokens(ids, batch, steps), Layer::Embedding(emb)) => {
                    let mut xs = Vec::with_capacity(steps);
                    for t in 0..steps {
                        let col: Vec<usize> = (0..batch).map(|b| ids[b * steps + t]).collect();
                        xs.push(emb.forward(tape, &self.store, &col, r)?);
                    }
                    Flow::Seq(xs)
                }
                (Flow::Tokens(..), _) => {
                    return Err(Error::Config("token inputs must feed an embedding".into()))
                }
                (Flow::Seq(xs), Layer::Lstm(lstm)) => {
                    let batch = tape.shape(xs[0])[0];
                    let g_h = lstm.hidden_spec.boundary(r);
                    let mut h = tape.input(Tensor::zeros([batch, g_h]));
                    let mut c = tape.input(Tensor::zeros([batch, g_h]));
                    let mut hs = Vec::with_capacity(xs.len());
                    for x in xs {
                        (h, c) = lstm.step(tape, &self.store, x, h, c, r)?;
                        hs.push(h);
                    }
                    Flow::Seq(hs)
                }
                (Flow::Seq(xs), layer) => Flow::Seq(
                    xs.into_iter()
                        .map(|x| self.apply_layer(tape, layer, x, r, &mut dropout_rng))
                        .collect::<Result<_>>()?,
                ),
                (Flow::Single(x), layer) => {
                    Flow::Single(self.apply_layer(tape, layer, x, r, &mut dropout_rng)?)
                }
            };
            outputs.push(match &flow {
                Flow::Single(x) => vec![*x],
                Flow::Seq(xs) => xs.clone(),
                Flow::Tokens(..) => Vec::new(),
            });
        }
        let logits = match flow {
            Flow::Seq(xs) => tape.concat_rows(&xs)?,
            Flow::Single(x) => x,
            Flow::Tokens(..) => return Err(Error::Config("model has no layers".into())),
        };
        tape.value(logits).dims2()?;
        Ok((logits, outputs))
    }

    pub(crate) fn apply_layer(
        &self,
        tape: &mut Tape,
        layer: &Layer,
        x: Var,
        r: SliceRate,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let store = &self.store;
        match layer {
            Layer::Dense(d) => d.forward(tape, store, x, r, r),
            Layer::Conv2d(c) => c.forward(tape, store, x, r, r),
            Layer::GroupNorm(g) => g.forward(tape, store, x, r),
            Layer::Relu => Ok(tape.relu(x)),
            Layer::Tanh => Ok(tape.tanh(x)),
            Layer::Dropout(p) => match rng {
                Some(rng) if *p > 0.0 => {
                    let shape = tape.shape(x).to_vec();
                    let n = shape.iter().product();
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..n)
                        .map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep })
                        .collect();
                    let m = tape.input(Tensor::new(shape, mask)?);
                    tape.mul(x, m)
                }
                _ => Ok(x),
            },
            Layer::MaxPool2 => tape.max_pool2(x),
            Layer::GlobalAvgPool => tape.global_avg_pool(x),
            Layer::Flatten => {
                let shape = tape.shape(x).to_vec();
                let rest: usize = shape[1..].iter().product();
                tape.reshape(x, &[shape[0], rest])
            }
            Layer::Embedding(_) | Layer::Lstm(_) => Err(Error::Config(
                "embedding and lstm layers need a token sequence input".into(),
            )),
        }
    }

    /// Mean cross-entropy of Subnet-`r` on `batch`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        r: SliceRate,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let logits = self.forward(tape, &batch.inputs, r, dropout_rng)?;
        tape.softmax_cross_entropy(logits, &batch.targets)
    }

    /// Inference-only logits of Subnet-`r`.
    pub fn predict(&self, inputs: &Inputs, r: SliceRate) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, inputs, r, None)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg13_traces_to_ten_classes() {
        let spec = ModelSpec::vgg13(8, 10);
        assert_eq!(spec.num_classes().unwrap(), 10);
        let trace = spec.trace(SliceRate::new(0.375).unwrap()).unwrap();
        let convs = trace.iter().filter(|t| t.name.ends_with("conv2d")).count();
        assert_eq!(convs, 10);
        assert_eq!(
            trace.last().unwrap().input,
            ActShape::Vector(192),
            "classifier sees 0.375 * 512 channels"
        );
    }

    #[test]
    fn off_boundary_rate_rounds_down() {
        let spec = ModelSpec::mlp(2, &[16, 16], 2, 4);
        assert_eq!(spec.sliced_axes().unwrap().len(), 6);
        assert_eq!(
            spec.effective_rate(SliceRate::new(0.5).unwrap()).unwrap(),
            0.5
        );
        assert_eq!(
            spec.effective_rate(SliceRate::new(0.6).unwrap()).unwrap(),
            0.5
        );
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut spec = ModelSpec::mlp(2, &[8, 8], 2, 4);
        if let LayerSpec::Dense { inputs, .. } = &mut spec.layers[3] {
            *inputs = 16;
        }
        assert!(matches!(Model::new(spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn char_lm_emits_time_major_logits() {
        let model = Model::new(ModelSpec::char_lm(5, 4, 1, 8, 2, 0.0), 3).unwrap();
        let inputs = Inputs::Tokens {
            ids: vec![0, 1, 2, 3, 4, 0],
            batch: 2,
            steps: 3,
        };
        let logits = model
            .predict(&inputs, SliceRate::new(0.5).unwrap())
            .unwrap();
        assert_eq!(logits.shape(), &[6, 5]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(ModelSpec::mlp(2, &[8], 2, 2), 11).unwrap();
        let b = Model::new(ModelSpec::mlp(2, &[8], 2, 2), 11).unwrap();
        for ((_, pa), (_, pb)) in a.store().iter().zip(b.store().iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }
}
