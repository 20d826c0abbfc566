//! Desk-scale classifiers whose forward pass exposes every layer's
//! post-activation output.
//!
//! A "neuron" is one scalar element of a layer output. Convolutional feature
//! maps are flattened, so a conv layer with `c` channels over an `h × w`
//! plane has `c·h·w` neurons. The traced layers are every post-ReLU output
//! followed by the logits.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    /// Dense ReLU layers of the given widths, then a dense logit layer.
    Mlp { hidden: Vec<usize> },
    /// Same-padded ReLU conv layers, then a dense logit layer over the
    /// flattened final feature map.
    Cnn { conv: Vec<ConvLayer> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Per-sample input shape; `[C, H, W]` for convolutional models. Models
    /// always consume inputs flattened to `[batch, prod(input_shape)]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub arch: Architecture,
}

impl ModelSpec {
    pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize) -> Self {
        ModelSpec {
            input_shape: input_shape.to_vec(),
            num_classes,
            arch: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
        }
    }

    pub fn cnn(input_shape: &[usize], conv: &[(usize, usize)], num_classes: usize) -> Self {
        ModelSpec {
            input_shape: input_shape.to_vec(),
            num_classes,
            arch: Architecture::Cnn {
                conv: conv
                    .iter()
                    .map(|&(channels, kernel)| ConvLayer { channels, kernel })
                    .collect(),
            },
        }
    }

    /// 784 → 256 → 128 → 10 ReLU network over 28×28 grayscale images.
    pub fn mnist_mlp() -> Self {
        Self::mlp(&[1, 28, 28], &[256, 128], 10)
    }

    /// 1×28×28 → conv8(3×3) → conv16(3×3) → dense 10.
    pub fn mnist_cnn() -> Self {
        Self::cnn(&[1, 28, 28], &[(8, 3), (16, 3)], 10)
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "class count must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "input shape must be non-empty with positive sizes, got {:?}",
                self.input_shape
            )));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::InvalidArgument("hidden widths must be positive".into()));
                }
            }
            Architecture::Cnn { conv } => {
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidArgument(format!(
                        "convolutional models need a [C, H, W] input shape, got {:?}",
                        self.input_shape
                    )));
                }
                for layer in conv {
                    if layer.channels == 0 || layer.kernel % 2 == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "conv layers need positive channels and an odd kernel, got {layer:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Weight and bias shapes in storage order, with Glorot fans for weights.
    fn layout(&self) -> Vec<(Vec<usize>, Option<(usize, usize)>)> {
        let mut out = Vec::new();
        match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut fan_in = self.input_dim();
                for &w in hidden.iter().chain(std::iter::once(&self.num_classes)) {
                    out.push((vec![fan_in, w], Some((fan_in, w))));
                    out.push((vec![w], None));
                    fan_in = w;
                }
            }
            Architecture::Cnn { conv } => {
                let mut channels = self.input_shape[0];
                let plane = self.input_shape[1] * self.input_shape[2];
                for layer in conv {
                    let k2 = layer.kernel * layer.kernel;
                    out.push((
                        vec![layer.channels, channels, layer.kernel, layer.kernel],
                        Some((channels * k2, layer.channels * k2)),
                    ));
                    out.push((vec![layer.channels], None));
                    channels = layer.channels;
                }
                let flat = channels * plane;
                out.push((vec![flat, self.num_classes], Some((flat, self.num_classes))));
                out.push((vec![self.num_classes], None));
            }
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layout().into_iter().map(|(s, _)| s).collect()
    }

    /// Neuron count `|M_i|` of every traced layer; the last entry is the
    /// number of logits.
    pub fn traced_widths(&self) -> Vec<usize> {
        let mut widths: Vec<usize> = match &self.arch {
            Architecture::Mlp { hidden } => hidden.clone(),
            Architecture::Cnn { conv } => {
                let plane = self.input_shape[1] * self.input_shape[2];
                conv.iter().map(|l| l.channels * plane).collect()
            }
        };
        widths.push(self.num_classes);
        widths
    }

    /// Builds the network on `tape`. `x` must be `[batch, input_dim]`.
    pub fn apply(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<TracedOutput> {
        let d = self.input_dim();
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != d {
            return Err(Error::shape("model input", xs, &[xs[0], d]));
        }
        let expected = self.param_shapes().len();
        if params.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "model expects {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        let batch = xs[0];
        let mut layers = Vec::new();
        let logits = match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut h = x;
                for (i, _) in hidden.iter().enumerate() {
                    let z = tape.matmul(h, params[2 * i])?;
                    let z = tape.add_bias(z, params[2 * i + 1])?;
                    h = tape.relu(z);
                    layers.push(h);
                }
                let n = hidden.len();
                let z = tape.matmul(h, params[2 * n])?;
                tape.add_bias(z, params[2 * n + 1])?
            }
            Architecture::Cnn { conv } => {
                let mut shape = vec![batch];
                shape.extend_from_slice(&self.input_shape);
                let mut h = tape.reshape(x, &shape)?;
                for (i, _) in conv.iter().enumerate() {
                    let z = tape.conv2d(h, params[2 * i], params[2 * i + 1])?;
                    h = tape.relu(z);
                    let flat = tape.flatten(h)?;
                    layers.push(flat);
                }
                let n = conv.len();
                let flat = tape.flatten(h)?;
                let z = tape.matmul(flat, params[2 * n])?;
                tape.add_bias(z, params[2 * n + 1])?
            }
        };
        layers.push(logits);
        Ok(TracedOutput { logits, layers })
    }
}

/// Tape nodes of one traced forward pass. `layers` holds one `[batch, |M_i|]`
/// node per traced layer; the last one is `logits`.
#[derive(Clone, Debug)]
pub struct TracedOutput {
    pub logits: Var,
    pub layers: Vec<Var>,
}

/// Post-activation values of every traced layer for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    layers: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a trace needs at least one layer".into()));
        }
        let batch = layers[0].rows();
        for l in &layers {
            if l.rank() != 2 || l.rows() != batch {
                return Err(Error::shape("activation trace", layers[0].shape(), l.shape()));
            }
        }
        Ok(ActivationTrace { layers })
    }

    pub fn from_tape(tape: &Tape, out: &TracedOutput) -> Self {
        ActivationTrace {
            layers: out.layers.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Tensor {
        &self.layers[i]
    }

    pub fn logits(&self) -> &Tensor {
        self.layers.last().expect("trace is never empty")
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.row_len()).collect()
    }
}

/// Ordered weight and bias tensors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

impl ModelParams {
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::CountMismatch(format!(
                "spec expects {} parameter tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for (expected, t) in shapes.iter().zip(&self.tensors) {
            if expected.as_slice() != t.shape() {
                return Err(Error::shape("model parameters", expected, t.shape()));
            }
            if !t.is_finite() {
                return Err(Error::InvalidArgument("non-finite parameter value".into()));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))` and zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = rng_from(seed, &[stream::INIT]);
    let tensors = spec
        .layout()
        .into_iter()
        .map(|(shape, fans)| match fans {
            Some((fan_in, fan_out)) => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let n = shape.iter().product();
                let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
                Tensor::new(shape, data)
            }
            None => Ok(Tensor::zeros(&shape)),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams { tensors, seed })
}

/// Anything that maps a `[batch, d]` input node to `[batch, C]` logits.
pub trait ModelFn {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }
}

impl<F> ModelFn for F
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

/// A model whose forward pass also reports its traced layers.
pub trait TracedModel: ModelFn {
    fn forward_traced(&self, tape: &mut Tape, x: Var) -> Result<TracedOutput>;
}

/// A classifier specification together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ModelParams) -> Result<Self> {
        spec.validate()?;
        params.check_against(&spec)?;
        Ok(Model { spec, params })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed)?;
        Ok(Model { spec, params })
    }

    /// Places the parameters on `tape`, as differentiable leaves when
    /// `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel<'_> {
        let params = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundModel {
            spec: &self.spec,
            params,
        }
    }

    /// Logits plus every traced layer's post-activation values.
    pub fn forward_traced_values(&self, batch: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = bound.forward_traced(&mut tape, x)?;
        let trace = ActivationTrace::from_tape(&tape, &out);
        Ok((tape.value(out.logits).clone(), trace))
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }
}

impl ModelFn for Model {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = self.bind(tape, false);
        bound.forward(tape, x)
    }
}

impl TracedModel for Model {
    fn forward_traced(&self, tape: &mut Tape, x: Var) -> Result<TracedOutput> {
        let bound = self.bind(tape, false);
        bound.forward_traced(tape, x)
    }
}

/// A model whose parameters already live on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel<'a> {
    pub spec: &'a ModelSpec,
    pub params: Vec<Var>,
}

impl ModelFn for BoundModel<'_> {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.spec.apply(tape, &self.params, x)?.logits)
    }
}

impl TracedModel for BoundModel<'_> {
    fn forward_traced(&self, tape: &mut Tape, x: Var) -> Result<TracedOutput> {
        self.spec.apply(tape, &self.params, x)
    }
}

/// Per-row gradients of `logit[row, targets[row]]` with respect to the input
/// rows, together with the logits they were taken at.
pub fn target_input_gradients(
    model: &dyn ModelFn,
    x: &Tensor,
    targets: &[usize],
) -> Result<(Tensor, Tensor)> {
    if x.rank() != 2 || x.rows() != targets.len() {
        return Err(Error::shape("target_input_gradients", x.shape(), &[targets.len()]));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let logits = model.forward(&mut tape, input)?;
    let ls = tape.shape(logits).to_vec();
    if ls.len() != 2 || ls[0] != targets.len() {
        return Err(Error::shape("target_input_gradients", &ls, &[targets.len()]));
    }
    let mut mask = Tensor::zeros(&ls);
    for (row, &t) in targets.iter().enumerate() {
        if t >= ls[1] {
            return Err(Error::InvalidArgument(format!(
                "target class {t} out of range for {} classes",
                ls[1]
            )));
        }
        mask.row_mut(row)[t] = 1.0;
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(logits, mask)?;
    let total = tape.sum(picked);
    let logit_values = tape.value(logits).clone();
    let mut grads = tape.backward(total)?;
    Ok((grads.take(input), logit_values))
}
