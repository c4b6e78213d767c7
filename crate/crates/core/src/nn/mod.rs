//! Dense-network kernel: forward pass, losses, manual backprop, optimizers and
//! a finite-difference gradient checker.
//!
//! All arithmetic is `f64`. Hidden layers use ReLU, the output layer is linear.

mod gradcheck;
pub mod loss;
mod optim;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nas::ArchitectureSpec;
use crate::rng::rng_from;

pub use gradcheck::{finite_diff_gradcheck, random_gradcheck, GradcheckSummary};
pub use loss::{cross_entropy_loss, hybrid_loss, kd_loss, softmax_temp};
pub use optim::{Optimizer, OptimizerKind};
pub use train::{loss_and_gradients, train_step, DistillBatch, LossConfig, StepOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
        }
    }
}

/// Fully connected layer computing `act(x · Wᵀ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Dense>,
    arch: ArchitectureSpec,
}

impl Model {
    /// Fresh model for `arch` with He-uniform hidden weights, Glorot-uniform
    /// output weights and zero biases.
    pub fn new(arch: &ArchitectureSpec, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(fan_in, fan_out))| {
                let (limit, activation) = if i == last {
                    (
                        (6.0 / (fan_in + fan_out) as f64).sqrt(),
                        Activation::Identity,
                    )
                } else {
                    ((6.0 / fan_in as f64).sqrt(), Activation::Relu)
                };
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Model {
            layers,
            arch: arch.clone(),
        }
    }

    /// Builds a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Shape("model needs at least one layer".into()))?;
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != out dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        let hidden = layers[..layers.len() - 1]
            .iter()
            .map(Dense::out_dim)
            .collect();
        let arch =
            ArchitectureSpec::new(first.in_dim(), hidden, layers[layers.len() - 1].out_dim())?;
        Ok(Model { layers, arch })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Raw logits for a `B × d` input block.
    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs)?;
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            x = affine(layer, x.view());
        }
        Ok(x)
    }

    /// Forward pass keeping every layer's input and pre-activation for backprop.
    pub(crate) fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(inputs)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = inputs.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            let mut a = z.clone();
            layer.activation.apply(&mut a);
            layer_inputs.push(x);
            pre_activations.push(z);
            x = a;
        }
        Ok(ForwardCache {
            layer_inputs,
            pre_activations,
            output: x,
        })
    }

    fn check_input(&self, inputs: ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} != model input dim {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut() {
                *w = it.next().unwrap_or_default();
            }
            for b in layer.bias.iter_mut() {
                *b = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }

    /// Predicted class per row.
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(inputs)?))
    }
}

fn affine(layer: &Dense, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    layer.activation.apply(&mut z);
    z
}

pub(crate) struct ForwardCache {
    pub layer_inputs: Vec<Array2<f64>>,
    pub pre_activations: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Per-layer parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.weight.raw_dim()),
                        Array1::zeros(l.bias.len()),
                    )
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.scaled_add(scale, ow);
            b.scaled_add(scale, ob);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

/// A minibatch. Labels are absent for public-set inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(
        inputs: Array2<f64>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Shape("batch must contain at least one row".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != inputs.nrows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    inputs.nrows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::Index(format!(
                    "label {bad} >= {num_classes} classes"
                )));
            }
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}
