use ndarray::{Array2, ArrayView2, Axis};

use super::loss::{cross_entropy_with_grad, kd_with_grad};
use super::{Batch, Gradients, Model, Optimizer};
use crate::error::{Error, Result};

/// Weights of the hybrid objective `CE + α·KD` and the distillation temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            temperature: 4.0,
        }
    }
}

/// Inputs on which the distillation term is evaluated, paired row by row with
/// the (constant) target logits.
#[derive(Debug, Clone, Copy)]
pub struct DistillBatch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
}

impl<'a> DistillBatch<'a> {
    /// Distillation on the batch's own inputs.
    pub fn aligned(batch: &'a Batch, targets: ArrayView2<'a, f64>) -> Self {
        DistillBatch {
            inputs: batch.inputs.view(),
            targets,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOutcome {
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
    /// Rows pushed through forward + backward.
    pub rows: usize,
}

fn backprop(
    model: &Model,
    inputs: ArrayView2<f64>,
    grad_fn: impl FnOnce(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
) -> Result<(f64, Gradients)> {
    let cache = model.forward_cached(inputs)?;
    let (loss, mut delta) = grad_fn(&cache.output)?;
    let mut grads = Gradients::zeros_like(model);
    for (i, layer) in model.layers().iter().enumerate().rev() {
        if layer.activation == super::Activation::Relu {
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre_activations[i])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
        }
        let (gw, gb) = &mut grads.layers[i];
        *gw = delta.t().dot(&cache.layer_inputs[i]);
        *gb = delta.sum_axis(Axis(0));
        if i > 0 {
            delta = delta.dot(&layer.weight);
        }
    }
    Ok((loss, grads))
}

/// Hybrid loss and its parameter gradient.
///
/// The CE term uses `batch` (skipped when it has no labels). The KD term uses
/// `distill` and is skipped entirely when `alpha == 0`.
pub fn loss_and_gradients(
    model: &Model,
    batch: &Batch,
    distill: Option<DistillBatch<'_>>,
    cfg: &LossConfig,
) -> Result<(StepOutcome, Gradients)> {
    if !(cfg.alpha >= 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::Parameter(format!(
            "alpha must be >= 0, got {}",
            cfg.alpha
        )));
    }
    let mut out = StepOutcome::default();
    let mut total = Gradients::zeros_like(model);
    if let Some(labels) = &batch.labels {
        let (ce, g) = backprop(model, batch.inputs.view(), |logits| {
            cross_entropy_with_grad(logits.view(), labels)
        })?;
        out.ce = ce;
        out.rows += batch.len();
        total = g;
    }
    if let Some(d) = distill.filter(|_| cfg.alpha > 0.0) {
        if d.inputs.nrows() != d.targets.nrows() {
            return Err(Error::Shape(format!(
                "{} distillation inputs for {} target rows",
                d.inputs.nrows(),
                d.targets.nrows()
            )));
        }
        let (kd, g) = backprop(model, d.inputs, |logits| {
            kd_with_grad(d.targets, logits.view(), cfg.temperature)
        })?;
        out.kd = kd;
        out.rows += d.inputs.nrows();
        total.add_scaled(&g, cfg.alpha);
    }
    out.loss = out.ce + cfg.alpha * out.kd;
    if !out.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", out.loss)));
    }
    Ok((out, total))
}

/// One optimizer step on the hybrid loss.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    distill: Option<DistillBatch<'_>>,
    cfg: &LossConfig,
    opt: &mut Optimizer,
) -> Result<StepOutcome> {
    let (out, grads) = loss_and_gradients(model, batch, distill, cfg)?;
    opt.apply(model, &grads);
    Ok(out)
}

/// Loss only, used by the finite-difference checker.
pub(crate) fn loss_value(
    model: &Model,
    batch: &Batch,
    distill: Option<DistillBatch<'_>>,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut loss = 0.0;
    if let Some(labels) = &batch.labels {
        let logits = model.forward(batch.inputs.view())?;
        loss += super::loss::cross_entropy_loss(logits.view(), labels)?;
    }
    if let Some(d) = distill.filter(|_| cfg.alpha > 0.0) {
        let logits = model.forward(d.inputs)?;
        loss += cfg.alpha * super::loss::kd_loss(d.targets, logits.view(), cfg.temperature)?;
    }
    Ok(loss)
}
