use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::{Gradients, Model};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// SGD or Adam state for one model. Adam moments are allocated on first use.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    moments: Option<Vec<Moments>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
}

impl Optimizer {
    /// A learning rate of exactly zero is accepted and leaves parameters untouched.
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        Ok(Optimizer {
            kind,
            lr,
            step: 0,
            moments: None,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, model: &mut Model, grads: &Gradients) {
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (layer, (gw, gb)) in model.layers_mut().iter_mut().zip(&grads.layers) {
                    layer.weight.scaled_add(-lr, gw);
                    layer.bias.scaled_add(-lr, gb);
                }
            }
            OptimizerKind::Adam => {
                let moments = self.moments.get_or_insert_with(|| {
                    grads
                        .layers
                        .iter()
                        .map(|(gw, gb)| Moments {
                            m_w: Array2::zeros(gw.raw_dim()),
                            v_w: Array2::zeros(gw.raw_dim()),
                            m_b: Array1::zeros(gb.len()),
                            v_b: Array1::zeros(gb.len()),
                        })
                        .collect()
                });
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for ((layer, (gw, gb)), mo) in model
                    .layers_mut()
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(moments.iter_mut())
                {
                    Zip::from(&mut layer.weight)
                        .and(gw)
                        .and(&mut mo.m_w)
                        .and(&mut mo.v_w)
                        .for_each(|p, &g, m, v| adam_update(p, g, m, v, lr, c1, c2));
                    Zip::from(&mut layer.bias)
                        .and(gb)
                        .and(&mut mo.m_b)
                        .and(&mut mo.v_b)
                        .for_each(|p, &g, m, v| adam_update(p, g, m, v, lr, c1, c2));
                }
            }
        }
    }
}

#[inline]
fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, c1: f64, c2: f64) {
    *m = BETA1 * *m + (1.0 - BETA1) * g;
    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *p -= lr * m_hat / (v_hat.sqrt() + EPS);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nas::ArchitectureSpec;

    #[test]
    fn rejects_negative_learning_rate() {
        assert!(Optimizer::new(OptimizerKind::Sgd, -0.1).is_err());
        assert!(Optimizer::new(OptimizerKind::Adam, f64::NAN).is_err());
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let arch = ArchitectureSpec::new(2, vec![], 2).unwrap();
        let mut model = Model::new(&arch, 0);
        let before = model.params_flat();
        let mut grads = Gradients::zeros_like(&model);
        grads.layers[0].0.fill(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.25).unwrap();
        opt.apply(&mut model, &grads);
        let after = model.params_flat();
        assert_eq!(after[0], before[0] - 0.25);
        assert_eq!(after[4], before[4]);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let arch = ArchitectureSpec::new(1, vec![], 1).unwrap();
        let mut model = Model::new(&arch, 0);
        let before = model.params_flat();
        let mut grads = Gradients::zeros_like(&model);
        grads.layers[0].0.fill(3.0);
        grads.layers[0].1.fill(-0.5);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01).unwrap();
        opt.apply(&mut model, &grads);
        let after = model.params_flat();
        assert!((after[0] - (before[0] - 0.01)).abs() < 1e-9);
        assert!((after[1] - (before[1] + 0.01)).abs() < 1e-9);
    }
}
