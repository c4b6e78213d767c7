use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::train::{loss_and_gradients, loss_value};
use super::{Batch, DistillBatch, LossConfig, Model};
use crate::error::{Error, Result};
use crate::nas::ArchitectureSpec;
use crate::rng::derived_rng;

/// Central-difference check of the analytic gradient over every parameter.
///
/// Returns `max |g_a − g_fd| / max(|g_a|, |g_fd|, 1e-8)`.
pub fn finite_diff_gradcheck(
    model: &Model,
    batch: &Batch,
    distill: Option<DistillBatch<'_>>,
    cfg: &LossConfig,
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let (_, grads) = loss_and_gradients(model, batch, distill, cfg)?;
    let analytic = grads.flat();
    let base = model.params_flat();
    let mut probe = model.clone();
    let mut params = base.clone();
    let mut worst = 0.0f64;
    for (i, &g_a) in analytic.iter().enumerate() {
        params[i] = base[i] + eps;
        probe.set_params_flat(&params)?;
        let up = loss_value(&probe, batch, distill, cfg)?;
        params[i] = base[i] - eps;
        probe.set_params_flat(&params)?;
        let down = loss_value(&probe, batch, distill, cfg)?;
        params[i] = base[i];
        let g_fd = (up - down) / (2.0 * eps);
        let denom = g_a.abs().max(g_fd.abs()).max(1e-8);
        worst = worst.max((g_a - g_fd).abs() / denom);
    }
    Ok(worst)
}

/// Central differences are only meaningful away from ReLU kinks; cases with a
/// hidden pre-activation closer than this to 0 are redrawn.
const KINK_MARGIN: f64 = 1e-3;

struct GradCase {
    model: Model,
    inputs: Array2<f64>,
    labels: Vec<usize>,
    public: Array2<f64>,
    targets: Array2<f64>,
    cfg: LossConfig,
}

impl GradCase {
    fn min_hidden_margin(&self) -> Result<f64> {
        let mut margin = f64::INFINITY;
        for x in [&self.inputs, &self.public] {
            let cache = self.model.forward_cached(x.view())?;
            let hidden = &cache.pre_activations[..cache.pre_activations.len() - 1];
            margin = hidden.iter().flatten().fold(margin, |m, z| m.min(z.abs()));
        }
        Ok(margin)
    }
}

fn random_case(rng: &mut crate::rng::Rng) -> Result<GradCase> {
    let input = rng.random_range(2..=6);
    let classes = rng.random_range(2..=5);
    let depth = rng.random_range(0..=2);
    let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=32)).collect();
    let rows = rng.random_range(1..=5);
    let arch = ArchitectureSpec::new(input, widths, classes)?;
    let mut model = Model::new(&arch, rng.random());
    for layer in model.layers_mut() {
        layer
            .bias
            .mapv_inplace(|_| 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    let mut normal = |r: usize, c: usize, scale: f64| {
        Array2::from_shape_fn((r, c), |_| scale * rng.sample::<f64, _>(StandardNormal))
    };
    let inputs = normal(rows, input, 1.0);
    let public = normal(rows, input, 1.0);
    let targets = normal(rows, classes, 2.0);
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let cfg = LossConfig {
        alpha: rng.random_range(0.1..2.0),
        temperature: rng.random_range(0.5..8.0),
    };
    Ok(GradCase {
        model,
        inputs,
        labels,
        public,
        targets,
        cfg,
    })
}

/// Worst relative error per loss over a batch of random small models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub models: usize,
    pub ce: f64,
    pub kd: f64,
    pub hybrid: f64,
}

impl GradcheckSummary {
    pub fn worst(&self) -> f64 {
        self.ce.max(self.kd).max(self.hybrid)
    }
}

/// Checks CE, KD and the hybrid loss on `models` random MLPs (0 to 2 hidden
/// layers of width <= 32, a few inputs and classes, random biases,
/// temperature and weight), each drawn away from ReLU kinks.
pub fn random_gradcheck(models: usize, seed: u64, eps: f64) -> Result<GradcheckSummary> {
    let mut out = GradcheckSummary {
        models,
        ce: 0.0,
        kd: 0.0,
        hybrid: 0.0,
    };
    for i in 0..models {
        let mut rng = derived_rng(seed, &[i as u64]);
        let case = loop {
            let case = random_case(&mut rng)?;
            if case.min_hidden_margin()? >= KINK_MARGIN {
                break case;
            }
        };
        let GradCase {
            model,
            inputs,
            labels,
            public,
            targets,
            cfg,
        } = case;
        let classes = model.num_classes();
        let labelled = Batch::new(inputs, Some(labels), classes)?;
        let unlabelled = Batch::new(public.clone(), None, classes)?;
        let d = DistillBatch {
            inputs: public.view(),
            targets: targets.view(),
        };
        out.ce = out
            .ce
            .max(finite_diff_gradcheck(&model, &labelled, None, &cfg, eps)?);
        out.kd = out.kd.max(finite_diff_gradcheck(
            &model,
            &unlabelled,
            Some(d),
            &cfg,
            eps,
        )?);
        out.hybrid = out.hybrid.max(finite_diff_gradcheck(
            &model,
            &labelled,
            Some(d),
            &cfg,
            eps,
        )?);
    }
    Ok(out)
}
