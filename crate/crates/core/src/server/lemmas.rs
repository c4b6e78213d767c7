//! Numerical checks of the EMA drift bound and the aggregation-error decomposition.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::client::frobenius;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftRound {
    pub round: usize,
    /// `‖Z̃ʳ − Z̃ʳ⁻¹‖_F`, measured.
    pub drift: f64,
    /// `(1−γ)·‖Zʳ − Z̃ʳ⁻¹‖_F`.
    pub identity: f64,
    /// `(1−γ)·Σₖ γᵏ·‖Zʳ⁻ᵏ − Zʳ⁻ᵏ⁻¹‖_F`.
    pub bound: f64,
    /// `|drift − identity| / identity` (0 when both vanish).
    pub residual: f64,
    /// `bound − drift`.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub gamma: f64,
    pub rounds: Vec<DriftRound>,
    pub max_residual: f64,
    pub min_slack: f64,
}

impl DriftReport {
    pub fn violations(&self, tol: f64) -> usize {
        self.rounds
            .iter()
            .filter(|r| r.residual > tol || r.slack < -tol)
            .count()
    }
}

/// Runs the EMA from `Z̃⁰ = Z⁰` over `raw` and evaluates the drift identity
/// and bound at every round.
pub fn verify_ema_drift_bound(raw: &[Array2<f64>], gamma: f64) -> Result<DriftReport> {
    if raw.len() < 2 {
        return Err(Error::Parameter("need at least two raw targets".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!(
            "gamma must be in [0, 1], got {gamma}"
        )));
    }
    let dim = raw[0].dim();
    if raw.iter().any(|z| z.dim() != dim) {
        return Err(Error::Shape("raw targets differ in shape".into()));
    }
    let raw_drift: Vec<f64> = std::iter::once(0.0)
        .chain(raw.windows(2).map(|w| frobenius(&(&w[1] - &w[0]))))
        .collect();
    let mut smoothed = raw[0].clone();
    let mut rounds = Vec::with_capacity(raw.len() - 1);
    for r in 1..raw.len() {
        let mut next = smoothed.mapv(|s| gamma * s);
        next.zip_mut_with(&raw[r], |n, &z| *n += (1.0 - gamma) * z);
        let drift = frobenius(&(&next - &smoothed));
        let identity = (1.0 - gamma) * frobenius(&(&raw[r] - &smoothed));
        let bound = (1.0 - gamma)
            * (0..r)
                .map(|k| gamma.powi(k as i32) * raw_drift[r - k])
                .sum::<f64>();
        let diff = (drift - identity).abs();
        let residual = if identity > 0.0 {
            diff / identity
        } else {
            diff
        };
        rounds.push(DriftRound {
            round: r,
            drift,
            identity,
            bound,
            residual,
            slack: bound - drift,
        });
        smoothed = next;
    }
    Ok(DriftReport {
        gamma,
        max_residual: rounds.iter().map(|r| r.residual).fold(0.0, f64::max),
        min_slack: rounds.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min),
        rounds,
    })
}

fn uniform_matrix(rng: &mut Rng, m: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, c), |_| rng.random_range(-1.0..=1.0))
}

/// Summary over many random sequences with entries `U[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftTrials {
    pub trials: usize,
    pub gammas: Vec<f64>,
    pub sequences: usize,
    pub max_residual: f64,
    pub min_slack: f64,
    pub violations: usize,
}

pub fn random_drift_trials(
    trials: usize,
    gammas: &[f64],
    rounds: usize,
    m: usize,
    c: usize,
    seed: u64,
    tol: f64,
) -> Result<DriftTrials> {
    let mut out = DriftTrials {
        trials,
        gammas: gammas.to_vec(),
        sequences: 0,
        max_residual: 0.0,
        min_slack: f64::INFINITY,
        violations: 0,
    };
    for (gi, &gamma) in gammas.iter().enumerate() {
        for t in 0..trials {
            let mut rng = derived_rng(seed, &[gi as u64, t as u64]);
            let raw: Vec<Array2<f64>> = (0..=rounds)
                .map(|_| uniform_matrix(&mut rng, m, c))
                .collect();
            let report = verify_ema_drift_bound(&raw, gamma)?;
            out.sequences += 1;
            out.max_residual = out.max_residual.max(report.max_residual);
            out.min_slack = out.min_slack.min(report.min_slack);
            out.violations += report.violations(tol);
        }
    }
    Ok(out)
}

/// Largest `|Δʳ − (1−γ)γ^{r−1}‖J‖| / ‖J‖` for one jump `0 → J` held for
/// `rounds` rounds. Zero up to rounding.
pub fn single_jump_deviation(
    gamma: f64,
    rounds: usize,
    m: usize,
    c: usize,
    seed: u64,
) -> Result<f64> {
    let jump = uniform_matrix(&mut derived_rng(seed, &[2]), m, c);
    let norm = frobenius(&jump);
    let mut raw = vec![Array2::zeros((m, c))];
    raw.extend(std::iter::repeat_n(jump, rounds));
    let report = verify_ema_drift_bound(&raw, gamma)?;
    Ok(report
        .rounds
        .iter()
        .map(|d| (d.drift - (1.0 - gamma) * gamma.powi(d.round as i32 - 1) * norm).abs() / norm)
        .fold(0.0, f64::max))
}

/// EMA drift over raw targets that jump once at `jump_round` and carry
/// uniform noise of amplitude `noise` every round.
pub fn drift_trace(
    gamma: f64,
    rounds: usize,
    jump_round: usize,
    noise: f64,
    m: usize,
    c: usize,
    seed: u64,
) -> Result<DriftReport> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Parameter(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = derived_rng(seed, &[3]);
    let jump = uniform_matrix(&mut rng, m, c);
    let raw: Vec<Array2<f64>> = (0..=rounds)
        .map(|r| {
            let mut z = uniform_matrix(&mut rng, m, c).mapv(|v| noise * v);
            if r >= jump_round {
                z += &jump;
            }
            z
        })
        .collect();
    verify_ema_drift_bound(&raw, gamma)
}

/// One `K` of the aggregation experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregationPoint {
    pub clients: usize,
    pub mse: f64,
    /// Standard error of `mse` over trials.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregationReport {
    pub points: Vec<AggregationPoint>,
    /// Least-squares fit `mse ≈ a/K + b`.
    pub a: f64,
    pub b: f64,
    pub b_std_error: f64,
    /// Predicted `a = σ²·M·C` and `b = κ²`.
    pub expected_a: f64,
    pub expected_b: f64,
    /// Least-squares slope of `ln mse` against `ln K`.
    pub log_log_slope: f64,
}

/// Monte-Carlo estimate of `E‖mean_k z_k − Z*‖²_F`.
///
/// Each client sends `z_k = Z* + b + ε_k` with iid `ε ~ N(0, σ²)` per entry and
/// a shared offset `b` of norm `κ` that models heterogeneity bias relative to
/// the reference `Z*`.
pub fn verify_aggregation_variance(
    k_list: &[usize],
    trials: usize,
    sigma: f64,
    kappa: f64,
    m: usize,
    c: usize,
    seed: u64,
) -> Result<AggregationReport> {
    if k_list.len() < 2 || k_list.contains(&0) {
        return Err(Error::Parameter(
            "need at least two client counts, all >= 1".into(),
        ));
    }
    if trials < 2 {
        return Err(Error::Parameter("need at least two trials".into()));
    }
    if !(sigma >= 0.0 && kappa >= 0.0) {
        return Err(Error::Parameter("sigma and kappa must be >= 0".into()));
    }
    let mut setup = derived_rng(seed, &[0]);
    let direction: Array2<f64> =
        Array2::from_shape_fn((m, c), |_| StandardNormal.sample(&mut setup));
    let norm = frobenius(&direction);
    let bias = if norm > 0.0 {
        direction * (kappa / norm)
    } else {
        Array2::zeros((m, c))
    };

    let point = |&k: &usize| -> AggregationPoint {
        let mut rng = derived_rng(seed, &[1, k as u64]);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let mut mean_noise = Array2::<f64>::zeros((m, c));
        for _ in 0..trials {
            mean_noise.fill(0.0);
            for _ in 0..k {
                mean_noise.mapv_inplace(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + sigma * e
                });
            }
            let err: f64 = mean_noise
                .iter()
                .zip(bias.iter())
                .map(|(&e, &b)| {
                    let d = e / k as f64 + b;
                    d * d
                })
                .sum();
            sum += err;
            sum_sq += err * err;
        }
        let n = trials as f64;
        let mse = sum / n;
        let var = (sum_sq / n - mse * mse).max(0.0) * n / (n - 1.0);
        AggregationPoint {
            clients: k,
            mse,
            std_error: (var / n).sqrt(),
        }
    };
    #[cfg(feature = "parallel")]
    let points: Vec<AggregationPoint> = {
        use rayon::prelude::*;
        k_list.par_iter().map(point).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let points: Vec<AggregationPoint> = k_list.iter().map(point).collect();

    // mse = a·x + b with x = 1/K; b is a linear combination of the mse values
    let xs: Vec<f64> = points.iter().map(|p| 1.0 / p.clients as f64).collect();
    let n = xs.len() as f64;
    let x_bar = xs.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_bar) * (x - x_bar)).sum();
    let weights_a: Vec<f64> = xs.iter().map(|x| (x - x_bar) / sxx).collect();
    let weights_b: Vec<f64> = weights_a.iter().map(|w| 1.0 / n - x_bar * w).collect();
    let a: f64 = weights_a.iter().zip(&points).map(|(w, p)| w * p.mse).sum();
    let b: f64 = weights_b.iter().zip(&points).map(|(w, p)| w * p.mse).sum();
    let b_std_error = weights_b
        .iter()
        .zip(&points)
        .map(|(w, p)| (w * p.std_error).powi(2))
        .sum::<f64>()
        .sqrt();

    let lx: Vec<f64> = points.iter().map(|p| (p.clients as f64).ln()).collect();
    let ly: Vec<f64> = points
        .iter()
        .map(|p| p.mse.max(f64::MIN_POSITIVE).ln())
        .collect();
    let lx_bar = lx.iter().sum::<f64>() / n;
    let ly_bar = ly.iter().sum::<f64>() / n;
    let log_log_slope = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (x - lx_bar) * (y - ly_bar))
        .sum::<f64>()
        / lx.iter().map(|x| (x - lx_bar).powi(2)).sum::<f64>();

    Ok(AggregationReport {
        points,
        a,
        b,
        b_std_error,
        expected_a: sigma * sigma * (m * c) as f64,
        expected_b: kappa * kappa,
        log_log_slope,
    })
}
