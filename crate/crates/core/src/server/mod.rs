//! Teacher pretraining, logit aggregation, teacher fusion and EMA smoothing.

pub mod lemmas;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::client::{LogitMatrix, Source};
use crate::data::PublicSet;
use crate::error::{Error, Result};
use crate::nas::ArchitectureSpec;
use crate::nn::{train_step, LossConfig, Model, Optimizer, OptimizerKind};
use crate::rng::{derive_seed, derived_rng, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AggregationRule {
    Mean,
    Median,
    /// Drops `⌊f·K⌋` values from each end per coordinate.
    Trimmed(f64),
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationRule::Mean => write!(f, "mean"),
            AggregationRule::Median => write!(f, "median"),
            AggregationRule::Trimmed(frac) => write!(f, "trimmed:{frac}"),
        }
    }
}

pub const DEFAULT_TRIM: f64 = 0.1;

impl FromStr for AggregationRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(AggregationRule::Mean),
            "median" => Ok(AggregationRule::Median),
            "trimmed" => Ok(AggregationRule::Trimmed(DEFAULT_TRIM)),
            other => {
                let frac = other
                    .strip_prefix("trimmed:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Parameter(format!(
                            "unknown aggregation `{other}` (mean, median, trimmed:<f>)"
                        ))
                    })?;
                if !(0.0..0.5).contains(&frac) {
                    return Err(Error::Parameter(format!(
                        "trim fraction must be in [0, 0.5), got {frac}"
                    )));
                }
                Ok(AggregationRule::Trimmed(frac))
            }
        }
    }
}

impl TryFrom<String> for AggregationRule {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AggregationRule> for String {
    fn from(r: AggregationRule) -> String {
        r.to_string()
    }
}

/// Combines client predictions coordinate by coordinate. Inputs are expected
/// in client-id order; the result does not depend on that order.
pub fn aggregate_predictions(preds: &[LogitMatrix], rule: AggregationRule) -> Result<LogitMatrix> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Aggregation("no predictions to aggregate".into()))?;
    for p in preds {
        if p.values().dim() != first.values().dim() {
            return Err(Error::Aggregation(format!(
                "shape {:?} vs {:?}",
                p.values().dim(),
                first.values().dim()
            )));
        }
        if p.round != first.round {
            return Err(Error::Aggregation(format!(
                "round {} vs {}",
                p.round, first.round
            )));
        }
    }
    let k = preds.len();
    let values = match rule {
        AggregationRule::Mean => {
            let mut sum = Array2::zeros(first.values().dim());
            for p in preds {
                sum += p.values();
            }
            sum / k as f64
        }
        AggregationRule::Median | AggregationRule::Trimmed(_) => {
            let drop = match rule {
                AggregationRule::Trimmed(f) => {
                    if !(0.0..0.5).contains(&f) {
                        return Err(Error::Parameter(format!(
                            "trim fraction must be in [0, 0.5), got {f}"
                        )));
                    }
                    (f * k as f64).floor() as usize
                }
                _ => 0,
            };
            let mut column = vec![0.0; k];
            Array2::from_shape_fn(first.values().dim(), |idx| {
                for (slot, p) in column.iter_mut().zip(preds) {
                    *slot = p.values()[idx];
                }
                column.sort_by(f64::total_cmp);
                match rule {
                    AggregationRule::Median if k % 2 == 1 => column[k / 2],
                    AggregationRule::Median => 0.5 * (column[k / 2 - 1] + column[k / 2]),
                    _ => {
                        let kept = &column[drop..k - drop];
                        kept.iter().sum::<f64>() / kept.len() as f64
                    }
                }
            })
        }
    };
    LogitMatrix::new(values, first.round, Source::Aggregate)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Parameter(format!(
            "{name} must be in [0, 1], got {v}"
        )));
    }
    Ok(())
}

/// `β·P_T + (1−β)·P_agg`, tagged with the aggregate's round.
pub fn fuse_with_teacher(p_agg: &LogitMatrix, p_t: &LogitMatrix, beta: f64) -> Result<LogitMatrix> {
    check_unit("beta", beta)?;
    if p_agg.values().dim() != p_t.values().dim() {
        return Err(Error::Shape(format!(
            "aggregate {:?} vs teacher {:?}",
            p_agg.values().dim(),
            p_t.values().dim()
        )));
    }
    let mut out = p_t.values().mapv(|t| beta * t);
    out.zip_mut_with(p_agg.values(), |o, &a| *o += (1.0 - beta) * a);
    LogitMatrix::new(out, p_agg.round, Source::Aggregate)
}

/// How the teacher share `β` evolves over rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    Constant {
        beta: f64,
    },
    /// `β₀·(1 − r/R)`.
    LinearDecay {
        beta0: f64,
        rounds: u32,
    },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Constant { beta: 0.5 }
    }
}

impl BetaSchedule {
    pub fn at(&self, round: u32) -> f64 {
        match *self {
            BetaSchedule::Constant { beta } => beta,
            BetaSchedule::LinearDecay { beta0, rounds } if rounds > 0 => {
                beta0 * (1.0 - f64::from(round.min(rounds)) / f64::from(rounds))
            }
            BetaSchedule::LinearDecay { .. } => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BetaSchedule::Constant { beta } => check_unit("beta", beta),
            BetaSchedule::LinearDecay { beta0, .. } => check_unit("beta0", beta0),
        }
    }
}

/// The broadcast target `Z̃` with the raw target that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTarget {
    pub smoothed: LogitMatrix,
    pub raw: LogitMatrix,
    pub round: u32,
    pub beta: f64,
    pub gamma: f64,
    /// `‖Z̃ʳ − Z̃ʳ⁻¹‖_F`; zero for the warm start.
    pub drift: f64,
}

impl DistillTarget {
    /// Round-0 target equal to the teacher predictions.
    pub fn warm_start(teacher: &LogitMatrix) -> Self {
        let t = teacher.retagged(0, Source::Aggregate);
        DistillTarget {
            smoothed: t.clone(),
            raw: t,
            round: 0,
            beta: 1.0,
            gamma: 0.0,
            drift: 0.0,
        }
    }
}

/// `Z̃ʳ = γ·Z̃ʳ⁻¹ + (1−γ)·Zʳ`. `z_raw` must carry round `prev.round + 1`.
pub fn ema_update(
    prev: &DistillTarget,
    z_raw: &LogitMatrix,
    gamma: f64,
    beta: f64,
) -> Result<DistillTarget> {
    check_unit("gamma", gamma)?;
    if z_raw.round != prev.round + 1 {
        return Err(Error::Protocol(format!(
            "target at round {} cannot absorb a round-{} update",
            prev.round, z_raw.round
        )));
    }
    if z_raw.values().dim() != prev.smoothed.values().dim() {
        return Err(Error::Shape(format!(
            "update {:?} vs target {:?}",
            z_raw.values().dim(),
            prev.smoothed.values().dim()
        )));
    }
    let mut next = prev.smoothed.values().mapv(|s| gamma * s);
    next.zip_mut_with(z_raw.values(), |n, &z| *n += (1.0 - gamma) * z);
    let drift = crate::client::frobenius(&(&next - prev.smoothed.values()));
    Ok(DistillTarget {
        smoothed: LogitMatrix::new(next, z_raw.round, Source::Aggregate)?,
        raw: z_raw.clone(),
        round: z_raw.round,
        beta,
        gamma,
        drift,
    })
}

/// Training settings for the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 20,
            lr: 0.05,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// A frozen model trained on the labelled public set, with its cached
/// predictions `P_T`.
#[derive(Debug, Clone)]
pub struct Teacher {
    model: Model,
    predictions: LogitMatrix,
    train_accuracy: f64,
}

impl Teacher {
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn predictions(&self) -> &LogitMatrix {
        &self.predictions
    }

    pub fn train_accuracy(&self) -> f64 {
        self.train_accuracy
    }
}

pub fn pretrain_teacher(
    public: &PublicSet,
    arch: &ArchitectureSpec,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<Teacher> {
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("teacher batch size must be >= 1".into()));
    }
    let data = public.teacher_dataset();
    let mut model = Model::new(arch, derive_seed(seed, &[stream::TEACHER, stream::INIT]));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut rng = derived_rng(seed, &[stream::TEACHER, stream::SHUFFLE]);
    let loss = LossConfig {
        alpha: 0.0,
        temperature: 1.0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            train_step(&mut model, &data.batch(chunk)?, None, &loss, &mut opt)?;
        }
    }
    let logits = model.forward(public.inputs.view())?;
    let correct = crate::nn::argmax_rows(&logits)
        .iter()
        .zip(public.teacher_labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(Teacher {
        predictions: LogitMatrix::new(logits, 0, Source::Teacher)?,
        train_accuracy: correct as f64 / public.len() as f64,
        model,
    })
}
