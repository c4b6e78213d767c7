//! Cross-entropy, temperature-scaled distillation loss and their sum.
//!
//! The distillation term is `KL(softmax(target/T) ‖ softmax(student/T))`,
//! averaged over rows. The target is a constant: gradients only reach the
//! student logits.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be > 0, got {t}"
        )));
    }
    Ok(())
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    Ok(())
}

/// Temperature softmax of one logit vector, computed with max-subtraction.
pub fn softmax_temp(logits: ArrayView1<f64>, temperature: f64) -> Result<Array1<f64>> {
    check_temperature(temperature)?;
    check_finite(logits.iter().copied())?;
    let scaled = logits.mapv(|z| z / temperature);
    let max = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = scaled.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    Ok(exp / sum)
}

/// Row-wise log-softmax of `logits / T`.
pub(crate) fn log_softmax_rows(logits: ArrayView2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|z| z / temperature);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn check_labels(logits: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if labels.len() != logits.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.nrows()
        )));
    }
    let classes = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("label {bad} >= {classes} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class.
pub fn cross_entropy_loss(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    check_finite(logits.iter().copied())?;
    let log_p = log_softmax_rows(logits, 1.0);
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -log_p[[i, y]])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Loss and `∂loss/∂logits` for cross-entropy.
pub(crate) fn cross_entropy_with_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    check_labels(logits, labels)?;
    let n = labels.len() as f64;
    let log_p = log_softmax_rows(logits, 1.0);
    let mut grad = log_p.mapv(f64::exp);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total -= log_p[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    grad /= n;
    Ok((total / n, grad))
}

fn check_pair(target: ArrayView2<f64>, student: ArrayView2<f64>) -> Result<()> {
    if target.dim() != student.dim() {
        return Err(Error::Shape(format!(
            "target {:?} vs student {:?}",
            target.dim(),
            student.dim()
        )));
    }
    if target.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

fn kl_rows(log_p_target: &Array2<f64>, log_p_student: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (lt, ls) in log_p_target
        .axis_iter(Axis(0))
        .zip(log_p_student.axis_iter(Axis(0)))
    {
        for (&a, &b) in lt.iter().zip(ls.iter()) {
            let p = a.exp();
            if p > 0.0 {
                total += p * (a - b);
            }
        }
    }
    total
}

/// Mean row-wise `KL(softmax(target/T) ‖ softmax(student/T))`.
pub fn kd_loss(target: ArrayView2<f64>, student: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    check_pair(target, student)?;
    check_finite(target.iter().chain(student.iter()).copied())?;
    let lt = log_softmax_rows(target, temperature);
    let ls = log_softmax_rows(student, temperature);
    Ok((kl_rows(&lt, &ls) / target.nrows() as f64).max(0.0))
}

/// Loss and `∂loss/∂student` for the distillation term: `(p_s − p_t) / (T·B)`.
pub(crate) fn kd_with_grad(
    target: ArrayView2<f64>,
    student: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    check_temperature(temperature)?;
    check_pair(target, student)?;
    let n = target.nrows() as f64;
    let lt = log_softmax_rows(target, temperature);
    let ls = log_softmax_rows(student, temperature);
    let loss = (kl_rows(&lt, &ls) / n).max(0.0);
    let grad = (ls.mapv(f64::exp) - lt.mapv(f64::exp)) / (temperature * n);
    Ok((loss, grad))
}

/// `CE(student, labels) + α · KD(target, student, T)`.
pub fn hybrid_loss(
    student: ArrayView2<f64>,
    labels: &[usize],
    target: ArrayView2<f64>,
    alpha: f64,
    temperature: f64,
) -> Result<f64> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("alpha must be >= 0, got {alpha}")));
    }
    let ce = cross_entropy_loss(student, labels)?;
    if alpha == 0.0 {
        return Ok(ce);
    }
    Ok(ce + alpha * kd_loss(target, student, temperature)?)
}
