//! Accuracy and loss, resource proxies, and the composite efficiency scores.
//!
//! Units of the CPU, memory and communication columns do not matter: every
//! composite score normalizes them within its group.

mod report;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::RoundRecord;
use crate::nn::{argmax_rows, cross_entropy_loss, Model};

pub use report::{
    emit_report, parse_method_csv, read_method_csv, read_rounds_jsonl, read_scored_csv,
    read_summaries, write_scored_csv, ReportFormat, COMPOSITE_COLUMNS, ROUND_COLUMNS,
    SIMULATED_ARCH,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Top-1 accuracy and mean cross-entropy of `model` on `ds`.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Parameter("cannot evaluate on an empty set".into()));
    }
    let logits = model.forward(ds.inputs.view())?;
    let correct = argmax_rows(&logits)
        .iter()
        .zip(&ds.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(Evaluation {
        accuracy: correct as f64 / ds.len() as f64,
        loss: cross_entropy_loss(logits.view(), &ds.labels)?,
    })
}

/// `(cpu, mem)`: mean over clients of the per-round training flops, and mean
/// over clients of the peak memory proxy.
pub fn resource_proxies(records: &[RoundRecord]) -> Result<(f64, f64)> {
    let first = records
        .first()
        .ok_or_else(|| Error::Parameter("no round records".into()))?;
    let k = first.clients.len();
    if k == 0 || records.iter().any(|r| r.clients.len() != k) {
        return Err(Error::Parameter(
            "round records disagree on the client count".into(),
        ));
    }
    let mut flops = vec![0u64; k];
    let mut peak = vec![0u64; k];
    for r in records {
        for (i, c) in r.clients.iter().enumerate() {
            flops[i] += c.train_flops;
            peak[i] = peak[i].max(c.mem_bytes);
        }
    }
    let rounds = records.len() as f64;
    let cpu = flops.iter().map(|&f| f as f64 / rounds).sum::<f64>() / k as f64;
    let mem = peak.iter().map(|&m| m as f64).sum::<f64>() / k as f64;
    Ok((cpu, mem))
}

/// One method's raw measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub distribution: String,
    pub arch: String,
    pub acc: f64,
    pub loss: f64,
    pub cpu: f64,
    pub mem: f64,
    pub comm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeScores {
    pub res: f64,
    pub pqs: f64,
    pub ces: f64,
    pub ues: f64,
}

/// RES, PQS, CES and UES for each member of a comparison group.
///
/// `Acc_norm` is min-max over the group, and 1 for everybody when all
/// accuracies are equal.
pub fn composite_scores(group: &[MethodSummary]) -> Result<Vec<CompositeScores>> {
    if group.len() < 2 {
        return Err(Error::Parameter(format!(
            "composite scores need a group of at least 2, got {}",
            group.len()
        )));
    }
    for m in group {
        let fields = [m.acc, m.loss, m.cpu, m.mem, m.comm];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!(
                "{}: non-finite measurement",
                m.method
            )));
        }
        if m.loss <= 0.0 || m.comm <= 0.0 || m.cpu < 0.0 || m.mem < 0.0 {
            return Err(Error::Parameter(format!(
                "{}: loss and comm must be > 0, cpu and mem >= 0",
                m.method
            )));
        }
    }
    let max = |f: fn(&MethodSummary) -> f64| group.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    let min = |f: fn(&MethodSummary) -> f64| group.iter().map(f).fold(f64::INFINITY, f64::min);
    let (max_cpu, max_mem, max_comm) = (max(|m| m.cpu), max(|m| m.mem), max(|m| m.comm));
    if max_cpu <= 0.0 || max_mem <= 0.0 {
        return Err(Error::Parameter("max cpu and max mem must be > 0".into()));
    }
    let (acc_lo, acc_hi, loss_lo) = (min(|m| m.acc), max(|m| m.acc), min(|m| m.loss));
    Ok(group
        .iter()
        .map(|m| {
            let res = 0.5 * m.cpu / max_cpu + 0.5 * m.mem / max_mem;
            let acc_norm = if acc_hi > acc_lo {
                (m.acc - acc_lo) / (acc_hi - acc_lo)
            } else {
                1.0
            };
            let pqs = 0.7 * acc_norm + 0.3 * loss_lo / m.loss;
            let ces = max_comm / m.comm;
            CompositeScores {
                res,
                pqs,
                ces,
                ues: pqs * ces / res,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    #[serde(flatten)]
    pub summary: MethodSummary,
    #[serde(flatten)]
    pub scores: CompositeScores,
}

/// Scores every `(distribution, arch)` group separately; row order is kept.
pub fn score_table(rows: &[MethodSummary]) -> Result<Vec<ScoredRow>> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        let key = (r.distribution.as_str(), r.arch.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut scored: Vec<Option<ScoredRow>> = vec![None; rows.len()];
    for key in keys {
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| (rows[i].distribution.as_str(), rows[i].arch.as_str()) == key)
            .collect();
        let group: Vec<MethodSummary> = idx.iter().map(|&i| rows[i].clone()).collect();
        let scores = composite_scores(&group).map_err(|e| match e {
            Error::Parameter(m) => Error::Parameter(format!("group {}/{}: {m}", key.0, key.1)),
            e => e,
        })?;
        for (&i, s) in idx.iter().zip(scores) {
            scored[i] = Some(ScoredRow {
                summary: rows[i].clone(),
                scores: s,
            });
        }
    }
    Ok(scored
        .into_iter()
        .map(|s| s.expect("every row is in a group"))
        .collect())
}

/// `acc_IID − acc_nonIID` per method, in the order of `iid`.
pub fn accuracy_drop(
    iid: &[MethodSummary],
    noniid: &[MethodSummary],
) -> Result<Vec<(String, f64)>> {
    if iid.len() != noniid.len() {
        return Err(Error::Parameter("method sets differ in size".into()));
    }
    iid.iter()
        .map(|a| {
            let b = noniid
                .iter()
                .find(|b| b.method == a.method)
                .ok_or_else(|| {
                    Error::Parameter(format!(
                        "method `{}` missing from the non-IID group",
                        a.method
                    ))
                })?;
            Ok((a.method.clone(), a.acc - b.acc))
        })
        .collect()
}
