//! Browser bindings. Each export takes plain values and returns a CSV or JSON
//! string; the `*_text` functions hold the logic so they run natively too.

use fedkd_core::data::{partition_indices, Regime};
use fedkd_core::metrics::{parse_method_csv, score_table, write_scored_csv};
use fedkd_core::server::lemmas::drift_trace;
use fedkd_core::{Error, Result};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Reference rows used for the drift demo.
const TRACE_ROWS: usize = 20;
const TRACE_CLASSES: usize = 10;

/// Composite scores for a `method,distribution,arch,acc,loss,cpu,mem,comm` table.
pub fn score_text(csv: &str) -> Result<String> {
    let scored = score_table(&parse_method_csv(csv)?)?;
    let mut out = Vec::new();
    write_scored_csv(&mut out, &scored)?;
    String::from_utf8(out).map_err(|e| Error::Serialization(e.to_string()))
}

/// `{"distribution", "seed", "histograms": [[count per class] per client]}` for `samples` labels
/// cycled over `classes`.
pub fn histograms_text(
    distribution: &str,
    clients: usize,
    samples: usize,
    classes: usize,
    seed: u64,
) -> Result<String> {
    let regime: Regime = distribution.parse()?;
    if classes < 2 {
        return Err(Error::Parameter("need at least 2 classes".into()));
    }
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let pool: Vec<usize> = (0..samples).collect();
    let partition = partition_indices(&labels, classes, &pool, clients, regime, seed)?;
    let histograms: Vec<Vec<usize>> = partition
        .assignments
        .iter()
        .map(|rows| {
            let mut h = vec![0; classes];
            for &i in rows {
                h[labels[i]] += 1;
            }
            h
        })
        .collect();
    Ok(json!({ "distribution": regime.to_string(), "seed": partition.seed, "histograms": histograms }).to_string())
}

/// Per-round drift, its closed form and the geometric bound, as JSON.
pub fn drift_text(
    gamma: f64,
    rounds: usize,
    jump_round: usize,
    noise: f64,
    seed: u64,
) -> Result<String> {
    let report = drift_trace(
        gamma,
        rounds,
        jump_round,
        noise,
        TRACE_ROWS,
        TRACE_CLASSES,
        seed,
    )?;
    serde_json::to_string(&report).map_err(|e| Error::Serialization(e.to_string()))
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn score_csv(csv: &str) -> std::result::Result<String, JsError> {
    score_text(csv).map_err(js)
}

#[wasm_bindgen]
pub fn partition_histograms(
    distribution: &str,
    clients: usize,
    samples: usize,
    classes: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    histograms_text(distribution, clients, samples, classes, seed.into()).map_err(js)
}

#[wasm_bindgen]
pub fn ema_drift(
    gamma: f64,
    rounds: usize,
    jump_round: usize,
    noise: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    drift_text(gamma, rounds, jump_round, noise, seed.into()).map_err(js)
}
