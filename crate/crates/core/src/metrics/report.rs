use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{score_table, CompositeScores, MethodSummary, ScoredRow};
use crate::error::{Error, Result};
use crate::federation::{ExperimentResult, RoundRecord, Summary};

/// Simulated runs share one comparison group per distribution.
pub const SIMULATED_ARCH: &str = "mlp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" | "jsonl" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Parameter(format!(
                "unknown report format `{s}` (json, csv)"
            ))),
        }
    }
}

/// Flat row of `composite.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CompositeRow {
    method: String,
    distribution: String,
    arch: String,
    acc: f64,
    loss: f64,
    cpu: f64,
    mem: f64,
    comm: f64,
    res: f64,
    pqs: f64,
    ces: f64,
    ues: f64,
}

impl From<&ScoredRow> for CompositeRow {
    fn from(r: &ScoredRow) -> Self {
        let (s, c) = (&r.summary, &r.scores);
        CompositeRow {
            method: s.method.clone(),
            distribution: s.distribution.clone(),
            arch: s.arch.clone(),
            acc: s.acc,
            loss: s.loss,
            cpu: s.cpu,
            mem: s.mem,
            comm: s.comm,
            res: c.res,
            pqs: c.pqs,
            ces: c.ces,
            ues: c.ues,
        }
    }
}

impl From<CompositeRow> for ScoredRow {
    fn from(r: CompositeRow) -> Self {
        ScoredRow {
            summary: MethodSummary {
                method: r.method,
                distribution: r.distribution,
                arch: r.arch,
                acc: r.acc,
                loss: r.loss,
                cpu: r.cpu,
                mem: r.mem,
                comm: r.comm,
            },
            scores: CompositeScores {
                res: r.res,
                pqs: r.pqs,
                ces: r.ces,
                ues: r.ues,
            },
        }
    }
}

pub const COMPOSITE_COLUMNS: [&str; 12] = [
    "method",
    "distribution",
    "arch",
    "acc",
    "loss",
    "cpu",
    "mem",
    "comm",
    "res",
    "pqs",
    "ces",
    "ues",
];

pub const ROUND_COLUMNS: [&str; 12] = [
    "method",
    "round",
    "test_acc",
    "test_loss",
    "mean_train_loss",
    "target_drift",
    "arch_switches",
    "bytes_up",
    "bytes_down",
    "train_flops",
    "overhead_flops",
    "clipped",
];

/// Per-round CSV line, aggregated over clients. Field order is `ROUND_COLUMNS`.
#[derive(Debug, Serialize)]
struct RoundRow {
    method: String,
    round: u32,
    test_acc: f64,
    test_loss: f64,
    mean_train_loss: f64,
    target_drift: f64,
    arch_switches: u32,
    bytes_up: u64,
    bytes_down: u64,
    train_flops: u64,
    overhead_flops: u64,
    clipped: usize,
}

impl From<&RoundRecord> for RoundRow {
    fn from(r: &RoundRecord) -> Self {
        let k = r.clients.len().max(1) as f64;
        RoundRow {
            method: r.method.to_string(),
            round: r.round,
            test_acc: r.test_acc,
            test_loss: r.test_loss,
            mean_train_loss: r.clients.iter().map(|c| c.train_loss).sum::<f64>() / k,
            target_drift: r.target_drift,
            arch_switches: r.arch_switches,
            bytes_up: r.clients.iter().map(|c| c.bytes_up).sum(),
            bytes_down: r.clients.iter().map(|c| c.bytes_down).sum(),
            train_flops: r.clients.iter().map(|c| c.train_flops).sum(),
            overhead_flops: r.clients.iter().map(|c| c.overhead_flops).sum(),
            clipped: r.clients.iter().filter(|c| c.clipped).count(),
        }
    }
}

impl From<&Summary> for MethodSummary {
    fn from(s: &Summary) -> Self {
        MethodSummary {
            method: s.method.to_string(),
            distribution: s.distribution.clone(),
            arch: SIMULATED_ARCH.into(),
            acc: s.final_acc,
            loss: s.final_loss,
            cpu: s.cpu,
            mem: s.mem,
            comm: s.total_bytes as f64,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            offset,
            message: format!("{}: {kind:?}", path.display()),
        },
    }
}

/// Composite rows as CSV in `COMPOSITE_COLUMNS` order; just the header when empty.
pub fn write_scored_csv<W: Write>(out: W, rows: &[ScoredRow]) -> Result<()> {
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(COMPOSITE_COLUMNS).map_err(ser)?;
    }
    for r in rows {
        w.serialize(CompositeRow::from(r)).map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))
}

fn write_composite(path: &Path, rows: &[ScoredRow]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scored_csv(std::io::BufWriter::new(file), rows)
}

/// Writes `summary.json`, `composite.csv`, and `rounds.jsonl` or `rounds.csv`.
///
/// Composite scores need at least two runs per distribution with nonzero
/// traffic; otherwise `composite.csv` only has its header.
pub fn emit_report(results: &[ExperimentResult], dir: &Path, format: ReportFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summaries: Vec<&Summary> = results.iter().map(|r| &r.summary).collect();
    let json = serde_json::to_string_pretty(&summaries)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    let path = dir.join("summary.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    match format {
        ReportFormat::Json => {
            let path = dir.join("rounds.jsonl");
            let mut out =
                std::io::BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            for rec in results.iter().flat_map(|r| &r.records) {
                let line =
                    serde_json::to_string(rec).map_err(|e| Error::Serialization(e.to_string()))?;
                writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            out.flush().map_err(|e| Error::io(&path, e))?;
        }
        ReportFormat::Csv => {
            let path = dir.join("rounds.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
            if results.iter().all(|r| r.records.is_empty()) {
                w.write_record(ROUND_COLUMNS)
                    .map_err(|e| csv_err(&path, e))?;
            }
            for rec in results.iter().flat_map(|r| &r.records) {
                w.serialize(RoundRow::from(rec))
                    .map_err(|e| csv_err(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
    }

    let rows: Vec<MethodSummary> = summaries.iter().map(|&s| s.into()).collect();
    let scored = match score_table(&rows) {
        Ok(s) => s,
        Err(e) if rows.len() < 2 => {
            log::info!("composite scores skipped: {e}");
            Vec::new()
        }
        Err(e) => {
            log::warn!("composite scores skipped: {e}");
            Vec::new()
        }
    };
    write_composite(&dir.join("composite.csv"), &scored)
}

pub fn read_rounds_jsonl(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                offset: offset + e.column().saturating_sub(1) as u64,
                message: e.to_string(),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

pub fn read_summaries(path: &Path) -> Result<Vec<Summary>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })
}

/// `method,distribution,arch,acc,loss,cpu,mem,comm`; extra columns are ignored.
pub fn read_method_csv(path: &Path) -> Result<Vec<MethodSummary>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

/// Same as [`read_method_csv`] for CSV already in memory.
pub fn parse_method_csv(text: &str) -> Result<Vec<MethodSummary>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                offset: e.position().map_or(0, |p| p.byte()),
                message: format!("{:?}", e.into_kind()),
            })
        })
        .collect()
}

pub fn read_scored_csv(path: &Path) -> Result<Vec<ScoredRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<CompositeRow>()
        .map(|row| row.map(ScoredRow::from).map_err(|e| csv_err(path, e)))
        .collect()
}
