use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::ClientConfig;
use crate::data::{DataFormat, Regime};
use crate::error::{Error, Result};
use crate::nas::{ArchitectureSpec, SearchSpace};
use crate::server::{AggregationRule, BetaSchedule, TeacherConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FedkdNas,
    Fedavg,
    Feddistill,
    LocalKd,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::FedkdNas,
        Method::Fedavg,
        Method::Feddistill,
        Method::LocalKd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedkdNas => "fedkd_nas",
            Method::Fedavg => "fedavg",
            Method::Feddistill => "feddistill",
            Method::LocalKd => "local_kd",
        }
    }

    /// Whether the method exchanges logits on the public set.
    pub fn uses_logits(self) -> bool {
        matches!(self, Method::FedkdNas | Method::Feddistill)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown method `{s}` (fedkd_nas, fedavg, feddistill, local_kd)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Csv,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub samples: usize,
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    /// For `csv`/`idx`; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            samples: 3000,
            classes: 10,
            dim: 16,
            spread: 1.0,
            path: None,
        }
    }
}

impl DataConfig {
    pub fn format(&self) -> Option<DataFormat> {
        match self.kind {
            DataKind::Synthetic => None,
            DataKind::Csv => Some(DataFormat::Csv),
            DataKind::Idx => Some(DataFormat::Idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub beta: f64,
    /// Linearly decay β to 0 over the run instead of keeping it constant.
    pub beta_decay: bool,
    pub gamma: f64,
    pub aggregation: AggregationRule,
    pub teacher: TeacherConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            beta: 0.5,
            beta_decay: false,
            gamma: 0.9,
            aggregation: AggregationRule::Mean,
            teacher: TeacherConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NasConfig {
    /// Search per round (`fedkd_nas` only); otherwise every client uses `fixed_widths`.
    pub search: bool,
    pub max_depth: usize,
    pub widths: Vec<usize>,
    pub subset_size: usize,
    pub radius: usize,
    /// Hidden widths of the architecture shared by the fixed-architecture methods.
    pub fixed_widths: Vec<usize>,
}

impl Default for NasConfig {
    fn default() -> Self {
        NasConfig {
            search: true,
            max_depth: 2,
            widths: vec![8, 16, 32, 64],
            subset_size: 4,
            radius: 1,
            fixed_widths: vec![64, 64],
        }
    }
}

/// Everything that determines one run, seeds included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub clients: usize,
    pub rounds: u32,
    pub distribution: Regime,
    pub public_size: usize,
    pub test_fraction: f64,
    /// Worker threads for client rounds; 0 uses the global pool.
    pub threads: usize,
    pub data: DataConfig,
    pub client: ClientConfig,
    pub server: ServerConfig,
    pub nas: NasConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::FedkdNas,
            seed: 0,
            clients: 5,
            rounds: 30,
            distribution: Regime::Shards { per_client: 2 },
            public_size: 200,
            test_fraction: 0.2,
            threads: 0,
            data: DataConfig::default(),
            client: ClientConfig::default(),
            server: ServerConfig::default(),
            nas: NasConfig::default(),
        }
    }
}

/// Dotted key of the `key = value` line containing byte `pos`.
fn key_at(text: &str, pos: usize) -> String {
    let before = &text[..pos.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[line_start..]
        .find('\n')
        .map_or(text.len(), |i| line_start + i);
    let key = text[line_start..line_end]
        .split('=')
        .next()
        .unwrap_or("")
        .trim();
    let table = before[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim());
    match table {
        Some(t) if !key.is_empty() => format!("{t}.{key}"),
        _ => key.to_string(),
    }
}

fn field_error(path: &str, message: impl Into<String>) -> Error {
    Error::config(path, message)
}

impl ExperimentConfig {
    /// Parses TOML; unknown keys and malformed values are config errors that
    /// name the offending field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = message
                .split('`')
                .nth(1)
                .filter(|_| message.starts_with("unknown field"))
                .map(str::to_string)
                .unwrap_or_else(|| e.span().map(|s| key_at(text, s.start)).unwrap_or_default());
            field_error(&field, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(field_error(
                "clients",
                format!("must be >= 2, got {}", self.clients),
            ));
        }
        if self.public_size == 0 {
            return Err(field_error("public_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(field_error(
                "test_fraction",
                format!("must be in (0, 1), got {}", self.test_fraction),
            ));
        }
        let d = &self.data;
        match d.kind {
            DataKind::Synthetic => {
                if d.classes < 2 {
                    return Err(field_error("data.classes", "must be >= 2"));
                }
                if d.dim < 2 {
                    return Err(field_error("data.dim", "must be >= 2"));
                }
                if d.samples < 10 * d.classes {
                    return Err(field_error(
                        "data.samples",
                        format!("must be >= 10 x classes = {}", 10 * d.classes),
                    ));
                }
                if !(d.spread >= 0.0 && d.spread.is_finite()) {
                    return Err(field_error("data.spread", "must be >= 0"));
                }
            }
            DataKind::Csv | DataKind::Idx => {
                if d.path.is_none() {
                    return Err(field_error("data.path", "required for file datasets"));
                }
            }
        }
        self.client.validate().map_err(|e| match e {
            Error::Config { field, message } => field_error(&format!("client.{field}"), message),
            e => e,
        })?;
        let s = &self.server;
        for (name, v) in [("server.beta", s.beta), ("server.gamma", s.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(field_error(name, format!("must be in [0, 1], got {v}")));
            }
        }
        if let AggregationRule::Trimmed(f) = s.aggregation {
            if !(0.0..0.5).contains(&f) {
                return Err(field_error(
                    "server.aggregation",
                    format!("trim fraction must be in [0, 0.5), got {f}"),
                ));
            }
        }
        if s.teacher.batch_size == 0 {
            return Err(field_error("server.teacher.batch_size", "must be >= 1"));
        }
        if !(s.teacher.lr >= 0.0 && s.teacher.lr.is_finite()) {
            return Err(field_error("server.teacher.lr", "must be >= 0"));
        }
        let n = &self.nas;
        if n.max_depth == 0 {
            return Err(field_error("nas.max_depth", "must be >= 1"));
        }
        if n.widths.is_empty() || n.widths.contains(&0) {
            return Err(field_error(
                "nas.widths",
                "must be a nonempty list of positive widths",
            ));
        }
        if n.subset_size == 0 {
            return Err(field_error("nas.subset_size", "must be >= 1"));
        }
        if n.fixed_widths.contains(&0) {
            return Err(field_error("nas.fixed_widths", "widths must be positive"));
        }
        if self.method == Method::Fedavg && self.nas.search {
            log::debug!("fedavg ignores nas.search: all clients share nas.fixed_widths");
        }
        Ok(())
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        if self.server.beta_decay {
            BetaSchedule::LinearDecay {
                beta0: self.server.beta,
                rounds: self.rounds,
            }
        } else {
            BetaSchedule::Constant {
                beta: self.server.beta,
            }
        }
    }

    /// Candidate grid; its largest member is the teacher architecture.
    pub fn search_space(&self, input_dim: usize, num_classes: usize) -> Result<SearchSpace> {
        SearchSpace::grid(
            input_dim,
            num_classes,
            self.nas.max_depth,
            &self.nas.widths,
            self.nas.subset_size,
            self.nas.radius,
        )
    }

    pub fn fixed_arch(&self, input_dim: usize, num_classes: usize) -> Result<ArchitectureSpec> {
        ArchitectureSpec::new(input_dim, self.nas.fixed_widths.clone(), num_classes)
    }

    /// Whether clients run architecture search.
    pub fn searches(&self) -> bool {
        self.method == Method::FedkdNas && self.nas.search
    }

    pub fn with_method(&self, method: Method) -> Self {
        ExperimentConfig {
            method,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "method = \"local_kd\"\ndistribution = \"dirichlet:0.1\"\n[server]\naggregation = \"trimmed:0.2\"\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Method::LocalKd);
        assert_eq!(cfg.distribution, Regime::Dirichlet { alpha: 0.1 });
        assert_eq!(cfg.server.aggregation, AggregationRule::Trimmed(0.2));
        assert_eq!(cfg.clients, 5);
    }

    #[test]
    fn unknown_field_is_named() {
        match ExperimentConfig::from_toml_str("[client]\nalhpa = 0.3\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "alhpa"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_are_named() {
        let cases = [
            ("clients = 1", "clients"),
            ("[server]\ngamma = 1.5", "server.gamma"),
            ("[client]\ntemperature = 0.0", "client.temperature"),
            ("[nas]\nwidths = []", "nas.widths"),
            ("[data]\nkind = \"csv\"", "data.path"),
        ];
        for (text, expected) in cases {
            match ExperimentConfig::from_toml_str(text) {
                Err(Error::Config { field, .. }) => assert_eq!(field, expected, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        match ExperimentConfig::from_toml_str("distribution = \"zipf\"") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "distribution"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn methods_parse() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("ditto".parse::<Method>().is_err());
    }
}
