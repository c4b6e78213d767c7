//! Local hybrid training and the logit uplink.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PublicSet};
use crate::error::{Error, Result};
use crate::nas::{cost_profile, select_architecture, ArchitectureSpec, ProxyBudget, SearchSpace};
use crate::nn::{train_step, DistillBatch, LossConfig, Model, Optimizer, OptimizerKind};
use crate::rng::{derive_seed, derived_rng, stream};

/// Bytes in the wire header: round, sender id, rows, columns (`u32` LE each).
pub const HEADER_BYTES: usize = 16;

/// Payload bytes for an `m × c` matrix, header excluded.
pub fn payload_bytes(m: usize, c: usize) -> u64 {
    4 * m as u64 * c as u64
}

/// Who produced a logit matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Client(u32),
    Teacher,
    Aggregate,
}

const TEACHER_ID: u32 = u32::MAX;
const AGGREGATE_ID: u32 = u32::MAX - 1;

impl Source {
    fn wire_id(self) -> Result<u32> {
        match self {
            Source::Client(id) if id >= AGGREGATE_ID => Err(Error::Serialization(format!(
                "client id {id} collides with a reserved tag"
            ))),
            Source::Client(id) => Ok(id),
            Source::Teacher => Ok(TEACHER_ID),
            Source::Aggregate => Ok(AGGREGATE_ID),
        }
    }

    fn from_wire(id: u32) -> Self {
        match id {
            TEACHER_ID => Source::Teacher,
            AGGREGATE_ID => Source::Aggregate,
            id => Source::Client(id),
        }
    }
}

/// Predictions on the public reference set, one row per public sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    values: Array2<f64>,
    pub round: u32,
    pub source: Source,
}

impl LogitMatrix {
    pub fn new(values: Array2<f64>, round: u32, source: Source) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Shape(format!(
                "empty logit matrix {:?}",
                values.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        Ok(LogitMatrix {
            values,
            round,
            source,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn frobenius(&self) -> f64 {
        frobenius(&self.values)
    }

    /// Same values with a different round/source tag.
    pub fn retagged(&self, round: u32, source: Source) -> Self {
        LogitMatrix {
            values: self.values.clone(),
            round,
            source,
        }
    }

    /// Rescales so that the Frobenius norm is at most `bound`. Returns whether
    /// anything changed.
    pub fn clip(&mut self, bound: f64) -> bool {
        let norm = self.frobenius();
        if norm > bound {
            let scale = bound / norm;
            self.values.mapv_inplace(|v| v * scale);
            true
        } else {
            false
        }
    }

    pub fn wire_len(&self) -> usize {
        HEADER_BYTES + payload_bytes(self.rows(), self.cols()) as usize
    }

    /// Header then row-major `f32` little-endian values.
    pub fn serialize(&self) -> Result<Vec<u8>> {
        let too_big = |what: &str| Error::Serialization(format!("{what} does not fit in u32"));
        let m = u32::try_from(self.rows()).map_err(|_| too_big("row count"))?;
        let c = u32::try_from(self.cols()).map_err(|_| too_big("column count"))?;
        let mut out = Vec::with_capacity(self.wire_len());
        for word in [self.round, self.source.wire_id()?, m, c] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for &v in self.values.iter() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Serialization(format!(
                    "value {v} is not representable as f32"
                )));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Serialization(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        let (round, id, m, c) = (word(0), word(1), word(2) as usize, word(3) as usize);
        let expected = HEADER_BYTES as u64 + payload_bytes(m, c);
        if bytes.len() as u64 != expected {
            return Err(Error::Serialization(format!(
                "{m}x{c} matrix needs {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        let values = Array2::from_shape_vec((m, c), values)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        LogitMatrix::new(values, round, Source::from_wire(id))
            .map_err(|e| Error::Serialization(e.to_string()))
    }

    /// What the receiver sees after a serialize/deserialize hop.
    pub fn over_wire(&self) -> Result<Self> {
        Self::deserialize(&self.serialize()?)
    }
}

pub fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Local training hyperparameters shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub proxy_epochs: usize,
    pub clip_bound: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            alpha: 0.5,
            temperature: 4.0,
            epochs: 1,
            batch_size: 32,
            lr: 0.05,
            optimizer: OptimizerKind::Adam,
            lambda: 0.3,
            proxy_epochs: 1,
            clip_bound: 1e3,
        }
    }
}

impl ClientConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            temperature: self.temperature,
        }
    }

    pub fn proxy_budget(&self) -> ProxyBudget {
        ProxyBudget {
            epochs: self.proxy_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field: &str, ok: bool, message: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, message))
            }
        };
        check(
            "alpha",
            self.alpha >= 0.0 && self.alpha.is_finite(),
            format!("must be >= 0, got {}", self.alpha),
        )?;
        check(
            "temperature",
            self.temperature > 0.0 && self.temperature.is_finite(),
            format!("must be > 0, got {}", self.temperature),
        )?;
        check("batch_size", self.batch_size >= 1, "must be >= 1".into())?;
        check(
            "lr",
            self.lr >= 0.0 && self.lr.is_finite(),
            format!("must be >= 0, got {}", self.lr),
        )?;
        check(
            "lambda",
            self.lambda >= 0.0 && self.lambda.is_finite(),
            format!("must be >= 0, got {}", self.lambda),
        )?;
        check(
            "clip_bound",
            self.clip_bound > 0.0,
            format!("must be > 0, got {}", self.clip_bound),
        )
    }
}

/// One client's private data, current model and resource counters.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u32,
    data: Dataset,
    model: Model,
    opt: Optimizer,
    seed: u64,
    rounds_done: u32,
    /// Training flops (forward + backward) over all rounds.
    pub train_flops: u64,
    /// Flops spent on architecture search and public-set inference.
    pub overhead_flops: u64,
    pub peak_mem: u64,
    pub clip_events: u64,
    pub switches: u32,
}

/// What one client round produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub logits: LogitMatrix,
    pub train_loss: f64,
    pub train_flops: u64,
    pub overhead_flops: u64,
    pub mem_bytes: u64,
    pub arch_id: String,
    pub switched: bool,
    pub clipped: bool,
}

fn init_seed(seed: u64, client: u32, round: u32) -> u64 {
    derive_seed(seed, &[stream::INIT, u64::from(client), u64::from(round)])
}

impl ClientState {
    pub fn new(
        id: u32,
        data: Dataset,
        arch: &ArchitectureSpec,
        cfg: &ClientConfig,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data(format!("client {id} has no data")));
        }
        if arch.input_dim != data.dim() || arch.num_classes != data.num_classes {
            return Err(Error::Shape(format!(
                "architecture {} does not fit {}-dim, {}-class data",
                arch.id,
                data.dim(),
                data.num_classes
            )));
        }
        Ok(ClientState {
            id,
            model: Model::new(arch, init_seed(seed, id, 0)),
            opt: Optimizer::new(cfg.optimizer, cfg.lr)?,
            data,
            seed,
            rounds_done: 0,
            train_flops: 0,
            overhead_flops: 0,
            peak_mem: cost_profile(arch, cfg.batch_size).mem_bytes,
            clip_events: 0,
            switches: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        self.model.arch()
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Replaces the weights, e.g. with a broadcast global model. The
    /// architecture must not change.
    pub fn load_model(&mut self, model: Model) -> Result<()> {
        if model.arch() != self.model.arch() {
            return Err(Error::Protocol(format!(
                "client {} runs {}, received {}",
                self.id,
                self.model.arch().id,
                model.arch().id
            )));
        }
        self.model = model;
        Ok(())
    }

    pub fn predict_public(&self, public: &PublicSet) -> Result<Array2<f64>> {
        self.model.forward(public.inputs.view())
    }
}

/// One local round: optional architecture selection, `E` epochs of hybrid
/// training, then predictions on the whole public set.
///
/// Each private minibatch is paired with the next public minibatch of the
/// same size (cycling through a per-round shuffle of the public rows) and its
/// rows of `target`. The distillation term is skipped when `alpha == 0` or no
/// target is given.
pub fn client_round(
    state: &mut ClientState,
    round: u32,
    target: Option<&LogitMatrix>,
    public: &PublicSet,
    cfg: &ClientConfig,
    space: Option<&SearchSpace>,
) -> Result<RoundOutput> {
    run_round(state, round, target, public, cfg, space).map_err(|e| match e {
        e @ Error::Round { .. } => e,
        e => e.in_round(round, state.id),
    })
}

fn run_round(
    state: &mut ClientState,
    round: u32,
    target: Option<&LogitMatrix>,
    public: &PublicSet,
    cfg: &ClientConfig,
    space: Option<&SearchSpace>,
) -> Result<RoundOutput> {
    if round == 0 {
        return Err(Error::Protocol("client rounds start at 1".into()));
    }
    let distill = match target {
        Some(t) if cfg.alpha > 0.0 => {
            if t.round + 1 != round {
                return Err(Error::Protocol(format!(
                    "round {round} received the target of round {}",
                    t.round
                )));
            }
            if t.rows() != public.len() || t.cols() != public.num_classes {
                return Err(Error::Shape(format!(
                    "target {}x{} vs public set {}x{}",
                    t.rows(),
                    t.cols(),
                    public.len(),
                    public.num_classes
                )));
            }
            Some(t)
        }
        _ => None,
    };
    let id = state.id;
    let key = |s: u64| [s, u64::from(id), u64::from(round)];
    let mut overhead = 0u64;

    let mut switched = false;
    if let Some(space) = space.filter(|s| s.len() > 1) {
        let prev = (state.rounds_done > 0).then(|| state.model.arch().clone());
        let selection = select_architecture(
            space,
            &state.data,
            cfg.lambda,
            &cfg.proxy_budget(),
            derive_seed(state.seed, &key(stream::NAS_SUBSET)),
            prev.as_ref(),
        )?;
        overhead += selection.flops;
        if selection.chosen != *state.model.arch() {
            state.model = Model::new(&selection.chosen, init_seed(state.seed, id, round));
            state.opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
            switched = state.rounds_done > 0;
        }
    }

    let arch = state.model.arch().clone();
    let per_row = cost_profile(&arch, 1).flops_per_sample;
    let mem = cost_profile(&arch, cfg.batch_size).mem_bytes;
    let loss_cfg = cfg.loss();
    let mut order: Vec<usize> = (0..state.data.len()).collect();
    let mut shuffle_rng = derived_rng(state.seed, &key(stream::SHUFFLE));
    let mut public_order: Vec<usize> = (0..public.len()).collect();
    if distill.is_some() {
        public_order.shuffle(&mut derived_rng(state.seed, &key(stream::DISTILL_ORDER)));
    }
    let mut public_cursor = 0usize;
    let mut train_flops = 0u64;
    let (mut loss_sum, mut loss_rows) = (0.0, 0usize);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = state.data.batch(chunk)?;
            let out = match distill {
                Some(t) => {
                    let rows: Vec<usize> = (0..chunk.len())
                        .map(|i| public_order[(public_cursor + i) % public_order.len()])
                        .collect();
                    public_cursor = (public_cursor + chunk.len()) % public_order.len();
                    let inputs = public.inputs.select(Axis(0), &rows);
                    let targets = t.values().select(Axis(0), &rows);
                    let d = DistillBatch {
                        inputs: inputs.view(),
                        targets: targets.view(),
                    };
                    train_step(&mut state.model, &batch, Some(d), &loss_cfg, &mut state.opt)?
                }
                None => train_step(&mut state.model, &batch, None, &loss_cfg, &mut state.opt)?,
            };
            train_flops += 3 * per_row * out.rows as u64;
            loss_sum += out.loss * chunk.len() as f64;
            loss_rows += chunk.len();
        }
    }

    let preds = state.predict_public(public)?;
    overhead += per_row * public.len() as u64;
    let mut logits = LogitMatrix::new(preds, round, Source::Client(id))?;
    let clipped = logits.clip(cfg.clip_bound);

    state.rounds_done += 1;
    state.train_flops += train_flops;
    state.overhead_flops += overhead;
    state.peak_mem = state.peak_mem.max(mem);
    state.clip_events += u64::from(clipped);
    state.switches += u32::from(switched);
    Ok(RoundOutput {
        logits,
        train_loss: if loss_rows > 0 {
            loss_sum / loss_rows as f64
        } else {
            0.0
        },
        train_flops,
        overhead_flops: overhead,
        mem_bytes: mem,
        arch_id: arch.id,
        switched,
        clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, holdout_split, make_public_reference, SyntheticSpec};
    use crate::nn::kd_loss;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn payload_sizes() {
        assert_eq!(payload_bytes(100, 10) as usize + HEADER_BYTES, 4016);
        assert_eq!(payload_bytes(40448, 10), 1_617_920);
        let m = LogitMatrix::new(Array2::zeros((100, 10)), 3, Source::Client(2)).unwrap();
        assert_eq!(m.serialize().unwrap().len(), 4016);
    }

    #[test]
    fn wire_round_trip_keeps_tags() {
        let m = LogitMatrix::new(array![[1.5, -2.25], [1e-3, 7.0]], 9, Source::Teacher).unwrap();
        let back = LogitMatrix::deserialize(&m.serialize().unwrap()).unwrap();
        assert_eq!(back.round, 9);
        assert_eq!(back.source, Source::Teacher);
        assert_eq!(back.values()[[0, 1]], -2.25);
        let agg = m.retagged(1, Source::Aggregate).over_wire().unwrap();
        assert_eq!(agg.source, Source::Aggregate);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let m = LogitMatrix::new(array![[1.0]], 0x0102_0304, Source::Client(7)).unwrap();
        let b = m.serialize().unwrap();
        assert_eq!(&b[..4], &[4, 3, 2, 1]);
        assert_eq!(&b[4..8], &[7, 0, 0, 0]);
        assert_eq!(&b[8..16], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn malformed_payloads() {
        assert!(matches!(
            LogitMatrix::deserialize(&[0; 8]),
            Err(Error::Serialization(_))
        ));
        let mut b = LogitMatrix::new(array![[1.0, 2.0]], 0, Source::Client(0))
            .unwrap()
            .serialize()
            .unwrap();
        b.pop();
        assert!(matches!(
            LogitMatrix::deserialize(&b),
            Err(Error::Serialization(_))
        ));
        let huge = LogitMatrix::new(array![[1e300]], 0, Source::Client(0)).unwrap();
        assert!(matches!(huge.serialize(), Err(Error::Serialization(_))));
        assert!(LogitMatrix::new(array![[f64::NAN]], 0, Source::Teacher).is_err());
    }

    #[test]
    fn clipping_enforces_the_norm_bound() {
        let mut m = LogitMatrix::new(array![[3.0, 4.0]], 0, Source::Client(0)).unwrap();
        assert!(!m.clip(5.0));
        assert!(m.clip(1.0));
        assert!((m.frobenius() - 1.0).abs() < 1e-12);
        assert!((m.values()[[0, 0]] - 0.6).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip_error_within_f32_rounding(vals in proptest::collection::vec(-1e6f64..1e6, 1..60)) {
            let n = vals.len();
            let m = LogitMatrix::new(Array2::from_shape_vec((n, 1), vals).unwrap(), 1, Source::Client(3)).unwrap();
            let back = m.over_wire().unwrap();
            for (a, b) in m.values().iter().zip(back.values()) {
                // half an f32 ulp at |a|
                let half_ulp = (*a as f32).abs().max(f32::MIN_POSITIVE) as f64 * f64::from(f32::EPSILON) / 2.0;
                prop_assert!((a - b).abs() <= half_ulp * 1.0000001, "{a} -> {b}");
            }
        }
    }

    struct Fixture {
        data: Dataset,
        public: PublicSet,
        arch: ArchitectureSpec,
    }

    fn fixture() -> Fixture {
        let ds = generate_synthetic(&SyntheticSpec {
            samples: 400,
            classes: 4,
            dim: 6,
            spread: 1.0,
            seed: 0,
        })
        .unwrap();
        let split = holdout_split(&ds, 0.2, 80, 1).unwrap();
        let public = make_public_reference(&ds, &split.reserve, 80, 2).unwrap();
        Fixture {
            data: ds.subset(&split.pool[..120], "client").unwrap(),
            public,
            arch: ArchitectureSpec::new(6, vec![16], 4).unwrap(),
        }
    }

    #[test]
    fn zero_epochs_leave_the_model_alone() {
        let f = fixture();
        let cfg = ClientConfig {
            epochs: 0,
            ..ClientConfig::default()
        };
        let mut s = ClientState::new(0, f.data, &f.arch, &cfg, 5).unwrap();
        let before = s.predict_public(&f.public).unwrap();
        let params = s.model().params_flat();
        let target = LogitMatrix::new(Array2::ones((80, 4)), 0, Source::Aggregate).unwrap();
        let out = client_round(&mut s, 1, Some(&target), &f.public, &cfg, None).unwrap();
        assert_eq!(s.model().params_flat(), params);
        assert_eq!(out.logits.values(), &before);
        assert_eq!(out.train_flops, 0);
    }

    #[test]
    fn alpha_zero_ignores_the_target() {
        let f = fixture();
        let cfg = ClientConfig {
            alpha: 0.0,
            ..ClientConfig::default()
        };
        let mut a = ClientState::new(0, f.data.clone(), &f.arch, &cfg, 5).unwrap();
        let mut b = a.clone();
        let target =
            LogitMatrix::new(Array2::from_elem((80, 4), 3.0), 0, Source::Aggregate).unwrap();
        let oa = client_round(&mut a, 1, Some(&target), &f.public, &cfg, None).unwrap();
        let ob = client_round(&mut b, 1, None, &f.public, &cfg, None).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.model().params_flat(), b.model().params_flat());
    }

    #[test]
    fn round_skew_is_rejected_with_context() {
        let f = fixture();
        let cfg = ClientConfig::default();
        let mut s = ClientState::new(4, f.data, &f.arch, &cfg, 5).unwrap();
        let target = LogitMatrix::new(Array2::zeros((80, 4)), 2, Source::Aggregate).unwrap();
        match client_round(&mut s, 1, Some(&target), &f.public, &cfg, None) {
            Err(Error::Round {
                round: 1,
                client: 4,
                source,
            }) => {
                assert!(matches!(*source, Error::Protocol(_)))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn strong_distillation_pulls_predictions_toward_the_teacher() {
        let f = fixture();
        let teacher = Model::new(&ArchitectureSpec::new(6, vec![32], 4).unwrap(), 99);
        let target = LogitMatrix::new(
            teacher.forward(f.public.inputs.view()).unwrap(),
            0,
            Source::Teacher,
        )
        .unwrap();
        let cfg = ClientConfig {
            alpha: 50.0,
            temperature: 1.0,
            epochs: 1,
            lr: 0.01,
            ..ClientConfig::default()
        };
        let mut s = ClientState::new(0, f.data, &f.arch, &cfg, 0).unwrap();
        let mut kl = vec![kd_loss(
            target.values().view(),
            s.predict_public(&f.public).unwrap().view(),
            1.0,
        )
        .unwrap()];
        for r in 1..=5 {
            let t = target.retagged(r - 1, Source::Teacher);
            let out = client_round(&mut s, r, Some(&t), &f.public, &cfg, None).unwrap();
            kl.push(kd_loss(target.values().view(), out.logits.values().view(), 1.0).unwrap());
        }
        assert!(kl.windows(2).all(|w| w[1] < w[0]), "{kl:?}");
    }

    #[test]
    fn uplink_size_ignores_the_architecture() {
        let f = fixture();
        let cfg = ClientConfig::default();
        let mut sizes = Vec::new();
        for widths in [vec![], vec![4], vec![64, 64]] {
            let arch = ArchitectureSpec::new(6, widths, 4).unwrap();
            let mut s = ClientState::new(0, f.data.clone(), &arch, &cfg, 5).unwrap();
            let out = client_round(&mut s, 1, None, &f.public, &cfg, None).unwrap();
            sizes.push(out.logits.serialize().unwrap().len());
        }
        assert!(sizes.iter().all(|&n| n == HEADER_BYTES + 4 * 80 * 4));
    }

    #[test]
    fn nas_round_is_deterministic_and_counts_overhead() {
        let f = fixture();
        let cfg = ClientConfig::default();
        let space = SearchSpace::grid(6, 4, 2, &[4, 8, 16, 32], 4, 1).unwrap();
        let mut a = ClientState::new(1, f.data, &f.arch, &cfg, 3).unwrap();
        let mut b = a.clone();
        let oa = client_round(&mut a, 1, None, &f.public, &cfg, Some(&space)).unwrap();
        let ob = client_round(&mut b, 1, None, &f.public, &cfg, Some(&space)).unwrap();
        assert_eq!(oa, ob);
        assert!(oa.overhead_flops > 0);
        assert!(!oa.switched, "first selection is not a switch");
    }
}
