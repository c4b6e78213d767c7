use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::accounting::round_bytes;
use super::{ExperimentConfig, Method};
use crate::client::{client_round, ClientState, LogitMatrix, RoundOutput, Source};
use crate::data::{
    generate_synthetic, holdout_split, load_dataset, make_public_reference, partition_indices,
    Dataset, PublicSet, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, resource_proxies, Evaluation};
use crate::nas::{ArchitectureSpec, SearchSpace};
use crate::nn::Model;
use crate::rng::{derive_seed, stream};
use crate::server::{
    aggregate_predictions, ema_update, fuse_with_teacher, pretrain_teacher, AggregationRule,
    DistillTarget, Teacher,
};

/// One client's measurements in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: u32,
    pub train_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub train_flops: u64,
    pub overhead_flops: u64,
    pub mem_bytes: u64,
    pub arch: String,
    pub switched: bool,
    pub clipped: bool,
}

/// One line of `rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub method: Method,
    pub round: u32,
    pub clients: Vec<ClientRecord>,
    pub test_acc: f64,
    pub test_loss: f64,
    /// `‖Z̃ʳ − Z̃ʳ⁻¹‖_F`; 0 for methods without a moving target.
    pub target_drift: f64,
    pub arch_switches: u32,
}

/// End-of-run totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub distribution: String,
    pub arch: String,
    pub seed: u64,
    pub rounds: u32,
    pub clients: usize,
    pub final_acc: f64,
    pub final_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub total_bytes: u64,
    pub total_flops: u64,
    pub cpu: f64,
    pub mem: f64,
    pub peak_mem: u64,
    pub clip_events: u64,
    pub teacher_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

/// A prepared run: data split, partition, teacher and client states.
pub struct Simulation {
    cfg: ExperimentConfig,
    clients: Vec<ClientState>,
    public: PublicSet,
    test: Dataset,
    teacher: Option<Teacher>,
    target: Option<DistillTarget>,
    space: Option<SearchSpace>,
    global: Option<Model>,
    round: u32,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

fn load(cfg: &ExperimentConfig) -> Result<Dataset> {
    match (cfg.data.format(), &cfg.data.path) {
        (Some(format), Some(path)) => load_dataset(path, format, None),
        (Some(_), None) => Err(Error::config("data.path", "required for file datasets")),
        (None, _) => generate_synthetic(&SyntheticSpec {
            samples: cfg.data.samples,
            classes: cfg.data.classes,
            dim: cfg.data.dim,
            spread: cfg.data.spread,
            seed: derive_seed(cfg.seed, &[stream::DATA]),
        }),
    }
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = load(cfg)?;
        let seed = cfg.seed;
        let split = holdout_split(
            &ds,
            cfg.test_fraction,
            cfg.public_size,
            derive_seed(seed, &[stream::SPLIT]),
        )?;
        let public = make_public_reference(
            &ds,
            &split.reserve,
            cfg.public_size,
            derive_seed(seed, &[stream::PUBLIC]),
        )?;
        let test = ds.subset(&split.test, "test")?;
        let parts = partition_indices(
            &ds.labels,
            ds.num_classes,
            &split.pool,
            cfg.clients,
            cfg.distribution,
            derive_seed(seed, &[stream::PARTITION]),
        )?;
        let grid = cfg.search_space(ds.dim(), ds.num_classes)?;
        let fixed = cfg.fixed_arch(ds.dim(), ds.num_classes)?;
        let space = cfg.searches().then_some(grid.clone());
        // clients that search start from the smallest candidate
        let start: ArchitectureSpec = match &space {
            Some(s) => s.candidates().first().cloned().expect("non-empty grid"),
            None => fixed.clone(),
        };
        let clients = parts
            .assignments
            .iter()
            .enumerate()
            .map(|(k, idx)| {
                let data = ds.subset(idx, format!("client-{k}"))?;
                ClientState::new(k as u32, data, &start, &cfg.client, seed)
            })
            .collect::<Result<Vec<_>>>()?;

        let (teacher, target, global) = if cfg.method == Method::Fedavg {
            (
                None,
                None,
                Some(Model::new(
                    &fixed,
                    derive_seed(seed, &[stream::GLOBAL_MODEL]),
                )),
            )
        } else {
            let teacher = pretrain_teacher(
                &public,
                grid.largest(),
                &cfg.server.teacher,
                derive_seed(seed, &[stream::TEACHER]),
            )?;
            let target = DistillTarget::warm_start(teacher.predictions());
            (Some(teacher), Some(target), None)
        };
        log::info!(
            "{}: {} clients, {} public rows, {} test rows, teacher acc {:?}",
            cfg.method,
            cfg.clients,
            public.len(),
            test.len(),
            teacher.as_ref().map(Teacher::train_accuracy)
        );

        #[cfg(feature = "parallel")]
        let pool = match cfg.threads {
            0 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?,
            ),
        };
        Ok(Simulation {
            cfg: cfg.clone(),
            clients,
            public,
            test,
            teacher,
            target,
            space,
            global,
            round: 0,
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn public(&self) -> &PublicSet {
        &self.public
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    /// The target most recently produced (the one the next round receives).
    pub fn target(&self) -> Option<&DistillTarget> {
        self.target.as_ref()
    }

    pub fn global_model(&self) -> Option<&Model> {
        self.global.as_ref()
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    fn run_clients(
        &mut self,
        round: u32,
        target: Option<&LogitMatrix>,
    ) -> Result<Vec<RoundOutput>> {
        let public = &self.public;
        let cfg = &self.cfg.client;
        let space = self.space.as_ref();
        let work = |c: &mut ClientState| client_round(c, round, target, public, cfg, space);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            let clients = &mut self.clients;
            let results: Vec<Result<RoundOutput>> = match &self.pool {
                Some(pool) => pool.install(|| clients.par_iter_mut().map(work).collect()),
                None => clients.par_iter_mut().map(work).collect(),
            };
            results.into_iter().collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.clients.iter_mut().map(work).collect()
        }
    }

    /// Mean client test metrics, or the global model's for parameter averaging.
    fn evaluate_now(&self) -> Result<Evaluation> {
        if let Some(global) = &self.global {
            return evaluate(global, &self.test);
        }
        let evals = self
            .clients
            .iter()
            .map(|c| evaluate(c.model(), &self.test))
            .collect::<Result<Vec<_>>>()?;
        let k = evals.len() as f64;
        Ok(Evaluation {
            accuracy: evals.iter().map(|e| e.accuracy).sum::<f64>() / k,
            loss: evals.iter().map(|e| e.loss).sum::<f64>() / k,
        })
    }

    /// Broadcast, local rounds in parallel, then the server step.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let r = self.round + 1;
        let method = self.cfg.method;
        let m = self.public.len();
        let c = self.public.num_classes;

        let broadcast: Option<LogitMatrix> = match method {
            Method::FedkdNas | Method::Feddistill => Some(
                self.target
                    .as_ref()
                    .expect("distillation target")
                    .smoothed
                    .over_wire()?,
            ),
            Method::LocalKd => {
                let t = self.teacher.as_ref().expect("teacher").predictions();
                Some(t.retagged(r - 1, Source::Teacher).over_wire()?)
            }
            Method::Fedavg => {
                let global = self.global.clone().expect("global model");
                for client in &mut self.clients {
                    client
                        .load_model(global.clone())
                        .map_err(|e| e.in_round(r, client.id))?;
                }
                None
            }
        };

        let outputs = self.run_clients(r, broadcast.as_ref())?;

        let params = self.global.as_ref().map_or(0, |g| g.param_count() as u64);
        let (up, down) = round_bytes(method, params, m, c, r);
        let mut target_drift = 0.0;
        match method {
            Method::FedkdNas => {
                let uplinks = outputs
                    .iter()
                    .map(|o| o.logits.over_wire())
                    .collect::<Result<Vec<_>>>()?;
                let agg = aggregate_predictions(&uplinks, self.cfg.server.aggregation)?;
                let beta = self.cfg.beta_schedule().at(r);
                let teacher = self.teacher.as_ref().expect("teacher").predictions();
                let raw = fuse_with_teacher(&agg, teacher, beta)?;
                let next = ema_update(
                    self.target.as_ref().expect("target"),
                    &raw,
                    self.cfg.server.gamma,
                    beta,
                )?;
                target_drift = next.drift;
                self.target = Some(next);
            }
            Method::Feddistill => {
                let uplinks = outputs
                    .iter()
                    .map(|o| o.logits.over_wire())
                    .collect::<Result<Vec<_>>>()?;
                let agg = aggregate_predictions(&uplinks, AggregationRule::Mean)?;
                let prev = self.target.as_ref().expect("target");
                target_drift = crate::client::frobenius(&(agg.values() - prev.smoothed.values()));
                self.target = Some(DistillTarget {
                    smoothed: agg.clone(),
                    raw: agg,
                    round: r,
                    beta: 0.0,
                    gamma: 0.0,
                    drift: target_drift,
                });
            }
            Method::LocalKd => {}
            Method::Fedavg => {
                let models: Vec<&Model> = self.clients.iter().map(ClientState::model).collect();
                let weights: Vec<f64> =
                    self.clients.iter().map(|c| c.data().len() as f64).collect();
                self.global = Some(average_models(&models, &weights)?);
            }
        }

        self.round = r;
        let eval = self.evaluate_now()?;
        let clients: Vec<ClientRecord> = outputs
            .into_iter()
            .zip(&self.clients)
            .map(|(o, state)| ClientRecord {
                client: state.id,
                train_loss: o.train_loss,
                bytes_up: up,
                bytes_down: down,
                train_flops: o.train_flops,
                overhead_flops: o.overhead_flops,
                mem_bytes: o.mem_bytes,
                arch: o.arch_id,
                switched: o.switched,
                clipped: o.clipped,
            })
            .collect();
        let arch_switches = clients.iter().filter(|c| c.switched).count() as u32;
        log::debug!(
            "{method} round {r}: acc {:.4} loss {:.4}",
            eval.accuracy,
            eval.loss
        );
        Ok(RoundRecord {
            method,
            round: r,
            clients,
            test_acc: eval.accuracy,
            test_loss: eval.loss,
            target_drift,
            arch_switches,
        })
    }

    /// Most common current client architecture (ties: lowest id).
    fn modal_arch(&self) -> String {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &self.clients {
            *counts.entry(c.arch().id.as_str()).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        counts
            .into_iter()
            .find(|&(_, n)| n == best)
            .map(|(id, _)| id.to_string())
            .unwrap_or_default()
    }

    pub fn summarize(&self, records: &[RoundRecord]) -> Result<Summary> {
        let (final_acc, final_loss) = match records.last() {
            Some(r) => (r.test_acc, r.test_loss),
            None => {
                // no rounds: report the starting point
                let e = match (&self.teacher, &self.global) {
                    (Some(t), _) => evaluate(t.model(), &self.test)?,
                    (None, Some(g)) => evaluate(g, &self.test)?,
                    (None, None) => unreachable!("every method has a teacher or a global model"),
                };
                (e.accuracy, e.loss)
            }
        };
        let sum = |f: fn(&ClientRecord) -> u64| -> u64 {
            records.iter().flat_map(|r| &r.clients).map(f).sum()
        };
        let (bytes_up, bytes_down) = (sum(|c| c.bytes_up), sum(|c| c.bytes_down));
        let (cpu, mem) = if records.is_empty() {
            (0.0, 0.0)
        } else {
            resource_proxies(records)?
        };
        Ok(Summary {
            method: self.cfg.method,
            distribution: self.cfg.distribution.to_string(),
            arch: self.modal_arch(),
            seed: self.cfg.seed,
            rounds: records.len() as u32,
            clients: self.clients.len(),
            final_acc,
            final_loss,
            bytes_up,
            bytes_down,
            total_bytes: bytes_up + bytes_down,
            total_flops: sum(|c| c.train_flops + c.overhead_flops),
            cpu,
            mem,
            peak_mem: records
                .iter()
                .flat_map(|r| &r.clients)
                .map(|c| c.mem_bytes)
                .max()
                .unwrap_or(0),
            clip_events: self.clients.iter().map(|c| c.clip_events).sum(),
            teacher_acc: self.teacher.as_ref().map(Teacher::train_accuracy),
        })
    }
}

/// Weighted parameter average `Σ (n_k/n)·θ_k`. All models must share one architecture.
pub fn average_models(models: &[&Model], weights: &[f64]) -> Result<Model> {
    let first = models
        .first()
        .ok_or_else(|| Error::Aggregation("no models to average".into()))?;
    if models.len() != weights.len() {
        return Err(Error::Aggregation(
            "one weight per model is required".into(),
        ));
    }
    if let Some(m) = models.iter().find(|m| m.arch() != first.arch()) {
        return Err(Error::config(
            "nas.fixed_widths",
            format!(
                "parameter averaging needs one architecture, got {} and {}",
                first.arch().id,
                m.arch().id
            ),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Aggregation(
            "weights must be >= 0 with a positive sum".into(),
        ));
    }
    let mut layers = first.layers().to_vec();
    for (li, layer) in layers.iter_mut().enumerate() {
        let mut w = Array2::zeros(layer.weight.dim());
        let mut b = Array1::zeros(layer.bias.dim());
        for (m, &wt) in models.iter().zip(weights) {
            let share = wt / total;
            w.scaled_add(share, &m.layers()[li].weight);
            b.scaled_add(share, &m.layers()[li].bias);
        }
        layer.weight = w;
        layer.bias = b;
    }
    Model::from_layers(layers)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut sim = Simulation::new(cfg)?;
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    for _ in 0..cfg.rounds {
        records.push(sim.run_round()?);
    }
    let summary = sim.summarize(&records)?;
    Ok(ExperimentResult { records, summary })
}

/// `run_experiment` with the method replaced.
pub fn run_baseline(cfg: &ExperimentConfig, method: Method) -> Result<ExperimentResult> {
    run_experiment(&cfg.with_method(method))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Regime;
    use crate::federation::account_bytes;

    fn small(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            method,
            seed: 3,
            clients: 3,
            rounds: 2,
            distribution: Regime::Iid,
            public_size: 40,
            ..ExperimentConfig::default()
        };
        cfg.data.samples = 400;
        cfg.data.classes = 4;
        cfg.data.dim = 6;
        cfg.nas.widths = vec![4, 8];
        cfg.nas.fixed_widths = vec![8];
        cfg.server.teacher.epochs = 3;
        cfg
    }

    #[test]
    fn same_seed_same_records() {
        let a = run_experiment(&small(Method::FedkdNas)).unwrap();
        let b = run_experiment(&small(Method::FedkdNas)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 2);
    }

    #[test]
    fn bytes_match_closed_form() {
        for method in Method::ALL {
            let cfg = small(method);
            let res = run_experiment(&cfg).unwrap();
            let sim = Simulation::new(&cfg).unwrap();
            let params = sim.global_model().map_or(0, |g| g.param_count() as u64);
            let want = account_bytes(method, params, 40, 4, 2, 3);
            assert_eq!(res.summary.bytes_up, want.up, "{method}");
            assert_eq!(res.summary.bytes_down, want.down, "{method}");
        }
    }

    #[test]
    fn zero_rounds_reports_start() {
        let mut cfg = small(Method::Feddistill);
        cfg.rounds = 0;
        let res = run_experiment(&cfg).unwrap();
        assert!(res.records.is_empty());
        assert_eq!(res.summary.total_bytes, 0);
        assert!((0.0..=1.0).contains(&res.summary.final_acc));
    }

    #[test]
    fn averaging_is_weighted() {
        let arch = ArchitectureSpec::new(2, vec![3], 2).unwrap();
        let a = Model::new(&arch, 1);
        let b = Model::new(&arch, 2);
        let avg = average_models(&[&a, &b], &[1.0, 3.0]).unwrap();
        let (pa, pb) = (a.params_flat(), b.params_flat());
        let got = avg.params_flat();
        assert!(got
            .iter()
            .zip(pa.iter().zip(&pb))
            .all(|(g, (x, y))| (g - 0.25 * x - 0.75 * y).abs() < 1e-12));
        let other = Model::new(&ArchitectureSpec::new(2, vec![4], 2).unwrap(), 1);
        assert!(average_models(&[&a, &other], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn fedavg_clients_start_from_global() {
        let cfg = small(Method::Fedavg);
        let mut sim = Simulation::new(&cfg).unwrap();
        sim.run_round().unwrap();
        let g = sim.global_model().unwrap().params_flat();
        sim.run_round().unwrap();
        assert_ne!(g, sim.global_model().unwrap().params_flat());
        assert!(sim.teacher().is_none());
    }
}
