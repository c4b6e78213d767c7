//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fedkd_core::data::Regime;
use fedkd_core::federation::{account_bytes, run_experiment, ExperimentConfig, Method, Simulation};
use fedkd_core::metrics::{emit_report, read_method_csv, score_table, ReportFormat};
use fedkd_core::nn::{random_gradcheck, train_step, LossConfig, Model, Optimizer};
use fedkd_core::rng::{derive_seed, derived_rng, stream};
use fedkd_core::server::lemmas::{
    random_drift_trials, single_jump_deviation, verify_aggregation_variance,
};
use rand::seq::SliceRandom;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn golden_replay() -> Verdict {
    let raw = read_method_csv(&data_dir().join("cifar10_raw.csv")).expect("raw table");
    let scored = score_table(&raw).expect("scores");
    let mut published =
        csv::Reader::from_path(data_dir().join("cifar10_composite.csv")).expect("composite table");
    let mut worst = [0.0f64; 4];
    let mut worst_ues_rel = 0.0f64;
    let mut rows = 0;
    let mut failures = Vec::new();
    for rec in published.records() {
        let rec = rec.expect("row");
        let key = (&rec[0], &rec[1], &rec[2]);
        let got = scored
            .iter()
            .find(|r| {
                (
                    r.summary.method.as_str(),
                    r.summary.distribution.as_str(),
                    r.summary.arch.as_str(),
                ) == key
            })
            .unwrap_or_else(|| panic!("{key:?} missing from the raw table"));
        let want: Vec<f64> = (3..7).map(|i| rec[i].parse().expect("number")).collect();
        let have = [
            got.scores.res,
            got.scores.pqs,
            got.scores.ces,
            got.scores.ues,
        ];
        for j in 0..4 {
            worst[j] = worst[j].max((have[j] - want[j]).abs());
        }
        let ues_tol = 5e-3 * want[3].abs().max(1.0);
        worst_ues_rel = worst_ues_rel.max((have[3] - want[3]).abs() / want[3].abs().max(1.0));
        if (0..3).any(|j| (have[j] - want[j]).abs() > 1e-3) || (have[3] - want[3]).abs() > ues_tol {
            failures.push(format!("{}/{}/{}", key.0, key.1, key.2));
        }
        rows += 1;
    }
    let anchor = scored
        .iter()
        .find(|r| {
            r.summary.method == "FedKD-NAS"
                && r.summary.distribution == "dirichlet"
                && r.summary.arch == "MobileNetV2"
        })
        .expect("anchor row");
    verdict(
        failures.is_empty() && rows == 42,
        format!(
            "{rows} rows, max |err| res {:.1e} pqs {:.1e} ces {:.1e} ues {:.1e} (rel {:.1e}); FedKD-NAS MobileNetV2 dirichlet {:.4}/{:.4}/{:.4}/{:.4}{}",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst_ues_rel,
            anchor.scores.res,
            anchor.scores.pqs,
            anchor.scores.ces,
            anchor.scores.ues,
            if failures.is_empty() { String::new() } else { format!("; off: {}", failures.join(", ")) }
        ),
    )
}

fn small_config(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        method,
        seed: 11,
        clients: 4,
        rounds: 3,
        public_size: 50,
        ..ExperimentConfig::default()
    };
    cfg.data.samples = 600;
    cfg
}

fn byte_accounting() -> Verdict {
    let cifar = account_bytes(Method::FedkdNas, 0, 40448, 10, 1, 1);
    let mobilenet_params = 71_573_824 / 4;
    let ratio = 71_573_824.0 / cifar.up as f64;
    let cifar_cheaper =
        account_bytes(Method::FedkdNas, mobilenet_params, 40448, 10, 1, 1).logits_cheaper;
    // EMNIST-like: 47 classes, a large public set and a compact 1M-parameter model
    let emnist_cheaper =
        account_bytes(Method::FedkdNas, 1_000_000, 28_000, 47, 1, 1).logits_cheaper;

    let mut live = Vec::new();
    for method in Method::ALL {
        let cfg = small_config(method);
        let res = run_experiment(&cfg).expect("run");
        let sim = Simulation::new(&cfg).expect("sim");
        let params = sim.global_model().map_or(0, |g| g.param_count() as u64);
        let want = account_bytes(
            method,
            params,
            sim.public().len(),
            sim.public().num_classes,
            cfg.rounds,
            cfg.clients,
        );
        live.push(res.summary.bytes_up == want.up && res.summary.bytes_down == want.down);
    }
    let live_ok = live.iter().all(|&b| b);
    verdict(
        cifar.up == 1_617_920 && cifar.down == 1_617_920 && (ratio - 44.24).abs() < 0.005 && cifar_cheaper && !emnist_cheaper && live_ok,
        format!(
            "M=40448 C=10 -> {} B/direction, FedAvg/logit ratio {ratio:.2}x; crossover: CIFAR-like logits cheaper={cifar_cheaper}, EMNIST-like logits cheaper={emnist_cheaper}; live runs match closed form: {live:?}",
            cifar.up
        ),
    )
}

fn lemma_drift() -> Verdict {
    let trials = random_drift_trials(100, &[0.5, 0.9, 0.99], 20, 20, 5, 7, 1e-10).expect("trials");
    let jump = [0.5, 0.9, 0.99]
        .iter()
        .map(|&g| single_jump_deviation(g, 40, 20, 5, 7).expect("jump"))
        .fold(0.0, f64::max);
    verdict(
        trials.violations == 0 && trials.max_residual <= 1e-10 && trials.min_slack >= -1e-10 && jump <= 1e-12,
        format!(
            "{} sequences, max identity residual {:.1e}, min bound slack {:.1e}, single-jump deviation {:.1e}",
            trials.sequences, trials.max_residual, trials.min_slack, jump
        ),
    )
}

fn lemma_aggregation() -> Verdict {
    let ks: Vec<usize> = (1..=32).collect();
    let unbiased = verify_aggregation_variance(&ks, 10_000, 1.0, 0.0, 20, 5, 3).expect("unbiased");
    let biased = verify_aggregation_variance(&ks, 10_000, 1.0, 2.0, 20, 5, 4).expect("biased");
    let intercept_err = (biased.b - biased.expected_b).abs() / biased.expected_b;
    verdict(
        (unbiased.log_log_slope + 1.0).abs() <= 0.05 && intercept_err <= 0.1,
        format!(
            "slope {:.4} (kappa=0), intercept {:.4} vs kappa^2 {:.4} (rel err {:.3}), 1/K coefficient {:.2} vs sigma^2*M*C {:.0}",
            unbiased.log_log_slope, biased.b, biased.expected_b, intercept_err, unbiased.a, unbiased.expected_a
        ),
    )
}

fn gradients() -> Verdict {
    let s = random_gradcheck(50, 2024, 1e-5).expect("gradcheck");
    verdict(
        s.worst() < 1e-4,
        format!(
            "50 models, max relative error ce {:.1e} kd {:.1e} hybrid {:.1e}",
            s.ce, s.kd, s.hybrid
        ),
    )
}

/// Plain local supervised training with the simulator's seeds, written out by hand.
fn local_training_oracle(cfg: &ExperimentConfig, sim: &Simulation) -> Vec<Vec<Vec<f64>>> {
    let arch = sim.clients()[0].arch().clone();
    let loss = LossConfig {
        alpha: 0.0,
        temperature: cfg.client.temperature,
    };
    sim.clients()
        .iter()
        .map(|c| {
            let mut model = Model::new(
                &arch,
                derive_seed(cfg.seed, &[stream::INIT, u64::from(c.id), 0]),
            );
            let mut opt = Optimizer::new(cfg.client.optimizer, cfg.client.lr).expect("optimizer");
            let data = c.data();
            let mut trajectory = Vec::new();
            for r in 1..=cfg.rounds {
                let mut rng =
                    derived_rng(cfg.seed, &[stream::SHUFFLE, u64::from(c.id), u64::from(r)]);
                let mut order: Vec<usize> = (0..data.len()).collect();
                for _ in 0..cfg.client.epochs {
                    order.shuffle(&mut rng);
                    for chunk in order.chunks(cfg.client.batch_size) {
                        train_step(
                            &mut model,
                            &data.batch(chunk).expect("batch"),
                            None,
                            &loss,
                            &mut opt,
                        )
                        .expect("step");
                    }
                }
                trajectory.push(model.params_flat());
            }
            trajectory
        })
        .collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[allow(clippy::needless_range_loop)]
fn reductions() -> Verdict {
    let mut base = ExperimentConfig {
        rounds: 8,
        ..ExperimentConfig::default()
    };
    base.nas.search = false;
    base.server.beta = 0.0;
    base.server.gamma = 0.0;

    // alpha = 0: local supervised training
    let mut cfg = base.clone();
    cfg.client.alpha = 0.0;
    let mut sim = Simulation::new(&cfg).expect("sim");
    let oracle = local_training_oracle(&cfg, &sim);
    let mut local_same = true;
    for r in 0..cfg.rounds as usize {
        sim.run_round().expect("round");
        for (k, c) in sim.clients().iter().enumerate() {
            local_same &= bits(&c.model().params_flat()) == bits(&oracle[k][r]);
        }
    }

    // beta = gamma = 0: plain logit averaging
    let a = run_experiment(&base).expect("fedkd_nas");
    let b = run_experiment(&base.with_method(Method::Feddistill)).expect("feddistill");
    let strip = |recs: &[fedkd_core::federation::RoundRecord]| {
        recs.iter()
            .map(|r| {
                let mut r = r.clone();
                r.method = Method::Feddistill;
                serde_json::to_string(&r).expect("json")
            })
            .collect::<Vec<_>>()
    };
    let distill_same = strip(&a.records) == strip(&b.records);
    verdict(
        local_same && distill_same,
        format!(
            "alpha=beta=gamma=0 matches hand-written local training bitwise over {} rounds x {} clients: {local_same}; beta=gamma=0 matches feddistill records bitwise: {distill_same}",
            cfg.rounds, cfg.clients
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn desk_runs() -> Verdict {
    let shards = Regime::Shards { per_client: 2 };
    let seeds = 0..5u64;
    let run = |method: Method, dist: Regime, seed: u64| {
        let cfg = ExperimentConfig {
            method,
            seed,
            distribution: dist,
            ..ExperimentConfig::default()
        };
        run_experiment(&cfg).expect("desk run").summary
    };
    let acc = |method: Method, dist: Regime| {
        seeds
            .clone()
            .map(|s| run(method, dist, s).final_acc)
            .collect::<Vec<_>>()
    };
    let (nas_iid, nas_shards) = (
        acc(Method::FedkdNas, Regime::Iid),
        acc(Method::FedkdNas, shards),
    );
    let (kd_iid, kd_shards) = (
        acc(Method::LocalKd, Regime::Iid),
        acc(Method::LocalKd, shards),
    );
    let drops = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
    let (nas_drop, kd_drop) = (
        median(drops(&nas_iid, &nas_shards)),
        median(drops(&kd_iid, &kd_shards)),
    );
    let a = median(nas_shards.clone()) >= median(kd_shards.clone());
    let b = nas_drop < kd_drop;

    // (c) over both sides of the crossover
    let mut c = true;
    let mut c_detail = Vec::new();
    for public_size in [200, 1000] {
        let mut cfg = ExperimentConfig {
            public_size,
            ..ExperimentConfig::default()
        };
        cfg.data.samples = 5000;
        let nas = run_experiment(&cfg).expect("fedkd_nas").summary;
        let avg = run_experiment(&cfg.with_method(Method::Fedavg))
            .expect("fedavg")
            .summary;
        let params = Simulation::new(&cfg.with_method(Method::Fedavg))
            .expect("sim")
            .global_model()
            .expect("global")
            .param_count() as u64;
        let cheaper = account_bytes(Method::FedkdNas, params, public_size, 10, 1, 1).logits_cheaper;
        c &= cheaper == (nas.total_bytes < avg.total_bytes);
        c_detail.push(format!(
            "M={public_size}: 4MC<4P {cheaper}, bytes {} vs {}",
            nas.total_bytes, avg.total_bytes
        ));
    }
    verdict(
        a && b && c,
        format!(
            "(a) shards median acc fedkd_nas {:.3} vs local_kd {:.3}: {}; (b) median drop {:.3} vs {:.3}: {}; (c) {}: {}",
            median(nas_shards),
            median(kd_shards),
            if a { "ok" } else { "FAIL" },
            nas_drop,
            kd_drop,
            if b { "ok" } else { "FAIL" },
            c_detail.join(", "),
            if c { "ok" } else { "FAIL" }
        ),
    )
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut same = true;
    for method in Method::ALL {
        let mut outputs = Vec::new();
        for threads in [1, 4, 4] {
            let cfg = ExperimentConfig {
                method,
                rounds: 10,
                threads,
                ..ExperimentConfig::default()
            };
            let dir = tmp
                .path()
                .join(format!("{method}-{threads}-{}", outputs.len()));
            emit_report(
                &[run_experiment(&cfg).expect("run")],
                &dir,
                ReportFormat::Json,
            )
            .expect("report");
            outputs.push(std::fs::read(dir.join("rounds.jsonl")).expect("jsonl"));
        }
        same &= outputs.windows(2).all(|w| w[0] == w[1]) && !outputs[0].is_empty();
    }
    verdict(
        same,
        format!(
            "rounds.jsonl identical for 1 and 4 threads and on rerun, all four methods: {same}"
        ),
    )
}

fn main() {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check, Duration); 8] = [
        (
            "1 composite golden replay",
            golden_replay,
            Duration::from_secs(1),
        ),
        ("2 byte accounting", byte_accounting, Duration::from_secs(1)),
        ("3 EMA drift lemma", lemma_drift, Duration::from_secs(10)),
        (
            "4 aggregation variance lemma",
            lemma_aggregation,
            Duration::from_secs(30),
        ),
        ("5 gradient correctness", gradients, Duration::from_secs(30)),
        (
            "6 protocol reductions",
            reductions,
            Duration::from_secs(120),
        ),
        (
            "7 desk-scale directional runs",
            desk_runs,
            Duration::from_secs(600),
        ),
        ("8 determinism", determinism, Duration::from_secs(120)),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check, limit) in criteria {
        if only.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let pass = v.pass && took <= limit;
        failed += usize::from(!pass);
        println!(
            "[{}] criterion {name}: {} ({:.2}s, limit {}s)",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
