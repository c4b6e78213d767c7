use fedkd_core::client::{LogitMatrix, Source};
use fedkd_core::data::Regime;
use fedkd_core::federation::{run_experiment, ExperimentConfig, Method};
use fedkd_core::metrics::{
    emit_report, read_rounds_jsonl, read_scored_csv, read_summaries, ReportFormat,
};
use ndarray::Array2;
use proptest::prelude::*;

fn small(method: Method) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        method,
        seed: 11,
        clients: 3,
        rounds: 2,
        distribution: Regime::Dirichlet { alpha: 0.5 },
        public_size: 30,
        ..ExperimentConfig::default()
    };
    cfg.data.samples = 300;
    cfg.data.classes = 4;
    cfg.data.dim = 6;
    cfg.nas.widths = vec![4, 8];
    cfg.nas.fixed_widths = vec![8];
    cfg.server.teacher.epochs = 2;
    cfg
}

#[test]
fn report_files_read_back_identically() {
    let results: Vec<_> = Method::ALL
        .into_iter()
        .map(|m| run_experiment(&small(m)).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&results, dir.path(), ReportFormat::Json).unwrap();

    let rounds = read_rounds_jsonl(&dir.path().join("rounds.jsonl")).unwrap();
    let expected: Vec<_> = results.iter().flat_map(|r| r.records.clone()).collect();
    assert_eq!(rounds, expected);

    let summaries = read_summaries(&dir.path().join("summary.json")).unwrap();
    assert_eq!(
        summaries,
        results
            .iter()
            .map(|r| r.summary.clone())
            .collect::<Vec<_>>()
    );

    let scored = read_scored_csv(&dir.path().join("composite.csv")).unwrap();
    assert_eq!(scored.len(), 4);
    let best_comm = scored
        .iter()
        .map(|r| r.scores.ces)
        .fold(f64::INFINITY, f64::min);
    assert!(
        (best_comm - 1.0).abs() < 1e-12,
        "the largest comm scores CES 1"
    );
}

#[test]
fn config_survives_toml_round_trip() {
    let cfg = small(Method::Feddistill);
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(
        run_experiment(&back).unwrap(),
        run_experiment(&cfg).unwrap()
    );
}

proptest! {
    #[test]
    fn wire_round_trip_is_f32_exact(
        rows in 1usize..12,
        cols in 1usize..8,
        round in 0u32..1000,
        client in 0u32..64,
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let values = Array2::from_shape_fn((rows, cols), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 40.0
        });
        let m = LogitMatrix::new(values.clone(), round, Source::Client(client)).unwrap();
        let bytes = m.serialize().unwrap();
        prop_assert_eq!(bytes.len(), 16 + 4 * rows * cols);
        let back = LogitMatrix::deserialize(&bytes).unwrap();
        prop_assert_eq!(back.round, round);
        prop_assert_eq!(back.source, Source::Client(client));
        for (a, b) in back.values().iter().zip(values.iter()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }
}
