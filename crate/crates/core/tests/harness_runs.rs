use std::fs;

use qdsg::engine::{Algorithm, StopRule};
use qdsg::harness::{
    build_problem, compare_algorithms, emit_plot_data, load_config, reference, run_experiment, save_config, sweep_bits,
    ExperimentConfig, RunMetadata,
};
use qdsg::problems::{solve_reference, LossKind};
use qdsg::Error;

fn small(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        n: 8,
        d: 3,
        radius: 0.6,
        seed: 4,
        loss: LossKind::Absolute,
        rounds: 50,
        log_every: 7,
        output_dir: dir.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn minimal_file_gets_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"n": 12, "d": 4}"#).unwrap();
    let c = load_config(&path).unwrap();
    assert_eq!((c.n, c.d), (12, 4));
    let defaults = ExperimentConfig::default();
    assert_eq!(c, ExperimentConfig { n: 12, d: 4, ..defaults });
}

#[test]
fn bad_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"bits": 0}"#).unwrap();
    assert!(matches!(load_config(&path), Err(Error::Validation { field: "bits", .. })));
    fs::write(&path, r#"{"n": 3,"#).unwrap();
    assert!(matches!(load_config(&path), Err(Error::Parse { .. })));
    fs::write(&path, r#"{"bitz": 3}"#).unwrap();
    assert!(matches!(load_config(&path), Err(Error::Parse { .. })));
}

#[test]
fn save_load_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let c = ExperimentConfig {
        lambda: 0.1 + 0.2,
        stop: StopRule::RelativeGap { tau: 0.05 },
        gamma: Some(12.5),
        ..small(dir.path())
    };
    save_config(&c, &p1).unwrap();
    let loaded = load_config(&p1).unwrap();
    assert_eq!(loaded, c);
    save_config(&loaded, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
}

#[test]
fn run_writes_metrics_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let out = run_experiment(&c).unwrap();
    let csv = fs::read_to_string(&out.metrics_path).unwrap();
    assert_eq!(csv.lines().count(), 1 + c.rounds.div_ceil(c.log_every) + 1);

    let meta: RunMetadata = serde_json::from_str(&fs::read_to_string(&out.metadata_path).unwrap()).unwrap();
    assert_eq!(meta.config, c);
    assert_eq!((meta.n, meta.d, meta.bits), (8, 3, 8));
    assert_eq!(meta.gamma, qdsg::quantizer::compute_gamma(meta.lipschitz, meta.sigma2).unwrap());

    let problem = build_problem(&c).unwrap();
    let again = solve_reference(&problem.objectives, &problem.bx, c.reference_tol).unwrap();
    assert!((again.f_star - meta.f_star).abs() <= c.reference_tol.max(1e-9 * meta.f_star.abs()));
}

#[test]
fn reference_cache_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let problem = build_problem(&c).unwrap();
    let first = reference(&c, &problem).unwrap();
    let cached = fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(cached, 1);
    assert_eq!(reference(&c, &problem).unwrap(), first);
}

#[test]
fn compared_algorithms_share_the_instance() {
    let dir = tempfile::tempdir().unwrap();
    let (q, d) = compare_algorithms(&small(dir.path())).unwrap();
    assert_eq!(q.record.algorithm, Algorithm::Qdsg);
    assert_eq!(d.record.algorithm, Algorithm::Dsg);
    assert_eq!(q.record.rows[0], {
        let mut row = d.record.rows[0].clone();
        row.delta_bound = q.record.rows[0].delta_bound;
        row
    });
    assert_eq!((q.metadata.sigma2, q.metadata.f_star), (d.metadata.sigma2, d.metadata.f_star));
    assert_ne!(q.metrics_path, d.metrics_path);
}

#[test]
fn sweep_reports_in_request_order() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig {
        rounds: 400,
        stop: StopRule::RelativeGap { tau: 0.5 },
        gamma: Some(5.0),
        ..small(dir.path())
    };
    let result = sweep_bits(&c, &[10, 3, 52]).unwrap();
    let bits: Vec<u32> = result.entries.iter().map(|e| e.bits).collect();
    assert_eq!(bits, [10, 3, 52]);
    assert!(result.entries.iter().all(|e| e.target_reached == e.iterations_to_target.is_some()));
    assert!(sweep_bits(&c, &[]).unwrap().entries.is_empty());
    assert!(sweep_bits(&c, &[0]).is_err());
}

#[test]
fn fine_sweep_entry_matches_exact_messages() {
    let dir = tempfile::tempdir().unwrap();
    let c = ExperimentConfig {
        n: 10,
        rounds: 20_000,
        log_every: 20_000,
        loss: LossKind::Quadratic,
        stop: StopRule::RelativeGap { tau: 0.05 },
        ..small(dir.path())
    };
    let fine = sweep_bits(&c, &[52]).unwrap().entries[0].iterations_to_target.expect("52 bits reaches the target");
    // The starting grid point depends on b, so the baseline uses the same width.
    let exact = run_experiment(&ExperimentConfig {
        algorithm: Algorithm::Dsg,
        bits: 52,
        ..c
    })
    .unwrap()
    .record
    .iterations_to_target
    .expect("exact messages reach the target");
    assert!((fine as f64 - exact as f64).abs() <= 0.01 * exact as f64, "{fine} vs {exact}");
}

#[test]
fn plot_data_has_one_file_per_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (q, d) = compare_algorithms(&small(dir.path())).unwrap();
    let plots = dir.path().join("plots");
    let files = emit_plot_data(&[("qdsg".into(), &q.record), ("dsg".into(), &d.record)], &plots).unwrap();
    assert_eq!(files.len(), 2);
    let text = fs::read_to_string(&files[0]).unwrap();
    assert_eq!(text.lines().next().unwrap(), "round,gap,consensus_error,delta_bound,delta_max");
    assert_eq!(text.lines().count(), q.record.rows.len() + 1);
    assert!(emit_plot_data(&[], &plots).is_err());
}
