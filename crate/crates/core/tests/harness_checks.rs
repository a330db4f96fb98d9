use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specmatch::harness::{self, coverage_size_curve, ExperimentConfig, SyntheticDatasetSpec};
use specmatch::matcher::{self, MatchResult, Metric, ReferenceLibrary};
use specmatch::network::ArchitectureConfig;
use specmatch::spectra_io::{self, Grid, Preprocessing, Role};

#[test]
fn cosine_baseline_sanity_on_clean_synthetic_data() {
    let spec = SyntheticDatasetSpec {
        n_classes: 10,
        spectra_per_class: 20,
        noise_sigma: 0.05,
        ..Default::default()
    };
    let data = harness::generate_synthetic(&spec).unwrap();
    let split = spectra_io::make_test_split(&data, 0);
    let prep = Preprocessing {
        grid: Grid::new(spec.grid_min, spec.grid_max, 256).unwrap(),
        normalize: true,
    };
    let lib = ReferenceLibrary::from_spectra(prep.apply_all(&split.train).unwrap()).unwrap();
    let test = prep.apply_all(&split.test).unwrap();
    let report = matcher::baseline_accuracy(&test, &lib, Metric::Cosine).unwrap();
    assert!(report.accuracy >= 0.8, "{}", report.accuracy);
}

fn random_results(rng: &mut ChaCha8Rng, n: usize) -> Vec<(MatchResult, String)> {
    let labels = ["a", "b", "c", "d", "e"];
    (0..n)
        .map(|i| {
            let truth = rng.random_range(0..labels.len());
            let scores = (0..labels.len())
                .map(|c| {
                    if c == truth {
                        rng.random::<f64>().sqrt()
                    } else {
                        0.8 * rng.random::<f64>()
                    }
                })
                .collect();
            (
                MatchResult::from_scores(format!("q{i}"), &labels, scores).unwrap(),
                labels[truth].to_string(),
            )
        })
        .collect()
}

#[test]
fn curve_limits_and_monotonicity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cal = random_results(&mut rng, 2000);
    let test = random_results(&mut rng, 2000);
    let rows = coverage_size_curve(&cal, &test, &[0.999, 0.2, 0.1, 0.05, 0.01]).unwrap();
    assert!((rows[0].average_set_size - 1.0).abs() < 1e-9);
    for w in rows.windows(2) {
        assert!(w[1].average_set_size >= w[0].average_set_size);
        assert!(w[1].empirical_coverage >= w[0].empirical_coverage);
    }
    for r in &rows[1..] {
        assert!((r.empirical_coverage - r.theoretical_coverage).abs() < 0.03, "{r:?}");
    }
}

fn quick_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.arch = ArchitectureConfig {
        conv_block_channels: [4, 4],
        conv_kernel: 5,
        pool_window: 4,
        xception_channels: [4, 6],
        depthwise_kernel: 3,
        separable_convs_per_block: 1,
        input_length: 64,
        ..Default::default()
    };
    cfg.train.total_steps = 20;
    cfg.train.batch_size = 8;
    cfg.train.ensemble_size = 1;
    cfg.train.validation_interval = 10;
    cfg
}

#[test]
fn single_split_has_no_interval() {
    let data = harness::generate_synthetic(&SyntheticDatasetSpec {
        n_classes: 3,
        spectra_per_class: 4,
        grid_length: 64,
        ..Default::default()
    })
    .unwrap();
    let mut cfg = quick_config();
    cfg.experiment.n_test_splits = 1;
    let report = harness::run_experiment(&cfg, &data).unwrap();
    assert!(report.summary.values().all(|m| m.half_width.is_none()));
    assert!(report.to_text().contains("n/a"));
    assert_eq!(report.splits[0].n_test, 3);
}

#[test]
fn fixed_test_roles_bypass_leave_one_out() {
    let data = harness::generate_synthetic(&SyntheticDatasetSpec {
        n_classes: 3,
        spectra_per_class: 5,
        grid_length: 64,
        ..Default::default()
    })
    .unwrap();
    let data: Vec<_> = data
        .into_iter()
        .map(|s| {
            let role = if s.source_id().ends_with("s04") || s.source_id().ends_with("s03") {
                Role::Test
            } else {
                Role::Train
            };
            s.with_role(role)
        })
        .collect();
    let mut cfg = quick_config();
    cfg.experiment.n_test_splits = 2;
    let report = harness::run_experiment(&cfg, &data).unwrap();
    for s in &report.splits {
        assert_eq!(s.n_test, 6);
        assert_eq!(s.n_validation, 3);
        assert_eq!(s.n_train, 6);
    }
}

#[test]
fn split_failures_carry_the_seed() {
    let data = harness::generate_synthetic(&SyntheticDatasetSpec {
        n_classes: 2,
        spectra_per_class: 1,
        grid_length: 64,
        ..Default::default()
    })
    .unwrap();
    let mut cfg = quick_config();
    cfg.experiment.split_seed = 17;
    let err = harness::run_experiment(&cfg, &data).unwrap_err();
    assert!(matches!(err, specmatch::Error::Split { seed: 17, .. }), "{err}");
}
