//! Run the full repeated-split protocol on synthetic data and print the
//! markdown report with confidence intervals.
//!
//!     cargo run --release --example cross_validation

use specmatch::harness::{self, ExperimentConfig, SyntheticDatasetSpec};
use specmatch::network::ArchitectureConfig;

fn main() -> specmatch::Result<()> {
    let spec = SyntheticDatasetSpec {
        n_classes: 5,
        spectra_per_class: 6,
        baseline_amplitude: 1.0,
        seed: 2,
        ..Default::default()
    };
    let data = harness::generate_synthetic(&spec)?;

    let mut cfg = ExperimentConfig::default();
    cfg.arch = ArchitectureConfig {
        conv_block_channels: [4, 8],
        conv_kernel: 5,
        xception_channels: [8, 12],
        depthwise_kernel: 3,
        separable_convs_per_block: 1,
        input_length: 128,
        ..Default::default()
    };
    cfg.train.total_steps = 150;
    cfg.train.batch_size = 16;
    cfg.train.lr0 = 1e-3;
    cfg.train.ensemble_size = 1;
    cfg.train.validation_interval = 50;
    cfg.experiment.n_test_splits = 3;
    cfg.experiment.conformal_alpha = Some(0.2);

    let report = harness::run_experiment(&cfg, &data)?;
    print!("{}", report.to_text());
    Ok(())
}
