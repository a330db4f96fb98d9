//! Train a small Siamese ensemble on synthetic data and rank held-out
//! queries against a reference library.
//!
//!     cargo run --release --example train_and_match

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use specmatch::augment;
use specmatch::harness::{self, SyntheticDatasetSpec};
use specmatch::matcher::{self, ReferenceLibrary, VotingConfig};
use specmatch::network::ArchitectureConfig;
use specmatch::spectra_io::{self, Grid, Preprocessing};
use specmatch::trainer::{self, TrainConfig, TrainingData, Validation};

fn main() -> specmatch::Result<()> {
    let spec = SyntheticDatasetSpec {
        n_classes: 6,
        baseline_amplitude: 1.5,
        noise_sigma: 0.03,
        seed: 1,
        ..Default::default()
    };
    let data = harness::generate_synthetic(&spec)?;
    let split = spectra_io::make_test_split(&data, 0);
    let prep = Preprocessing {
        grid: Grid::new(spec.grid_min, spec.grid_max, 128)?,
        normalize: true,
    };
    let train = prep.apply_all(&split.train)?;
    let test = prep.apply_all(&split.test)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spectra = augment::augment_dataset(&train, 10, &Default::default(), &mut rng)?;
    let arch = ArchitectureConfig {
        conv_block_channels: [8, 16],
        conv_kernel: 7,
        xception_channels: [16, 24],
        depthwise_kernel: 5,
        separable_convs_per_block: 2,
        input_length: 128,
        ..Default::default()
    };
    let cfg = TrainConfig {
        total_steps: 300,
        batch_size: 32,
        lr0: 1e-3,
        ensemble_size: 2,
        ..Default::default()
    };
    println!(
        "training {} members, {} parameters each",
        cfg.ensemble_size,
        arch.param_count()
    );
    let data = TrainingData {
        spectra,
        validation: Validation::None,
    };
    let (ensemble, members) = trainer::train_ensemble(&data, &arch, &cfg)?;
    for (seed, m) in ensemble.member_seeds.iter().zip(&members) {
        let tail = &m.log[m.log.len() - 20..];
        println!(
            "member {}: final loss {:.3}",
            seed,
            tail.iter().map(|r| r.loss).sum::<f64>() / 20.0
        );
    }

    let lib = ReferenceLibrary::build(train, &ensemble)?;
    let (report, results) = matcher::evaluate_accuracy(&test, &lib, &ensemble, VotingConfig::default())?;
    for (r, q) in results.iter().zip(&test) {
        let top: Vec<String> = r.ranked.iter().take(3).map(|(c, s)| format!("{c} {s:.3}")).collect();
        println!("{} (truth {}): {}", r.query_id, q.class_label(), top.join(", "));
    }
    println!("top-1 accuracy {:.2}", report.accuracy);
    Ok(())
}
