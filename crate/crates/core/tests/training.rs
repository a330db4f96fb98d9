use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use specmatch::augment::augment_dataset;
use specmatch::harness::{generate_synthetic, SyntheticDatasetSpec};
use specmatch::ndcore::{Graph, Tensor};
use specmatch::network::{self, ArchitectureConfig};
use specmatch::spectra_io::{self, Grid, Preprocessing, ResampledSpectrum};
use specmatch::trainer::{self, Ensemble, TrainConfig, TrainingData, Validation};

fn desk_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        conv_block_channels: [8, 16],
        conv_kernel: 7,
        pool_window: 4,
        xception_channels: [16, 24],
        depthwise_kernel: 5,
        separable_convs_per_block: 2,
        input_length: 128,
        ..Default::default()
    }
}

/// Train, validation-free, on the synthetic 10 × 5 set with one spectrum
/// per class held out.
fn synthetic_split() -> (Vec<ResampledSpectrum>, Vec<ResampledSpectrum>) {
    let spec = SyntheticDatasetSpec {
        baseline_amplitude: 0.5,
        seed: 2,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let split = spectra_io::make_test_split(&data, 0);
    let prep = Preprocessing {
        grid: Grid::new(200.0, 1800.0, 128).unwrap(),
        normalize: true,
    };
    let train = prep.apply_all(&split.train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train = augment_dataset(&train, 10, &Default::default(), &mut rng).unwrap();
    (train, prep.apply_all(&split.test).unwrap())
}

fn window_means(losses: &[f64], w: usize) -> Vec<f64> {
    losses
        .chunks(w)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[test]
fn loss_falls_and_positives_outscore_negatives() {
    let (train, held_out) = synthetic_split();
    let arch = desk_arch();
    let cfg = TrainConfig {
        total_steps: 200,
        batch_size: 32,
        lr0: 1e-3,
        ensemble_size: 1,
        ..Default::default()
    };
    let data = TrainingData {
        spectra: train.clone(),
        validation: Validation::None,
    };
    let member = trainer::train_member(&data, &arch, &cfg, 1).unwrap();
    let losses: Vec<f64> = member.log.iter().map(|r| r.loss).collect();
    let windows = window_means(&losses, 20);
    assert!(windows.last().unwrap() < windows.first().unwrap(), "{windows:?}");
    let half = windows.len() / 2;
    let early: f64 = windows[..half].iter().sum::<f64>() / half as f64;
    let late: f64 = windows[half..].iter().sum::<f64>() / (windows.len() - half) as f64;
    assert!(late < early, "{windows:?}");

    // held-out spectra against same-class and other-class training spectra
    let ensemble = Ensemble::new(arch, vec![member.params]).unwrap();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for q in &held_out {
        let a = Tensor::from_rows(std::iter::repeat_n(q.intensities(), train.len())).unwrap();
        let b = Tensor::from_rows(train.iter().map(|t| t.intensities())).unwrap();
        for (t, p) in train.iter().zip(ensemble.predict_pairs(&a, &b).unwrap()) {
            if t.class_label() == q.class_label() {
                pos.push(p)
            } else {
                neg.push(p)
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&pos) > mean(&neg),
        "positive {} negative {}",
        mean(&pos),
        mean(&neg)
    );
}

#[test]
fn heavy_regularization_shrinks_weights() {
    let (train, _) = synthetic_split();
    let arch = ArchitectureConfig {
        input_length: 128,
        conv_block_channels: [4, 4],
        xception_channels: [4, 6],
        separable_convs_per_block: 1,
        conv_kernel: 5,
        depthwise_kernel: 3,
        ..Default::default()
    };
    let cfg = TrainConfig {
        total_steps: 30,
        batch_size: 8,
        lambda: 1e3,
        lr0: 1e-2,
        ..Default::default()
    };
    let data = TrainingData {
        spectra: train,
        validation: Validation::None,
    };
    let initial = network::init_params(&arch, 5).unwrap().weight_sum_squares();
    let a = trainer::train_member(&data, &arch, &cfg, 5).unwrap();
    assert!(a.params.weight_sum_squares() < initial);
    let cfg = TrainConfig { lambda: 1e-3, ..cfg };
    let b = trainer::train_member(&data, &arch, &cfg, 6).unwrap();
    let c = trainer::train_member(&data, &arch, &cfg, 7).unwrap();
    assert_ne!(b.params.checksum(), c.params.checksum());
    let again = trainer::train_member(&data, &arch, &cfg, 6).unwrap();
    assert_eq!(b.params.checksum(), again.params.checksum());
}

#[test]
fn logit_gradient_is_p_minus_y_over_n() {
    let logits = [-2.0, -0.3, 0.0, 0.7, 3.1];
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0];
    let mut g = Graph::new();
    let z = g.input(Tensor::new(vec![5, 1, 1], logits.to_vec()).unwrap());
    let p = g.sigmoid(z);
    let loss = g.bce_mean(p, &labels).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(z).unwrap().data().to_vec();
    for ((zv, y), gv) in logits.iter().zip(labels).zip(grad) {
        let pv = 1.0 / (1.0 + (-zv).exp());
        assert!((gv - (pv - y) / 5.0).abs() < 1e-10);
    }
}

#[test]
fn ensemble_average_is_member_mean() {
    assert!((trainer::average(&[vec![0.2], vec![0.4], vec![0.6]])[0] - 0.4).abs() < 1e-15);
    let avg = trainer::average(&[vec![0.2, 1.0], vec![0.4, 0.0], vec![0.6, 0.5]]);
    assert!((avg[0] - 0.4).abs() < 1e-15 && (avg[1] - 0.5).abs() < 1e-15);
}

#[test]
fn trained_ensemble_members_are_seeded_distinctly() {
    let (train, _) = synthetic_split();
    let arch = ArchitectureConfig {
        input_length: 128,
        conv_block_channels: [4, 4],
        xception_channels: [4, 6],
        separable_convs_per_block: 1,
        conv_kernel: 5,
        depthwise_kernel: 3,
        ..Default::default()
    };
    let cfg = TrainConfig {
        total_steps: 10,
        batch_size: 8,
        ensemble_size: 3,
        seed: 40,
        ..Default::default()
    };
    let data = TrainingData {
        spectra: train,
        validation: Validation::None,
    };
    let (ensemble, members) = trainer::train_ensemble(&data, &arch, &cfg).unwrap();
    assert_eq!(ensemble.member_seeds, vec![40, 41, 42]);
    let one = trainer::train_member(&data, &arch, &cfg, 41).unwrap();
    assert_eq!(one.params, members[1].params);
}
