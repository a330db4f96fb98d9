//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach the console.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use specmatch::augment::{noise_augment, NoiseAugConfig};
use specmatch::conformal::{predict_set, ConformalCalibrator};
use specmatch::harness::{self, ExperimentConfig, SyntheticDatasetSpec, ValidationMode};
use specmatch::matcher::MatchResult;
use specmatch::ndcore::{Graph, Tensor, Tensor2};
use specmatch::network::{self, ArchitectureConfig};
use specmatch::spectra_io::ResampledSpectrum;
use specmatch::trainer;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, randn(rng, n)).unwrap()
}

// ---------------------------------------------------------------------------
// 1. gradient correctness

fn small_arch(input_length: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        conv_block_channels: [4, 6],
        conv_kernel: 5,
        pool_window: 4,
        xception_channels: [8, 10],
        depthwise_kernel: 3,
        separable_convs_per_block: 2,
        input_length,
        ..Default::default()
    }
}

fn gradient_check() -> Outcome {
    let arch = small_arch(64);
    let mut params = network::init_params(&arch, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = tensor(&mut rng, vec![4, 1, 64]);
    let b = tensor(&mut rng, vec![4, 1, 64]);
    let labels = [1.0, 0.0, 1.0, 0.0];
    let lambda = 1e-2;
    let (_, grads) = trainer::pair_loss_and_gradients(&params, &arch, &a, &b, &labels, lambda, 3).unwrap();
    let names: Vec<String> = params.names().map(String::from).collect();
    let h = 1e-6;
    let mut checked = 0;
    let mut worst = (0.0f64, String::new());
    for name in &names {
        let len = params.get(name).unwrap().value.len();
        for i in 0..len {
            let orig = params.get(name).unwrap().value.data()[i];
            params.get_mut(name).unwrap().value.data_mut()[i] = orig + h;
            let (up, _) = trainer::pair_loss_and_gradients(&params, &arch, &a, &b, &labels, lambda, 3).unwrap();
            params.get_mut(name).unwrap().value.data_mut()[i] = orig - h;
            let (down, _) = trainer::pair_loss_and_gradients(&params, &arch, &a, &b, &labels, lambda, 3).unwrap();
            params.get_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[name].data()[i];
            let err = (analytic - numeric).abs();
            let allowed = (1e-3 * analytic.abs().max(numeric.abs())).max(1e-6);
            if err / allowed > worst.0 {
                worst = (
                    err / allowed,
                    format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}"),
                );
            }
            checked += 1;
        }
    }
    outcome(
        worst.0 <= 1.0,
        format!(
            "{checked} parameters, worst error/tolerance {:.3} at {}",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. op oracles

fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, cin, width) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ow = (width + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for o in 0..cout {
            for t in 0..ow {
                let mut s = bias.map_or(0.0, |bb| bb[o]);
                for i in 0..cin {
                    for kk in 0..k {
                        let pos = (t * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < width {
                            s += w.data()[(o * cin + i) * k + kk] * x.data()[(b * cin + i) * width + pos as usize];
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn op_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shapes = 120;
    let mut worst = [0.0f64; 4];
    for _ in 0..shapes {
        let n = rng.random_range(1..4);
        let cin = rng.random_range(1..5);
        let cout = rng.random_range(1..5);
        let k = rng.random_range(1..8);
        let width = rng.random_range(k..k + 20);
        let stride = rng.random_range(1..4);
        let pad = rng.random_range(0..k);
        let x = tensor(&mut rng, vec![n, cin, width]);
        let w = tensor(&mut rng, vec![cout, cin, k]);
        let bias = randn(&mut rng, cout);
        let mut g = Graph::new();
        let (xi, wi, bi) = (
            g.input(x.clone()),
            g.input(w.clone()),
            g.input(Tensor::new(vec![cout], bias.clone()).unwrap()),
        );
        let y = g.conv1d(xi, wi, Some(bi), stride, pad).unwrap();
        worst[0] = worst[0].max(max_diff(
            g.value(y).data(),
            &conv_oracle(&x, &w, Some(&bias), stride, pad),
        ));

        // separable: pointwise then per-channel with same padding
        let dk = 2 * rng.random_range(0..4) + 1;
        let pw = tensor(&mut rng, vec![cout, cin, 1]);
        let dw = tensor(&mut rng, vec![cout, 1, dk]);
        let (pwi, dwi) = (g.input(pw.clone()), g.input(dw.clone()));
        let y = g.separable_conv1d(xi, pwi, dwi).unwrap();
        let mixed = Tensor::new(vec![n, cout, width], conv_oracle(&x, &pw, None, 1, 0)).unwrap();
        let mut expect = Vec::new();
        for b in 0..n {
            for c in 0..cout {
                let one = Tensor::new(
                    vec![1, 1, width],
                    mixed.data()[(b * cout + c) * width..][..width].to_vec(),
                )
                .unwrap();
                let wc = Tensor::new(vec![1, 1, dk], dw.data()[c * dk..][..dk].to_vec()).unwrap();
                expect.extend(conv_oracle(&one, &wc, None, 1, (dk - 1) / 2));
            }
        }
        worst[1] = worst[1].max(max_diff(g.value(y).data(), &expect));

        // max pool
        let win = rng.random_range(1..=width.min(6));
        let ps = rng.random_range(1..4);
        let y = g.max_pool1d(xi, win, ps).unwrap();
        let ow = (width - win) / ps + 1;
        let mut expect = Vec::new();
        for row in x.data().chunks(width) {
            for t in 0..ow {
                expect.push(
                    row[t * ps..t * ps + win]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max),
                );
            }
        }
        worst[2] = worst[2].max(max_diff(g.value(y).data(), &expect));

        // linear over flattened (channels × width)
        let out = rng.random_range(1..4);
        let features = cin * width;
        let lw = tensor(&mut rng, vec![out, features]);
        let lb = randn(&mut rng, out);
        let (lwi, lbi) = (
            g.input(lw.clone()),
            g.input(Tensor::new(vec![out], lb.clone()).unwrap()),
        );
        let y = g.linear(xi, lwi, lbi).unwrap();
        let mut expect = Vec::new();
        for b in 0..n {
            for o in 0..out {
                let mut s = lb[o];
                for f in 0..features {
                    s += lw.data()[o * features + f] * x.data()[b * features + f];
                }
                expect.push(s);
            }
        }
        worst[3] = worst[3].max(max_diff(g.value(y).data(), &expect));
    }
    outcome(
        worst.iter().all(|w| *w <= 1e-10),
        format!(
            "{shapes} shapes; max |diff| conv {:.1e}, separable {:.1e}, pool {:.1e}, linear {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. distance maps and symmetry

fn feature_map(rng: &mut ChaCha8Rng, c: usize, w: usize) -> Tensor2 {
    Tensor2 {
        channels: c,
        width: w,
        data: randn(rng, c * w),
    }
}

fn distance_properties() -> Outcome {
    let arch = ArchitectureConfig::default();
    let params = network::init_params(&arch, 4).unwrap();
    let (c, w) = arch.feature_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut zero = true;
    let mut symmetric = true;
    for _ in 0..100 {
        let f1 = feature_map(&mut rng, c, w);
        let f2 = feature_map(&mut rng, c, w);
        zero &= network::distance_maps(&f1, &f1)
            .unwrap()
            .d_diff
            .data
            .iter()
            .all(|v| *v == 0.0);
        let ab = network::similarity_head(&network::distance_maps(&f1, &f2).unwrap(), &params).unwrap();
        let ba = network::similarity_head(&network::distance_maps(&f2, &f1).unwrap(), &params).unwrap();
        symmetric &= ab.p.to_bits() == ba.p.to_bits() && ab.logit.to_bits() == ba.logit.to_bits();
    }
    outcome(
        zero && symmetric,
        format!("d_diff(f,f)=0: {zero}; exact swap symmetry: {symmetric} (100 pairs)"),
    )
}

// ---------------------------------------------------------------------------
// 4. augmentation

/// Variance of first differences in the window starting at index `w`,
/// written independently of the library.
fn window_variance(s: &[f64], w: usize, k: usize) -> f64 {
    let n = s.len();
    let mut lo = w.max(1);
    let mut hi = (w + k - 1).min(n - 1);
    if hi < lo + 1 {
        hi = (lo + 1).min(n - 1);
        lo = hi - 1;
    }
    let d: Vec<f64> = (lo..=hi).map(|i| s[i] - s[i - 1]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d.len() as f64
}

fn augmentation() -> Outcome {
    let cfg = NoiseAugConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let flat = ResampledSpectrum::from_parts(vec![0.7; 32], "c", "flat");
    let ramp = ResampledSpectrum::from_parts((0..32).map(|i| 0.125 + 0.015625 * i as f64).collect(), "c", "ramp");
    let flat_same = noise_augment(&flat, &cfg, &mut rng).unwrap().intensities() == flat.intensities();
    let ramp_same = noise_augment(&ramp, &cfg, &mut rng).unwrap().intensities() == ramp.intensities();

    let s: Vec<f64> = (0..32).map(|_| rng.random::<f64>()).collect();
    let spec = ResampledSpectrum::from_parts(s.clone(), "c", "random");
    let copies = 10_000;
    let mut sum = vec![0.0; s.len()];
    for _ in 0..copies {
        for (acc, v) in sum
            .iter_mut()
            .zip(noise_augment(&spec, &cfg, &mut rng).unwrap().intensities())
        {
            *acc += v;
        }
    }
    let mut worst = 0.0f64;
    for (w, total) in sum.iter().enumerate() {
        let se = (cfg.kappa * window_variance(&s, w, cfg.window)).sqrt() / (copies as f64).sqrt();
        worst = worst.max((total / copies as f64 - s[w]).abs() / se);
    }
    outcome(
        flat_same && ramp_same && worst <= 3.0,
        format!(
            "constant unchanged {flat_same}, ramp unchanged {ramp_same}, worst mean error {worst:.2} standard errors"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. pair imbalance

fn pair_imbalance() -> Outcome {
    let mut ok = true;
    let mut worst_rel = 0.0f64;
    for n in 2..=5 {
        for m in 2..=5 {
            // enumerate unordered pairs of distinct spectra
            let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, m)).collect();
            let (mut pos, mut neg) = (0, 0);
            for i in 0..labels.len() {
                for j in i + 1..labels.len() {
                    if labels[i] == labels[j] {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                }
            }
            ok &= trainer::count_possible_pairs(&vec![m; n]) == (pos, neg);
            if n >= 3 {
                let exact = pos as f64 / neg as f64;
                let rel = (trainer::approx_pair_ratio(n, m) - exact).abs() / exact;
                worst_rel = worst_rel.max(rel);
            }
        }
    }
    outcome(
        ok && worst_rel <= 0.10,
        format!("counts match enumeration: {ok}; worst relative ratio error {worst_rel:.3e}"),
    )
}

// ---------------------------------------------------------------------------
// 6. synthetic end-to-end

/// Configuration of the synthetic end-to-end run.
pub fn end_to_end_config() -> (SyntheticDatasetSpec, ExperimentConfig) {
    let spec = SyntheticDatasetSpec {
        n_classes: 10,
        spectra_per_class: 5,
        baseline_amplitude: 1.5,
        noise_sigma: 0.03,
        height_jitter: 0.1,
        seed: 1,
        ..Default::default()
    };
    let mut cfg = ExperimentConfig::default();
    cfg.arch = ArchitectureConfig {
        conv_block_channels: [8, 16],
        conv_kernel: 7,
        pool_window: 4,
        xception_channels: [16, 24],
        depthwise_kernel: 5,
        separable_convs_per_block: 2,
        input_length: 128,
        ..Default::default()
    };
    cfg.train.total_steps = 2000;
    cfg.train.ensemble_size = 3;
    cfg.train.batch_size = 32;
    cfg.train.lr0 = 1e-3;
    cfg.experiment.n_test_splits = 1;
    cfg.experiment.min_class_size = 10;
    cfg.experiment.validation = ValidationMode::Holdout;
    (spec, cfg)
}

fn end_to_end() -> Outcome {
    let (spec, cfg) = end_to_end_config();
    let data = harness::generate_synthetic(&spec).unwrap();
    let report = harness::run_experiment(&cfg, &data).unwrap();
    let split = &report.splits[0];
    let layout =
        split.n_train == 30 && split.n_validation == 10 && split.n_test == 10 && split.n_train_augmented == 100;
    let acc = split.siamese.accuracy;
    let worst = split.baselines.values().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        layout && acc >= 0.95 && acc > worst,
        format!(
            "siamese top-1 {acc:.3}; 1NN {:?}; layout 30/10/10 augmented to 100: {layout}",
            split.baselines
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. conformal coverage

fn synthetic_result(rng: &mut ChaCha8Rng, id: usize, classes: &[String]) -> (MatchResult, String) {
    let truth = rng.random_range(0..classes.len());
    let scores: Vec<f64> = (0..classes.len())
        .map(|c| {
            let u: f64 = rng.random();
            if c == truth {
                u.powf(0.4)
            } else {
                0.9 * u
            }
        })
        .collect();
    let labels: Vec<&str> = classes.iter().map(String::as_str).collect();
    (
        MatchResult::from_scores(format!("q{id}"), &labels, scores).unwrap(),
        classes[truth].clone(),
    )
}

fn conformal_coverage() -> Outcome {
    let classes: Vec<String> = (0..10).map(|c| format!("class_{c}")).collect();
    let alphas = [0.2, 0.1, 0.05];
    let seeds = 20;
    let mut coverage = [0.0; 3];
    let mut monotone = true;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cal: Vec<_> = (0..500).map(|i| synthetic_result(&mut rng, i, &classes)).collect();
        let test: Vec<_> = (0..500).map(|i| synthetic_result(&mut rng, i, &classes)).collect();
        let scores: Vec<f64> = cal.iter().map(|(r, t)| r.score_of(t).unwrap()).collect();
        let mut previous: Option<Vec<usize>> = None;
        for (k, &alpha) in alphas.iter().enumerate() {
            let c = ConformalCalibrator::from_scores(scores.clone(), alpha).unwrap();
            let sets: Vec<_> = test.iter().map(|(r, _)| predict_set(r, &c)).collect();
            let hits = sets.iter().zip(&test).filter(|(s, (_, t))| s.contains(t)).count();
            coverage[k] += hits as f64 / test.len() as f64 / seeds as f64;
            let sizes: Vec<usize> = sets.iter().map(|s| s.len()).collect();
            if let Some(prev) = &previous {
                monotone &= prev.iter().zip(&sizes).all(|(a, b)| b >= a);
            }
            previous = Some(sizes);
        }
    }
    let ok = alphas.iter().zip(&coverage).all(|(a, c)| *c >= 1.0 - a - 0.03);
    outcome(
        ok && monotone,
        format!(
            "mean coverage {:.3}/{:.3}/{:.3} at alpha 0.2/0.1/0.05; sizes monotone on every seed: {monotone}",
            coverage[0], coverage[1], coverage[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 8–10

fn ci_formula() -> Outcome {
    let values = [0.90, 0.92, 0.94, 0.92];
    let mean = values.iter().sum::<f64>() / 4.0;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0).sqrt();
    let expected = 1.96 * sd / 4f64.sqrt();
    let got = harness::confidence_half_width(&values).unwrap();
    let summary = harness::MetricSummary::new(values.to_vec());
    let ok = (got - expected).abs() <= 1e-12 && (summary.mean - 0.92).abs() <= 1e-12;
    outcome(
        ok,
        format!(
            "half-width {got:.12} expected {expected:.12}, mean {:.12}",
            summary.mean
        ),
    )
}

fn parameter_budget() -> Outcome {
    let arch = ArchitectureConfig::default();
    let analytic = arch.param_count();
    let actual = network::init_params(&arch, 0).unwrap().param_count();
    outcome(
        analytic == actual && (150_000..=350_000).contains(&actual),
        format!("{actual} parameters (analytic {analytic})"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = SyntheticDatasetSpec {
        n_classes: 4,
        spectra_per_class: 4,
        grid_length: 64,
        seed: 3,
        ..Default::default()
    };
    let mut cfg = ExperimentConfig::default();
    cfg.arch = small_arch(32);
    cfg.train.total_steps = 20;
    cfg.train.ensemble_size = 2;
    cfg.train.batch_size = 8;
    cfg.train.validation_interval = 10;
    cfg.experiment.n_test_splits = 2;
    cfg.experiment.alphas = vec![0.5, 0.2];
    std::fs::write(root.join("config.toml"), cfg.to_toml()).unwrap();
    std::fs::write(root.join("spec.toml"), toml::to_string(&spec).unwrap()).unwrap();
    let p = |name: &str| root.join(name).display().to_string();
    let run = |args: &[&str]| specmatch::cli::run(std::iter::once("specmatch").chain(args.iter().copied()));
    let mut codes = vec![run(&["synth", "--spec", &p("spec.toml"), "--out", &p("data.csv")])];
    codes.push(run(&[
        "evaluate",
        "--config",
        &p("config.toml"),
        "--data",
        &p("data.csv"),
        "--out",
        &p("first"),
    ]));
    let manifest = p("first/manifest.json");
    codes.push(run(&["evaluate", "--manifest", &manifest, "--out", &p("second")]));
    codes.push(run(&["evaluate", "--manifest", &manifest, "--out", &p("third")]));
    let read = |d: &str, f: &str| std::fs::read(Path::new(&p(d)).join(f)).unwrap_or_default();
    let mut same = codes.iter().all(|c| *c == 0);
    for f in ["report.md", "report.json", "summary.jsonl", "curve.jsonl"] {
        let first = read("first", f);
        same &= !first.is_empty() && first == read("second", f) && first == read("third", f);
    }
    outcome(
        same,
        format!("exit codes {codes:?}; reports byte-identical across manifest reruns: {same}"),
    )
}

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Outcome)> = vec![
        ("1 gradient correctness", Duration::from_secs(60), gradient_check),
        ("2 op oracles", Duration::from_secs(30), op_oracles),
        ("3 distance map properties", Duration::from_secs(5), distance_properties),
        ("4 augmentation", Duration::from_secs(60), augmentation),
        ("5 pair imbalance", Duration::from_secs(5), pair_imbalance),
        ("6 synthetic end-to-end", Duration::from_secs(15 * 60), end_to_end),
        ("7 conformal coverage", Duration::from_secs(120), conformal_coverage),
        ("8 confidence interval", Duration::from_secs(5), ci_formula),
        ("9 parameter budget", Duration::from_secs(5), parameter_budget),
        ("10 determinism", Duration::from_secs(300), determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let pass = out.pass && took < budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} [{:.1}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
