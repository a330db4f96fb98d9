//! Synthetic data, repeated leave-one-out experiments and their reports.
//!
//! One experiment split runs:
//!
//! 1. leave-one-out test draw (or the fixed `role = test` records),
//! 2. one validation spectrum per class held out of training,
//! 3. resampling onto the shared grid and optional normalization,
//! 4. augmentation of the training classes,
//! 5. ensemble training,
//! 6. a reference library of the original training and validation spectra,
//! 7. Siamese and 1NN accuracy on the test spectra,
//! 8. optionally, conformal calibration on validation and a coverage curve.
//!
//! Splits differ only in their seed (`split_seed + i`). Reports contain no
//! timestamps or hash-map iteration, so reruns produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_dataset, NoiseAugConfig, ShiftSimConfig};
use crate::conformal::{self, average_set_size, empirical_coverage, predict_set, CalibrationSummary};
use crate::error::{Error, Result};
use crate::matcher::{self, evaluate_accuracy, MatchResult, Metric, ReferenceLibrary, VotingConfig};
use crate::network::ArchitectureConfig;
use crate::spectra_io::{self, DatasetSplit, Grid, Preprocessing, ResampledSpectrum, Role, Spectrum};
use crate::trainer::{self, TrainConfig, TrainingData, Validation};

// ----------------------------------------------------------------------
// Synthetic spectra

/// Recipe for a synthetic dataset of Gaussian-peak classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub n_classes: usize,
    pub spectra_per_class: usize,
    /// Inclusive range of peaks per class.
    pub n_peaks_range: [usize; 2],
    /// Range of Gaussian standard deviations, cm⁻¹.
    pub peak_width_range: [f64; 2],
    pub peak_height_range: [f64; 2],
    /// Minimum distance between peaks of one class, cm⁻¹.
    pub min_peak_separation: f64,
    /// Standard deviation of the white noise added to every spectrum.
    pub noise_sigma: f64,
    /// Intercept and end-to-end slope of the linear baseline are drawn from
    /// `U(−a, a)`.
    pub baseline_amplitude: f64,
    /// Standard deviation of a per-spectrum wavenumber shift, cm⁻¹.
    pub shift_jitter: f64,
    /// Relative standard deviation of each peak height, per spectrum.
    pub height_jitter: f64,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_length: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_classes: 10,
            spectra_per_class: 5,
            n_peaks_range: [3, 8],
            peak_width_range: [8.0, 24.0],
            peak_height_range: [0.2, 1.0],
            min_peak_separation: 40.0,
            noise_sigma: 0.02,
            baseline_amplitude: 0.1,
            shift_jitter: 0.0,
            height_jitter: 0.0,
            grid_min: 200.0,
            grid_max: 1800.0,
            grid_length: spectra_io::DEFAULT_INPUT_LENGTH,
            seed: 0,
        }
    }
}

/// One Gaussian peak of a class template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub position: f64,
    pub height: f64,
    pub width: f64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if self.spectra_per_class == 0 {
            return bad("spectra_per_class must be at least 1");
        }
        if self.n_peaks_range[0] == 0 || self.n_peaks_range[0] > self.n_peaks_range[1] {
            return bad("n_peaks_range must be a non-empty range of positive counts");
        }
        if !(self.peak_width_range[0] > 0.0 && self.peak_width_range[0] <= self.peak_width_range[1]) {
            return bad("peak_width_range must be positive and ordered");
        }
        if !(self.peak_height_range[0] > 0.0 && self.peak_height_range[0] <= self.peak_height_range[1]) {
            return bad("peak_height_range must be positive and ordered");
        }
        if self.noise_sigma < 0.0
            || self.baseline_amplitude < 0.0
            || self.shift_jitter < 0.0
            || self.height_jitter < 0.0
        {
            return bad("noise, baseline and jitter magnitudes must be non-negative");
        }
        Grid::new(self.grid_min, self.grid_max, self.grid_length)?;
        let room = (self.grid_max - self.grid_min) / self.min_peak_separation.max(f64::MIN_POSITIVE);
        if (self.n_peaks_range[1] as f64) > room {
            return bad("min_peak_separation leaves no room for the requested number of peaks");
        }
        Ok(())
    }

    fn label(c: usize) -> String {
        format!("class_{c:02}")
    }
}

/// Peak positions of `a` that are not within `sep` of any peak of `b`.
fn distinct_peaks(a: &[Peak], b: &[Peak], sep: f64) -> usize {
    a.iter()
        .filter(|p| b.iter().all(|q| (p.position - q.position).abs() >= sep))
        .count()
}

/// Class templates: peak sets with in-class separation, each differing from
/// every other class by at least one well separated peak.
pub fn class_templates(spec: &SyntheticDatasetSpec) -> Result<Vec<Vec<Peak>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sep = spec.min_peak_separation;
    // keep peaks three widths inside the grid so templates do not depend on
    // where the grid ends
    let margin = 3.0 * spec.peak_width_range[1];
    let (lo, hi) = (spec.grid_min + margin, spec.grid_max - margin);
    if hi <= lo {
        return Err(Error::Config(
            "synthetic spec: grid too narrow for the peak widths".into(),
        ));
    }
    let mut classes: Vec<Vec<Peak>> = Vec::with_capacity(spec.n_classes);
    let mut attempts = 0;
    while classes.len() < spec.n_classes {
        attempts += 1;
        if attempts > 10_000 * spec.n_classes {
            return Err(Error::Config(
                "synthetic spec: could not place distinct peak sets".into(),
            ));
        }
        let n = rng.random_range(spec.n_peaks_range[0]..=spec.n_peaks_range[1]);
        let mut peaks: Vec<Peak> = Vec::with_capacity(n);
        let mut tries = 0;
        while peaks.len() < n && tries < 1000 {
            tries += 1;
            let position = rng.random_range(lo..hi);
            if peaks.iter().all(|p| (p.position - position).abs() >= sep) {
                peaks.push(Peak {
                    position,
                    height: rng.random_range(spec.peak_height_range[0]..=spec.peak_height_range[1]),
                    width: rng.random_range(spec.peak_width_range[0]..=spec.peak_width_range[1]),
                });
            }
        }
        if peaks.len() < n {
            continue;
        }
        peaks.sort_by(|a, b| a.position.total_cmp(&b.position));
        if classes
            .iter()
            .all(|other| distinct_peaks(&peaks, other, sep) > 0 && distinct_peaks(other, &peaks, sep) > 0)
        {
            classes.push(peaks);
        }
    }
    Ok(classes)
}

fn render(peaks: &[Peak], grid: &[f64], shift: f64, heights: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&x| {
            peaks
                .iter()
                .zip(heights)
                .map(|(p, &h)| {
                    let z = (x - p.position - shift) / p.width;
                    h * (-0.5 * z * z).exp()
                })
                .sum()
        })
        .collect()
}

/// Noise-free template of each class on the recipe's grid.
pub fn render_templates(spec: &SyntheticDatasetSpec) -> Result<Vec<Vec<f64>>> {
    let grid = Grid::new(spec.grid_min, spec.grid_max, spec.grid_length)?.points();
    Ok(class_templates(spec)?
        .iter()
        .map(|peaks| {
            let heights: Vec<f64> = peaks.iter().map(|p| p.height).collect();
            render(peaks, &grid, 0.0, &heights)
        })
        .collect())
}

/// Spectra of every class: template plus optional jitter, a random linear
/// baseline and white noise. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<Vec<Spectrum>> {
    let templates = class_templates(spec)?;
    let grid = Grid::new(spec.grid_min, spec.grid_max, spec.grid_length)?;
    let xs = grid.points();
    let span = spec.grid_max - spec.grid_min;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let shift = Normal::new(0.0, spec.shift_jitter).map_err(|e| Error::Config(e.to_string()))?;
    let height = Normal::new(1.0, spec.height_jitter).map_err(|e| Error::Config(e.to_string()))?;
    let a = spec.baseline_amplitude;
    let mut out = Vec::with_capacity(spec.n_classes * spec.spectra_per_class);
    for (c, peaks) in templates.iter().enumerate() {
        for j in 0..spec.spectra_per_class {
            let dx = shift.sample(&mut rng);
            let heights: Vec<f64> = peaks
                .iter()
                .map(|p| p.height * height.sample(&mut rng).max(0.0))
                .collect();
            let (b0, b1) = if a > 0.0 {
                (rng.random_range(-a..a), rng.random_range(-a..a))
            } else {
                (0.0, 0.0)
            };
            let mut y = render(peaks, &xs, dx, &heights);
            for (v, &x) in y.iter_mut().zip(&xs) {
                *v += b0 + b1 * (x - spec.grid_min) / span + noise.sample(&mut rng);
            }
            out.push(Spectrum::new(
                format!("c{c:02}_s{j:02}"),
                SyntheticDatasetSpec::label(c),
                Role::Train,
                xs.clone(),
                y,
            )?);
        }
    }
    Ok(out)
}

// ----------------------------------------------------------------------
// Experiment configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValidationMode {
    /// Pairs built from one held-out spectrum per class.
    Holdout,
    /// Shift-simulated pairs from the training spectra.
    Shift,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub n_test_splits: usize,
    /// Split `i` uses seed `split_seed + i`.
    pub split_seed: u64,
    /// Grid bounds; default to the intersection of all measured ranges.
    pub grid_min: Option<f64>,
    pub grid_max: Option<f64>,
    pub normalize: bool,
    /// Training classes are augmented up to this many spectra.
    pub min_class_size: usize,
    pub validation: ValidationMode,
    /// Miscoverage level of the reported calibration threshold.
    pub conformal_alpha: Option<f64>,
    /// Miscoverage levels for the coverage/size curve; empty disables it.
    pub alphas: Vec<f64>,
}

pub const DEFAULT_ALPHAS: [f64; 6] = [0.5, 0.2, 0.1, 0.05, 0.02, 0.01];

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_test_splits: 4,
            split_seed: 0,
            grid_min: None,
            grid_max: None,
            normalize: true,
            min_class_size: 10,
            validation: ValidationMode::Holdout,
            conformal_alpha: Some(0.1),
            alphas: DEFAULT_ALPHAS.to_vec(),
        }
    }
}

/// Every knob of an experiment; one TOML file with a section per part.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub noise: NoiseAugConfig,
    pub shift: ShiftSimConfig,
    pub voting: VotingConfig,
    pub experiment: ProtocolConfig,
    /// Recipe used by `synth`; ignored by experiments.
    pub synthetic: Option<SyntheticDatasetSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        self.noise.validate()?;
        self.shift.validate()?;
        if self.voting.m == 0 {
            return Err(Error::Config("voting m must be at least 1".into()));
        }
        let e = &self.experiment;
        if e.n_test_splits == 0 {
            return Err(Error::Config("n_test_splits must be at least 1".into()));
        }
        if let Some(a) = e
            .alphas
            .iter()
            .chain(&e.conformal_alpha)
            .find(|a| !(**a > 0.0 && **a < 1.0))
        {
            return Err(Error::Config(format!("alpha {a} outside (0, 1)")));
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

// ----------------------------------------------------------------------
// Reports

/// `1.96 · s / √n` with `s` the sample standard deviation; `None` for a
/// single value.
pub fn confidence_half_width(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    Some(1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Half-width of the 95% interval; `None` with a single split.
    pub half_width: Option<f64>,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn new(values: Vec<f64>) -> Self {
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        MetricSummary {
            mean,
            half_width: confidence_half_width(&values),
            values,
        }
    }
}

/// One row of a coverage/size curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub alpha: f64,
    pub theoretical_coverage: f64,
    pub empirical_coverage: f64,
    pub average_set_size: f64,
}

/// Calibrate on `cal` at every `alpha` and measure coverage and set size on
/// `test`.
pub fn coverage_size_curve(
    cal: &[(MatchResult, String)],
    test: &[(MatchResult, String)],
    alphas: &[f64],
) -> Result<Vec<CurveRow>> {
    let truths: Vec<String> = test.iter().map(|(_, t)| t.clone()).collect();
    alphas
        .iter()
        .map(|&alpha| {
            let c = conformal::calibrate(cal, alpha)?;
            let sets: Vec<_> = test.iter().map(|(r, _)| predict_set(r, &c)).collect();
            Ok(CurveRow {
                alpha,
                theoretical_coverage: 1.0 - alpha,
                empirical_coverage: empirical_coverage(&sets, &truths)?,
                average_set_size: average_set_size(&sets)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub seed: u64,
    pub n_train: usize,
    pub n_train_augmented: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub excluded_classes: Vec<String>,
    pub member_seeds: Vec<u64>,
    /// Step whose parameters each member kept.
    pub best_steps: Vec<usize>,
    pub final_losses: Vec<f64>,
    pub siamese: matcher::AccuracyReport,
    /// 1NN top-1 accuracy per metric.
    pub baselines: BTreeMap<String, f64>,
    pub calibration: Option<CalibrationSummary>,
    pub curve: Vec<CurveRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub data_hash: String,
    pub n_spectra: usize,
    pub n_classes: usize,
    pub splits: Vec<SplitReport>,
    /// Aggregates keyed by metric name (`siamese_top1`, `1nn_cosine`, ...).
    pub summary: BTreeMap<String, MetricSummary>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Per-row machine-readable records of the summary table.
    pub fn summary_records(&self) -> Vec<serde_json::Value> {
        self.summary
            .iter()
            .map(|(k, m)| serde_json::json!({ "metric": k, "mean": m.mean, "half_width": m.half_width, "values": m.values }))
            .collect()
    }

    /// Human-readable text document.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Experiment report");
        let _ = writeln!(s);
        let _ = writeln!(s, "config hash: {}", self.config_hash);
        let _ = writeln!(s, "data hash:   {}", self.data_hash);
        let _ = writeln!(
            s,
            "spectra: {}, classes: {}, splits: {}",
            self.n_spectra,
            self.n_classes,
            self.splits.len()
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "## Accuracy (mean ± 95% half-width)");
        let _ = writeln!(s);
        let _ = writeln!(s, "| metric | mean | ± | per split |");
        let _ = writeln!(s, "|---|---|---|---|");
        for (k, m) in &self.summary {
            let hw = m.half_width.map_or("n/a".to_string(), |h| format!("{h:.4}"));
            let vals: Vec<String> = m.values.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "| {k} | {:.4} | {hw} | {} |", m.mean, vals.join(", "));
        }
        for split in &self.splits {
            let _ = writeln!(s);
            let _ = writeln!(s, "## Split {}", split.seed);
            let _ = writeln!(s);
            let _ = writeln!(
                s,
                "train {} (augmented to {}), validation {}, test {}",
                split.n_train, split.n_train_augmented, split.n_validation, split.n_test
            );
            if !split.excluded_classes.is_empty() {
                let _ = writeln!(
                    s,
                    "classes without a test spectrum: {}",
                    split.excluded_classes.join(", ")
                );
            }
            let _ = writeln!(s, "members {:?}, kept steps {:?}", split.member_seeds, split.best_steps);
            let _ = writeln!(s, "siamese voted {:.4}", split.siamese.accuracy);
            for (k, v) in &split.siamese.top_k {
                let _ = writeln!(s, "siamese top-{k} {v:.4}");
            }
            for (k, v) in &split.baselines {
                let _ = writeln!(s, "1nn {k} {v:.4}");
            }
            for c in &split.siamese.confusion {
                let _ = writeln!(s, "confused {} -> {} ({})", c.truth, c.predicted, c.count);
            }
            if let Some(cal) = &split.calibration {
                let tau = cal.tau.map_or("-inf".to_string(), |t| format!("{t:.6}"));
                let cov = cal.check_coverage.map_or("n/a".to_string(), |c| format!("{c:.4}"));
                let _ = writeln!(
                    s,
                    "calibration n {}, alpha {}, tau {tau}, test coverage {cov}",
                    cal.n, cal.alpha
                );
            }
            if !split.curve.is_empty() {
                let _ = writeln!(s);
                let _ = writeln!(s, "| alpha | 1 - alpha | coverage | avg set size |");
                let _ = writeln!(s, "|---|---|---|---|");
                for r in &split.curve {
                    let _ = writeln!(
                        s,
                        "| {} | {:.4} | {:.4} | {:.4} |",
                        r.alpha, r.theoretical_coverage, r.empirical_coverage, r.average_set_size
                    );
                }
            }
        }
        s
    }
}

/// SHA-256 over every record of a dataset in order.
pub fn data_hash(data: &[Spectrum]) -> String {
    let mut h = Sha256::new();
    for s in data {
        h.update(s.source_id().as_bytes());
        h.update([0]);
        h.update(s.class_label().as_bytes());
        h.update([0]);
        h.update(s.role().to_string().as_bytes());
        for v in s.wavenumbers().iter().chain(s.intensities()) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Grid from the config bounds, falling back to the common measured range.
pub fn experiment_grid(cfg: &ExperimentConfig, data: &[Spectrum]) -> Result<Grid> {
    let common = Grid::common(data, cfg.arch.input_length)?;
    Grid::new(
        cfg.experiment.grid_min.unwrap_or(common.min),
        cfg.experiment.grid_max.unwrap_or(common.max),
        cfg.arch.input_length,
    )
}

fn split_for(cfg: &ExperimentConfig, data: &[Spectrum], seed: u64) -> DatasetSplit {
    let fixed_test = data.iter().any(|s| s.role() == Role::Test);
    let mut split = if fixed_test {
        let mut s = spectra_io::split_by_role(data);
        s.split_seed = seed;
        s
    } else {
        spectra_io::make_test_split(data, seed)
    };
    if cfg.experiment.validation == ValidationMode::Holdout && split.validation.is_empty() {
        split = spectra_io::hold_out_validation(split, seed);
    }
    split
}

/// Augmented training spectra and validation pairs for one split seed.
pub fn training_data(
    cfg: &ExperimentConfig,
    train: &[ResampledSpectrum],
    validation: &[ResampledSpectrum],
    grid: &Grid,
    seed: u64,
) -> Result<TrainingData> {
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed.wrapping_add(seed));
    let spectra = augment_dataset(train, cfg.experiment.min_class_size, &cfg.noise, &mut aug_rng)?;
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.shift.seed.wrapping_add(seed));
    let validation = match cfg.experiment.validation {
        ValidationMode::None => Validation::None,
        ValidationMode::Holdout => trainer::holdout_pairs(validation, train, &mut val_rng)?,
        ValidationMode::Shift => Validation::Shift {
            spectra: train.to_vec(),
            grid_step: grid.step(),
            shift: cfg.shift.clone(),
            noise: cfg.noise.clone(),
        },
    };
    Ok(TrainingData { spectra, validation })
}

fn labelled(results: Vec<MatchResult>, spectra: &[ResampledSpectrum]) -> Vec<(MatchResult, String)> {
    results
        .into_iter()
        .zip(spectra)
        .map(|(r, s)| (r, s.class_label().to_string()))
        .collect()
}

/// Everything trained and measured for one split.
pub struct SplitOutcome {
    pub report: SplitReport,
    pub ensemble: trainer::Ensemble,
    pub library: ReferenceLibrary,
    pub logs: Vec<Vec<trainer::TrainLogRecord>>,
}

/// Run one split of the protocol.
pub fn run_split(cfg: &ExperimentConfig, data: &[Spectrum], grid: &Grid, index: usize) -> Result<SplitOutcome> {
    let seed = cfg.experiment.split_seed.wrapping_add(index as u64);
    let split = split_for(cfg, data, seed);
    split.validate()?;
    if split.test.is_empty() {
        return Err(Error::EmptyInput("the split has no test spectra"));
    }
    let prep = Preprocessing {
        grid: *grid,
        normalize: cfg.experiment.normalize,
    };
    let train = prep.apply_all(&split.train)?;
    let validation = prep.apply_all(&split.validation)?;
    let test = prep.apply_all(&split.test)?;

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.train.seed.wrapping_add(1000 * index as u64);
    let data_for_training = training_data(cfg, &train, &validation, grid, seed)?;
    let n_augmented = data_for_training.spectra.len();
    let (ensemble, members) = trainer::train_ensemble(&data_for_training, &cfg.arch, &train_cfg)?;

    let mut library_spectra = train.clone();
    library_spectra.extend(validation.iter().cloned());
    let library = ReferenceLibrary::build(library_spectra, &ensemble)?;
    let (siamese, _) = evaluate_accuracy(&test, &library, &ensemble, cfg.voting)?;
    let mut baselines = BTreeMap::new();
    for metric in Metric::ALL {
        let rep = matcher::baseline_accuracy(&test, &library, metric)?;
        baselines.insert(metric.name().to_string(), rep.accuracy);
    }

    let wants_conformal = cfg.experiment.conformal_alpha.is_some() || !cfg.experiment.alphas.is_empty();
    let (calibration, curve) = if !wants_conformal || validation.is_empty() {
        (None, Vec::new())
    } else {
        // calibration needs spectra outside the library, so score the
        // validation spectra against a library of training spectra only
        let cal_library = ReferenceLibrary::build(train.clone(), &ensemble)?;
        let cal = labelled(
            matcher::score_queries(&validation, &cal_library, &ensemble)?,
            &validation,
        );
        let tst = labelled(matcher::score_queries(&test, &cal_library, &ensemble)?, &test);
        let summary = match cfg.experiment.conformal_alpha {
            Some(alpha) => {
                let c = conformal::calibrate(&cal, alpha)?;
                let sets: Vec<_> = tst.iter().map(|(r, _)| predict_set(r, &c)).collect();
                let truths: Vec<String> = tst.iter().map(|(_, t)| t.clone()).collect();
                let mut s = c.summary();
                s.check_coverage = Some(empirical_coverage(&sets, &truths)?);
                Some(s)
            }
            None => None,
        };
        (summary, coverage_size_curve(&cal, &tst, &cfg.experiment.alphas)?)
    };

    let report = SplitReport {
        seed,
        n_train: train.len(),
        n_train_augmented: n_augmented,
        n_validation: validation.len(),
        n_test: test.len(),
        excluded_classes: split.excluded_classes.clone(),
        member_seeds: ensemble.member_seeds.clone(),
        best_steps: members.iter().map(|m| m.best_step).collect(),
        final_losses: members
            .iter()
            .map(|m| m.log.last().map_or(f64::NAN, |r| r.loss))
            .collect(),
        siamese,
        baselines,
        calibration,
        curve,
    };
    Ok(SplitOutcome {
        report,
        ensemble,
        library,
        logs: members.into_iter().map(|m| m.log).collect(),
    })
}

/// Run every split and aggregate.
pub fn run_experiment(cfg: &ExperimentConfig, data: &[Spectrum]) -> Result<ExperimentReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("an experiment needs data"));
    }
    let grid = experiment_grid(cfg, data)?;
    let mut splits = Vec::with_capacity(cfg.experiment.n_test_splits);
    for i in 0..cfg.experiment.n_test_splits {
        let seed = cfg.experiment.split_seed.wrapping_add(i as u64);
        log::info!("split {} of {} (seed {seed})", i + 1, cfg.experiment.n_test_splits);
        let outcome = run_split(cfg, data, &grid, i).map_err(|e| Error::Split {
            seed,
            source: Box::new(e),
        })?;
        splits.push(outcome.report);
    }
    let mut summary = BTreeMap::new();
    summary.insert(
        "siamese_top1".to_string(),
        MetricSummary::new(splits.iter().map(|s| s.siamese.accuracy).collect()),
    );
    for k in matcher::TOP_K.iter().skip(1) {
        summary.insert(
            format!("siamese_top{k}"),
            MetricSummary::new(splits.iter().map(|s| s.siamese.top_k[k]).collect()),
        );
    }
    for metric in Metric::ALL {
        summary.insert(
            format!("1nn_{}", metric.name()),
            MetricSummary::new(splits.iter().map(|s| s.baselines[metric.name()]).collect()),
        );
    }
    let mut classes: Vec<&str> = data.iter().map(|s| s.class_label()).collect();
    classes.sort_unstable();
    classes.dedup();
    Ok(ExperimentReport {
        config_hash: cfg.hash_hex(),
        data_hash: data_hash(data),
        n_spectra: data.len(),
        n_classes: classes.len(),
        splits,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_spectra_equal_templates() {
        let spec = SyntheticDatasetSpec {
            n_classes: 4,
            spectra_per_class: 1,
            noise_sigma: 0.0,
            baseline_amplitude: 0.0,
            grid_length: 256,
            ..Default::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let templates = render_templates(&spec).unwrap();
        for (s, t) in data.iter().zip(&templates) {
            assert_eq!(s.intensities(), &t[..]);
        }
    }

    #[test]
    fn classes_have_distinct_peak_sets() {
        let spec = SyntheticDatasetSpec::default();
        let classes = class_templates(&spec).unwrap();
        assert_eq!(classes.len(), spec.n_classes);
        for (i, a) in classes.iter().enumerate() {
            for w in a.windows(2) {
                assert!(w[1].position - w[0].position >= spec.min_peak_separation);
            }
            for b in &classes[i + 1..] {
                assert!(distinct_peaks(a, b, spec.min_peak_separation) > 0);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticDatasetSpec {
            grid_length: 64,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn ci_half_width() {
        assert_eq!(confidence_half_width(&[0.9]), None);
        let hw = confidence_half_width(&[0.90, 0.92, 0.94, 0.92]).unwrap();
        let expected = 1.96 * (0.0008f64 / 3.0).sqrt() / 2.0;
        assert!((hw - expected).abs() < 1e-12);
    }

    #[test]
    fn config_defaults_roundtrip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_toml("[train]\nbetta = 1.0\n").is_err());
    }
}
