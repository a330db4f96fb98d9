//! Class-size dependent augmentation and shift-simulated validation pairs.
//!
//! | spectra in class | rule                                                   |
//! |------------------|--------------------------------------------------------|
//! | more than 100    | left alone                                             |
//! | 2 to 100         | convex combinations `λ·a + (1−λ)·b`, `λ ~ U(0, 1)`      |
//! | 1                | Gaussian noise scaled by the local first-difference variance |
//!
//! For the single-spectrum rule the first difference `d_w = s_w − s_{w−1}`
//! exists for `w ≥ 1`. The variance at index `w` is taken over the forward
//! window `d_w ..= d_{w+K−1}`, clipped to the differences that exist and
//! kept at two samples or more near the ends. Each point is then redrawn as
//! `ŝ_w ~ N(s_w, κ·σ_w²)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra_io::ResampledSpectrum;

/// Classes larger than this are never augmented.
pub const NO_AUGMENT_ABOVE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseAugConfig {
    /// Sliding window length `K` over the first difference.
    pub window: usize,
    /// Variance multiplier `κ`.
    pub kappa: f64,
    pub seed: u64,
}

impl Default for NoiseAugConfig {
    fn default() -> Self {
        NoiseAugConfig {
            window: 10,
            kappa: 5.0,
            seed: 0,
        }
    }
}

impl NoiseAugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("noise window {} < 2", self.window)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa {} must be positive", self.kappa)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSimConfig {
    /// Shift of positive pairs, cm⁻¹.
    pub positive_shift: f64,
    pub negative_shift_mean: f64,
    pub negative_shift_std: f64,
    /// Also apply the single-spectrum noise model to the shifted copy.
    pub add_noise: bool,
    pub seed: u64,
}

impl Default for ShiftSimConfig {
    fn default() -> Self {
        ShiftSimConfig {
            positive_shift: 3.0,
            negative_shift_mean: 150.0,
            negative_shift_std: 50.0,
            add_noise: true,
            seed: 0,
        }
    }
}

impl ShiftSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..10.0).contains(&self.positive_shift) {
            return Err(Error::Config(format!(
                "positive_shift {} must be in [0, 10) cm⁻¹",
                self.positive_shift
            )));
        }
        if !(self.negative_shift_std >= 0.0 && self.negative_shift_mean.is_finite()) {
            return Err(Error::Config(
                "negative shift distribution must have finite mean and std ≥ 0".into(),
            ));
        }
        if self.negative_shift_std == 0.0 && self.negative_shift_mean.abs() < 3.0 * self.positive_shift {
            return Err(Error::Config(
                "negative shift can never clear three times the positive shift".into(),
            ));
        }
        Ok(())
    }
}

/// Per-index noise variance `κ·σ_w²` of the single-spectrum rule.
pub fn noise_variance(s: &[f64], window: usize, kappa: f64) -> Vec<f64> {
    let n = s.len();
    if n < 3 {
        return vec![0.0; n];
    }
    let d: Vec<f64> = (0..n).map(|w| if w == 0 { 0.0 } else { s[w] - s[w - 1] }).collect();
    (0..n)
        .map(|w| {
            let mut lo = w.max(1);
            let mut hi = (w + window - 1).min(n - 1);
            if hi < lo + 1 {
                hi = (lo + 1).min(n - 1);
                lo = hi - 1;
            }
            let win = &d[lo..=hi];
            let m = win.len() as f64;
            let mu = win.iter().sum::<f64>() / m;
            let var = win.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            kappa * var
        })
        .collect()
}

/// One noisy copy of `s` under the single-spectrum rule.
pub fn noise_augment<R: Rng + ?Sized>(
    s: &ResampledSpectrum,
    cfg: &NoiseAugConfig,
    rng: &mut R,
) -> Result<ResampledSpectrum> {
    cfg.validate()?;
    let out = noisy_intensities(s.intensities(), cfg, rng)?;
    Ok(s.derived(out, format!("{}~noise", s.source_id())))
}

fn noisy_intensities<R: Rng + ?Sized>(x: &[f64], cfg: &NoiseAugConfig, rng: &mut R) -> Result<Vec<f64>> {
    if x.len() < cfg.window + 1 {
        return Err(Error::Config(format!(
            "noise augmentation needs at least {} points, spectrum has {}",
            cfg.window + 1,
            x.len()
        )));
    }
    let var = noise_variance(x, cfg.window, cfg.kappa);
    Ok(x.iter()
        .zip(&var)
        .map(|(&v, &s2)| {
            if s2 > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                v + s2.sqrt() * z
            } else {
                v
            }
        })
        .collect())
}

/// Grow one class to `target_count` spectra. Originals come first and are
/// returned untouched.
pub fn augment_class<R: Rng + ?Sized>(
    spectra: &[ResampledSpectrum],
    target_count: usize,
    cfg: &NoiseAugConfig,
    rng: &mut R,
) -> Result<Vec<ResampledSpectrum>> {
    let first = spectra
        .first()
        .ok_or(Error::EmptyInput("cannot augment an empty class"))?;
    let label = first.class_label();
    if let Some(other) = spectra.iter().find(|s| s.class_label() != label) {
        return Err(Error::Config(format!(
            "augment_class got mixed classes `{label}` and `{}`",
            other.class_label()
        )));
    }
    let n = spectra.len();
    if target_count < n {
        return Err(Error::Config(format!(
            "target count {target_count} is below the class size {n}"
        )));
    }
    let mut out = spectra.to_vec();
    if n > NO_AUGMENT_ABOVE {
        return Ok(out);
    }
    let mut k = 0;
    while out.len() < target_count {
        let made = if n == 1 {
            let x = noisy_intensities(first.intensities(), cfg, rng)?;
            first.derived(x, format!("{}~noise{k}", first.source_id()))
        } else {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let (a, b) = (&spectra[i], &spectra[j]);
            let lambda: f64 = rng.random();
            let x = a
                .intensities()
                .iter()
                .zip(b.intensities())
                .map(|(&p, &q)| (q + lambda * (p - q)).clamp(p.min(q), p.max(q)))
                .collect();
            a.derived(x, format!("{}+{}~mix{k}", a.source_id(), b.source_id()))
        };
        out.push(made);
        k += 1;
    }
    Ok(out)
}

/// Augment every class to at least `min_class_size` spectra. Classes are
/// visited in label order so the output is reproducible.
pub fn augment_dataset<R: Rng + ?Sized>(
    spectra: &[ResampledSpectrum],
    min_class_size: usize,
    cfg: &NoiseAugConfig,
    rng: &mut R,
) -> Result<Vec<ResampledSpectrum>> {
    let mut by_class: BTreeMap<&str, Vec<ResampledSpectrum>> = BTreeMap::new();
    for s in spectra {
        by_class.entry(s.class_label()).or_default().push(s.clone());
    }
    let mut out = Vec::with_capacity(spectra.len());
    for members in by_class.values() {
        let target = members.len().max(min_class_size);
        out.extend(augment_class(members, target, cfg, rng)?);
    }
    Ok(out)
}

/// Move intensities `steps` indices towards higher wavenumber (negative
/// steps move them lower), filling vacated points with the edge value.
pub fn shift_intensities(x: &[f64], steps: isize) -> Vec<f64> {
    let n = x.len() as isize;
    (0..n).map(|i| x[(i - steps).clamp(0, n - 1) as usize]).collect()
}

/// Magnitude of one negative-pair shift: `|N(mean, std)|`, redrawn while
/// below three times the positive shift.
pub fn draw_negative_shift<R: Rng + ?Sized>(cfg: &ShiftSimConfig, rng: &mut R) -> f64 {
    let normal = Normal::new(cfg.negative_shift_mean, cfg.negative_shift_std).expect("validated std");
    let floor = 3.0 * cfg.positive_shift;
    loop {
        let v = normal.sample(rng).abs();
        if v >= floor {
            return v;
        }
    }
}

/// Pairs built by shifting spectra along the wavenumber axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPairs {
    pub first: Vec<ResampledSpectrum>,
    pub second: Vec<ResampledSpectrum>,
    /// 1 for a positive (small shift) pair, 0 for a negative one.
    pub labels: Vec<f64>,
    /// Signed shift applied to each second member, cm⁻¹.
    pub shifts: Vec<f64>,
}

impl SimulatedPairs {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `count` validation pairs, alternating positive and negative, each made
/// from a uniformly chosen spectrum and a shifted copy of itself.
/// `grid_step` converts cm⁻¹ to grid indices; shifts round to the nearest step.
pub fn simulate_validation_pairs<R: Rng + ?Sized>(
    spectra: &[ResampledSpectrum],
    grid_step: f64,
    cfg: &ShiftSimConfig,
    noise: &NoiseAugConfig,
    count: usize,
    rng: &mut R,
) -> Result<SimulatedPairs> {
    if spectra.is_empty() {
        return Err(Error::EmptyInput("cannot simulate validation pairs from zero spectra"));
    }
    if !(grid_step > 0.0) {
        return Err(Error::Config(format!("grid step {grid_step} must be positive")));
    }
    cfg.validate()?;
    let mut pairs = SimulatedPairs {
        first: Vec::with_capacity(count),
        second: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
        shifts: Vec::with_capacity(count),
    };
    for k in 0..count {
        let positive = k % 2 == 0;
        let s = &spectra[rng.random_range(0..spectra.len())];
        let magnitude = if positive {
            cfg.positive_shift
        } else {
            draw_negative_shift(cfg, rng)
        };
        let shift = if rng.random::<bool>() { magnitude } else { -magnitude };
        let steps = (shift / grid_step).round() as isize;
        let mut x = shift_intensities(s.intensities(), steps);
        if cfg.add_noise {
            x = noisy_intensities(&x, noise, rng)?;
        }
        pairs.second.push(s.derived(x, format!("{}~shift{k}", s.source_id())));
        pairs.first.push(s.clone());
        pairs.labels.push(if positive { 1.0 } else { 0.0 });
        pairs.shifts.push(shift);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(x: Vec<f64>, label: &str, id: &str) -> ResampledSpectrum {
        ResampledSpectrum::from_parts(x, label, id)
    }

    #[test]
    fn large_class_is_untouched() {
        let class: Vec<_> = (0..150)
            .map(|i| spec(vec![i as f64; 4], "a", &format!("s{i}")))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_class(&class, 200, &NoiseAugConfig::default(), &mut rng).unwrap();
        assert_eq!(out, class);
    }

    #[test]
    fn convex_combinations_stay_in_envelope() {
        let a = spec(vec![0.0, 1.0, 5.0, -2.0], "a", "x");
        let b = spec(vec![2.0, 1.0, -1.0, 4.0], "a", "y");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_class(&[a.clone(), b.clone()], 5, &NoiseAugConfig::default(), &mut rng).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0], a);
        assert_eq!(out[1], b);
        for s in &out[2..] {
            assert_eq!(s.class_label(), "a");
            assert!(s.is_augmented());
            for (i, v) in s.intensities().iter().enumerate() {
                let (p, q) = (a.intensities()[i], b.intensities()[i]);
                assert!(*v >= p.min(q) && *v <= p.max(q));
            }
        }
    }

    #[test]
    fn single_spectrum_gets_noise_copies() {
        let s = spec((0..32).map(|i| ((i as f64) / 3.0).sin()).collect(), "a", "x");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = augment_class(std::slice::from_ref(&s), 4, &NoiseAugConfig::default(), &mut rng).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out[1..].iter().all(|c| c.intensities() != s.intensities()));
    }

    #[test]
    fn bad_targets_and_mixed_classes() {
        let a = spec(vec![0.0; 4], "a", "x");
        let b = spec(vec![0.0; 4], "b", "y");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = NoiseAugConfig::default();
        assert!(augment_class(&[a.clone(), a.clone()], 1, &cfg, &mut rng).is_err());
        assert!(augment_class(&[a, b], 3, &cfg, &mut rng).is_err());
        assert!(augment_class(&[], 3, &cfg, &mut rng).is_err());
    }

    #[test]
    fn constant_and_ramp_unchanged() {
        let cfg = NoiseAugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flat = spec(vec![2.5; 40], "a", "c");
        assert_eq!(
            noise_augment(&flat, &cfg, &mut rng).unwrap().intensities(),
            flat.intensities()
        );
        let ramp = spec((0..40).map(|w| 0.75 * w as f64).collect(), "a", "r");
        assert_eq!(
            noise_augment(&ramp, &cfg, &mut rng).unwrap().intensities(),
            ramp.intensities()
        );
    }

    #[test]
    fn too_short_for_window() {
        let cfg = NoiseAugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = spec(vec![1.0; 10], "a", "c");
        assert!(noise_augment(&s, &cfg, &mut rng).is_err());
    }

    /// Window statistics recomputed with explicit index bookkeeping.
    fn window_variance_oracle(s: &[f64], k: usize) -> Vec<f64> {
        let n = s.len();
        let mut out = Vec::new();
        for w in 0..n {
            let mut idx: Vec<usize> = (w..w + k).filter(|&i| i >= 1 && i < n).collect();
            if idx.len() < 2 {
                let first = w.max(1);
                idx = if first + 1 < n {
                    vec![first, first + 1]
                } else {
                    vec![n - 2, n - 1]
                };
            }
            let vals: Vec<f64> = idx.iter().map(|&i| s[i] - s[i - 1]).collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            out.push(vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64);
        }
        out
    }

    #[test]
    fn step_noise_concentrates_at_the_step() {
        let x = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let k = 2;
        let expected = window_variance_oracle(&x, k);
        assert_eq!(noise_variance(&x, k, 1.0), expected);
        assert!(expected[2] > 0.0 && expected[3] > 0.0);
        assert_eq!(expected[0], 0.0);
        assert_eq!(expected[4], 0.0);

        let cfg = NoiseAugConfig {
            window: k,
            kappa: 5.0,
            seed: 0,
        };
        let s = spec(x.clone(), "a", "step");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 10_000;
        let mut sq = vec![0.0; x.len()];
        for _ in 0..draws {
            let y = noise_augment(&s, &cfg, &mut rng).unwrap();
            for (i, v) in y.intensities().iter().enumerate() {
                sq[i] += (v - x[i]).powi(2);
            }
        }
        for i in 0..x.len() {
            let empirical = sq[i] / draws as f64;
            let target = 5.0 * expected[i];
            if target == 0.0 {
                assert_eq!(empirical, 0.0);
            } else {
                assert!(
                    (empirical - target).abs() <= 0.1 * target,
                    "{i}: {empirical} vs {target}"
                );
            }
        }
    }

    #[test]
    fn shift_by_one_step() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(shift_intensities(&x, 1), vec![1.0, 1.0, 2.0, 3.0]);
        assert_eq!(shift_intensities(&x, -1), vec![2.0, 3.0, 4.0, 4.0]);
        assert_eq!(shift_intensities(&x, 0), x.to_vec());
    }

    #[test]
    fn zero_positive_shift_gives_identical_pairs() {
        let s = spec((0..20).map(|i| i as f64).collect(), "a", "x");
        let cfg = ShiftSimConfig {
            positive_shift: 0.0,
            add_noise: false,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = simulate_validation_pairs(&[s], 1.0, &cfg, &NoiseAugConfig::default(), 6, &mut rng).unwrap();
        assert_eq!(pairs.len(), 6);
        for i in (0..6).step_by(2) {
            assert_eq!(pairs.labels[i], 1.0);
            assert_eq!(pairs.first[i].intensities(), pairs.second[i].intensities());
        }
        for i in (1..6).step_by(2) {
            assert_eq!(pairs.labels[i], 0.0);
        }
    }

    #[test]
    fn negative_shift_statistics() {
        let cfg = ShiftSimConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let draws: Vec<f64> = (0..10_000).map(|_| draw_negative_shift(&cfg, &mut rng)).collect();
        assert!(draws.iter().all(|d| *d >= 9.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
        assert!((mean - 150.0).abs() <= 5.0, "{mean}");
        assert!((std - 50.0).abs() <= 5.0, "{std}");
    }
}
