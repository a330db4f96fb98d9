//! Split-conformal prediction sets over similarity scores.
//!
//! Calibration collects, for each held-out spectrum, the ensemble score of
//! its true class. With `n` such scores and miscoverage `α`, the threshold
//! `τ` is the `⌊α(n+1)⌋`-th smallest (index clamped to `[1, n]`). A prediction
//! set holds every class scoring at least `τ`, and always the top-ranked one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{score_queries, MatchResult, ReferenceLibrary};
use crate::spectra_io::ResampledSpectrum;
use crate::trainer::Ensemble;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibrator {
    pub alpha: f64,
    /// Admission threshold; `-inf` admits every class.
    pub tau: f64,
    pub calibration_size: usize,
    /// True-class scores, ascending.
    pub calibration_scores: Vec<f64>,
}

/// 1-based rank of the calibration score used as `τ`.
pub fn quantile_index(alpha: f64, n: usize) -> usize {
    // the small offset keeps products such as 0.1 · 110 from landing a hair
    // below an integer
    let k = (alpha * (n as f64 + 1.0) + 1e-9).floor() as usize;
    k.clamp(1, n.max(1))
}

/// Smallest calibration size for which `τ` is not degenerate.
pub fn min_calibration_size(alpha: f64) -> usize {
    (1.0 / alpha - 1e-9).ceil() as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} outside (0, 1)")))
    }
}

impl ConformalCalibrator {
    /// Calibrate directly from true-class scores.
    pub fn from_scores(mut scores: Vec<f64>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("calibration scores must be finite".into()));
        }
        scores.sort_by(f64::total_cmp);
        let n = scores.len();
        let tau = if n < min_calibration_size(alpha) {
            log::warn!(
                "{n} calibration points are too few for alpha {alpha} (need {}); admitting every class",
                min_calibration_size(alpha)
            );
            f64::NEG_INFINITY
        } else {
            scores[quantile_index(alpha, n) - 1]
        };
        Ok(ConformalCalibrator {
            alpha,
            tau,
            calibration_size: n,
            calibration_scores: scores,
        })
    }

    /// Same scores, different miscoverage level.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::from_scores(self.calibration_scores.clone(), alpha)
    }

    pub fn summary(&self) -> CalibrationSummary {
        CalibrationSummary {
            alpha: self.alpha,
            tau: self.tau.is_finite().then_some(self.tau),
            n: self.calibration_size,
            check_coverage: None,
        }
    }
}

/// Calibrate from match results paired with their true classes.
pub fn calibrate(validation_results: &[(MatchResult, String)], alpha: f64) -> Result<ConformalCalibrator> {
    let scores = validation_results
        .iter()
        .map(|(r, truth)| r.score_of(truth).ok_or_else(|| Error::UnknownClass(truth.clone())))
        .collect::<Result<Vec<f64>>>()?;
    ConformalCalibrator::from_scores(scores, alpha)
}

/// Score `validation` against the library and calibrate. Augmented spectra
/// are not exchangeable with real test data, so they are refused.
pub fn calibrate_spectra(
    validation: &[ResampledSpectrum],
    lib: &ReferenceLibrary,
    ensemble: &Ensemble,
    alpha: f64,
) -> Result<ConformalCalibrator> {
    if validation.iter().any(ResampledSpectrum::is_augmented) {
        return Err(Error::AugmentedCalibration);
    }
    let results = score_queries(validation, lib, ensemble)?;
    let pairs: Vec<(MatchResult, String)> = results
        .into_iter()
        .zip(validation)
        .map(|(r, v)| (r, v.class_label().to_string()))
        .collect();
    calibrate(&pairs, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub query_id: String,
    /// Descending by score; the first entry is the top-1 class.
    pub classes: Vec<String>,
    pub scores: Vec<f64>,
    pub alpha: f64,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.classes.iter().any(|c| c == label)
    }
}

pub fn predict_set(result: &MatchResult, cal: &ConformalCalibrator) -> PredictionSet {
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    for (i, (label, score)) in result.ranked.iter().enumerate() {
        if i == 0 || *score >= cal.tau {
            classes.push(label.clone());
            scores.push(*score);
        }
    }
    PredictionSet {
        query_id: result.query_id.clone(),
        classes,
        scores,
        alpha: cal.alpha,
    }
}

/// Fraction of sets containing their truth.
pub fn empirical_coverage(sets: &[PredictionSet], truths: &[String]) -> Result<f64> {
    if sets.len() != truths.len() {
        return Err(Error::LengthMismatch(sets.len(), truths.len()));
    }
    if sets.is_empty() {
        return Err(Error::EmptyInput("coverage of zero prediction sets is undefined"));
    }
    let hits = sets.iter().zip(truths).filter(|(s, t)| s.contains(t)).count();
    Ok(hits as f64 / sets.len() as f64)
}

pub fn average_set_size(sets: &[PredictionSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::EmptyInput("average size of zero prediction sets is undefined"));
    }
    Ok(sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len() as f64)
}

/// Exported calibration record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub alpha: f64,
    /// `None` when every class is admitted.
    pub tau: Option<f64>,
    pub n: usize,
    /// Coverage on a held-back check split, when one was scored.
    pub check_coverage: Option<f64>,
}
