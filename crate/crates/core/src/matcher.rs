//! Reference-library search with the Siamese ensemble, top-M voting over
//! repeated scans, and one-nearest-neighbour baselines.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::network::{self, FeatureMap};
use crate::spectra_io::ResampledSpectrum;
use crate::trainer::Ensemble;

/// Scores closer than this are treated as tied and ordered by label.
pub const TIE_TOLERANCE: f64 = 1e-15;

/// Candidate vote counts swept when choosing `M` on validation data.
pub const VOTING_CANDIDATES: [usize; 5] = [1, 3, 5, 7, 9];

const FEATURE_CHUNK: usize = 64;

/// Labelled reference spectra plus their feature maps under each ensemble
/// member.
#[derive(Debug, Clone)]
pub struct ReferenceLibrary {
    entries: Vec<ResampledSpectrum>,
    /// One `(entries, channels, width)` tensor per member.
    features: Vec<Tensor>,
    /// Fingerprint of the ensemble the features were computed with.
    fingerprint: Option<String>,
}

fn features_of(ensemble: &Ensemble, spectra: &[ResampledSpectrum]) -> Result<Vec<Tensor>> {
    ensemble
        .members
        .par_iter()
        .map(|m| {
            let mut data = Vec::new();
            let mut shape = None;
            for chunk in spectra.chunks(FEATURE_CHUNK) {
                let x = Tensor::from_rows(chunk.iter().map(|s| s.intensities()))?;
                let f = network::represent(m, &ensemble.arch, &x)?;
                let (_, c, w) = f.dims3()?;
                shape = Some((c, w));
                data.extend_from_slice(f.data());
            }
            let (c, w) = shape.unwrap_or(ensemble.arch.feature_shape());
            Tensor::new(vec![spectra.len(), c, w], data)
        })
        .collect()
}

impl ReferenceLibrary {
    /// A library without cached features; usable for the 1NN baselines.
    pub fn from_spectra(entries: Vec<ResampledSpectrum>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("a reference library needs at least one spectrum"));
        }
        Ok(ReferenceLibrary {
            entries,
            features: Vec::new(),
            fingerprint: None,
        })
    }

    pub fn build(entries: Vec<ResampledSpectrum>, ensemble: &Ensemble) -> Result<Self> {
        let mut lib = Self::from_spectra(entries)?;
        lib.refresh(ensemble)?;
        Ok(lib)
    }

    /// Recompute cached features for `ensemble`.
    pub fn refresh(&mut self, ensemble: &Ensemble) -> Result<()> {
        self.features = features_of(ensemble, &self.entries)?;
        self.fingerprint = Some(ensemble.fingerprint());
        Ok(())
    }

    pub fn is_current(&self, ensemble: &Ensemble) -> bool {
        self.fingerprint.as_deref() == Some(ensemble.fingerprint().as_str())
    }

    pub fn entries(&self) -> &[ResampledSpectrum] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct class labels in sorted order.
    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.entries.iter().map(|e| e.class_label().to_string()).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn contains_class(&self, label: &str) -> bool {
        self.entries.iter().any(|e| e.class_label() == label)
    }

    fn check(&self, ensemble: &Ensemble) -> Result<()> {
        if self.is_current(ensemble) {
            return Ok(());
        }
        Err(Error::StaleLibrary {
            library: self.fingerprint.clone().unwrap_or_else(|| "no ensemble".into()),
            ensemble: ensemble.fingerprint(),
        })
    }
}

/// Scores of one query against a library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub query_id: String,
    /// One entry per class, best first.
    pub ranked: Vec<(String, f64)>,
    /// Ensemble-averaged score against each library entry, in library order.
    pub per_reference: Vec<f64>,
    pub predicted: String,
}

impl MatchResult {
    /// Group per-reference scores by class (maximum) and rank them.
    pub fn from_scores(query_id: impl Into<String>, labels: &[&str], scores: Vec<f64>) -> Result<Self> {
        if labels.is_empty() || labels.len() != scores.len() {
            return Err(Error::EmptyInput("a match needs one score per reference"));
        }
        let mut best: BTreeMap<&str, f64> = BTreeMap::new();
        for (&label, &s) in labels.iter().zip(&scores) {
            let e = best.entry(label).or_insert(f64::NEG_INFINITY);
            if s > *e {
                *e = s;
            }
        }
        let ranked = rank(best.into_iter().map(|(k, v)| (k.to_string(), v)).collect());
        let predicted = ranked[0].0.clone();
        Ok(MatchResult {
            query_id: query_id.into(),
            ranked,
            per_reference: scores,
            predicted,
        })
    }

    pub fn score_of(&self, label: &str) -> Option<f64> {
        self.ranked.iter().find(|(c, _)| c == label).map(|(_, s)| *s)
    }

    /// 1-based rank of `label`, if present.
    pub fn rank_of(&self, label: &str) -> Option<usize> {
        self.ranked.iter().position(|(c, _)| c == label).map(|i| i + 1)
    }
}

/// Sort by score descending; scores within [`TIE_TOLERANCE`] are ordered by
/// label.
pub fn rank(mut scores: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    // near-ties are not transitive, so settle them with adjacent swaps
    let mut changed = true;
    while changed {
        changed = false;
        for i in 1..scores.len() {
            if (scores[i - 1].1 - scores[i].1).abs() <= TIE_TOLERANCE && scores[i].0 < scores[i - 1].0 {
                scores.swap(i - 1, i);
                changed = true;
            }
        }
    }
    scores
}

/// Query feature maps under each member, one tensor per member.
fn query_features(ensemble: &Ensemble, queries: &[ResampledSpectrum]) -> Result<Vec<Tensor>> {
    features_of(ensemble, queries)
}

fn score_with_features(
    lib: &ReferenceLibrary,
    query_id: &str,
    per_member_query: &[FeatureMap],
    ensemble: &Ensemble,
) -> Result<MatchResult> {
    let per_member: Vec<Vec<f64>> = per_member_query
        .par_iter()
        .zip(lib.features.par_iter())
        .zip(ensemble.members.par_iter())
        .map(|((q, refs), params)| Ok(network::score_features(params, q, refs)?.iter().map(|s| s.p).collect()))
        .collect::<Result<_>>()?;
    let scores = crate::trainer::average(&per_member);
    let labels: Vec<&str> = lib.entries.iter().map(|e| e.class_label()).collect();
    MatchResult::from_scores(query_id, &labels, scores)
}

/// Score one query against every library entry with the ensemble.
pub fn score_against_library(
    query: &ResampledSpectrum,
    lib: &ReferenceLibrary,
    ensemble: &Ensemble,
) -> Result<MatchResult> {
    score_queries(std::slice::from_ref(query), lib, ensemble).map(|mut v| v.remove(0))
}

/// [`score_against_library`] for many queries, sharing feature extraction.
pub fn score_queries(
    queries: &[ResampledSpectrum],
    lib: &ReferenceLibrary,
    ensemble: &Ensemble,
) -> Result<Vec<MatchResult>> {
    lib.check(ensemble)?;
    let feats = query_features(ensemble, queries)?;
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let per_member: Vec<FeatureMap> = feats.iter().map(|f| f.sample(i)).collect::<Result<_>>()?;
            score_with_features(lib, q.source_id(), &per_member, ensemble)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VotingConfig {
    /// Candidates per scan that receive a vote; 1 is plain argmax.
    pub m: usize,
}

impl Default for VotingConfig {
    fn default() -> Self {
        VotingConfig { m: 1 }
    }
}

/// Predicted class. With `M = 1`, or without repeated scans, this is the
/// top-ranked class of `result`. Otherwise every scan votes once for each
/// of its top-M classes; the most votes wins, then the largest score summed
/// over scans, then the smaller label.
pub fn classify(result: &MatchResult, voting: VotingConfig, per_scan: Option<&[MatchResult]>) -> String {
    let scans = match per_scan {
        Some(s) if voting.m > 1 && !s.is_empty() => s,
        _ => return result.ranked[0].0.clone(),
    };
    vote(scans, voting.m)
}

fn vote(scans: &[MatchResult], m: usize) -> String {
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for scan in scans {
        for (label, _) in scan.ranked.iter().take(m.max(1)) {
            tally.entry(label).or_insert((0, 0.0)).0 += 1;
        }
    }
    for (label, entry) in tally.iter_mut() {
        entry.1 = scans.iter().filter_map(|s| s.score_of(label)).sum();
    }
    // BTreeMap iteration is label-ascending, so keeping the first maximum
    // resolves the final tie by label
    let mut best: Option<(&str, usize, f64)> = None;
    for (label, (votes, sum)) in tally {
        let better = match best {
            None => true,
            Some((_, v, s)) => votes > v || (votes == v && sum > s),
        };
        if better {
            best = Some((label, votes, sum));
        }
    }
    best.map(|(l, _, _)| l.to_string()).unwrap_or_default()
}

/// Pick `M` from [`VOTING_CANDIDATES`] (clamped to the class count) by
/// voting accuracy over specimens, each given as its scans and true label.
/// Ties go to the smaller `M`.
pub fn select_voting_m(specimens: &[(Vec<MatchResult>, String)], n_classes: usize) -> VotingConfig {
    let mut best = (VotingConfig::default(), -1.0);
    for &m in &VOTING_CANDIDATES {
        if m > n_classes.max(1) {
            break;
        }
        let voting = VotingConfig { m };
        let correct = specimens
            .iter()
            .filter(|(scans, truth)| !scans.is_empty() && classify(&scans[0], voting, Some(scans)) == *truth)
            .count();
        let acc = correct as f64 / specimens.len().max(1) as f64;
        if acc > best.1 {
            best = (voting, acc);
        }
    }
    best.0
}

// ----------------------------------------------------------------------
// Baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Manhattan,
    Cosine,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Euclidean, Metric::Manhattan, Metric::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
            Metric::Cosine => "cosine",
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Index of the nearest reference; the first one wins exact ties.
pub fn nearest_neighbor(query: &[f64], references: &[ResampledSpectrum], metric: Metric) -> Result<usize> {
    if references.is_empty() {
        return Err(Error::EmptyInput("nearest neighbour needs at least one reference"));
    }
    let qn = norm(query);
    if metric == Metric::Cosine && qn == 0.0 {
        return Err(Error::ZeroNormQuery);
    }
    let mut best = (0, f64::INFINITY);
    for (i, r) in references.iter().enumerate() {
        let r = r.intensities();
        if r.len() != query.len() {
            return Err(Error::shape(
                "nearest_neighbor",
                format!("query length {} vs reference {}", query.len(), r.len()),
            ));
        }
        // smaller is nearer for every metric
        let d = match metric {
            Metric::Euclidean => query.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            Metric::Manhattan => query.iter().zip(r).map(|(a, b)| (a - b).abs()).sum(),
            Metric::Cosine => {
                let rn = norm(r);
                let sim = if rn == 0.0 {
                    0.0
                } else {
                    query.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (qn * rn)
                };
                -sim
            }
        };
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

pub fn nn_baseline(query: &ResampledSpectrum, lib: &ReferenceLibrary, metric: Metric) -> Result<String> {
    let i = nearest_neighbor(query.intensities(), &lib.entries, metric)?;
    Ok(lib.entries[i].class_label().to_string())
}

// ----------------------------------------------------------------------
// Accuracy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub truth: String,
    pub predicted: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n: usize,
    pub accuracy: f64,
    /// Top-k accuracy for k in {1, 3, 5}.
    pub top_k: BTreeMap<usize, f64>,
    pub per_class: BTreeMap<String, ClassAccuracy>,
    /// Only off-diagonal (wrong) predictions.
    pub confusion: Vec<ConfusionEntry>,
}

pub const TOP_K: [usize; 3] = [1, 3, 5];

/// Accuracy summary from predictions and, when available, rankings.
pub fn summarize(truths: &[&str], predicted: &[String], rankings: Option<&[MatchResult]>) -> Result<AccuracyReport> {
    if truths.is_empty() {
        return Err(Error::EmptyInput("accuracy is undefined for an empty test set"));
    }
    let n = truths.len();
    let mut per_class: BTreeMap<String, ClassAccuracy> = BTreeMap::new();
    let mut confusion: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut correct = 0;
    for (t, p) in truths.iter().zip(predicted) {
        let e = per_class.entry(t.to_string()).or_insert(ClassAccuracy {
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        e.total += 1;
        if *t == p {
            e.correct += 1;
            correct += 1;
        } else {
            *confusion.entry((t.to_string(), p.clone())).or_default() += 1;
        }
    }
    for e in per_class.values_mut() {
        e.accuracy = e.correct as f64 / e.total as f64;
    }
    let mut top_k = BTreeMap::new();
    if let Some(results) = rankings {
        for k in TOP_K {
            let hits = results
                .iter()
                .zip(truths)
                .filter(|(r, t)| r.rank_of(t).is_some_and(|rank| rank <= k))
                .count();
            top_k.insert(k, hits as f64 / n as f64);
        }
    }
    Ok(AccuracyReport {
        n,
        accuracy: correct as f64 / n as f64,
        top_k,
        per_class,
        confusion: confusion
            .into_iter()
            .map(|((truth, predicted), count)| ConfusionEntry {
                truth,
                predicted,
                count,
            })
            .collect(),
    })
}

fn check_classes(test: &[ResampledSpectrum], lib: &ReferenceLibrary) -> Result<()> {
    if test.is_empty() {
        return Err(Error::EmptyInput("accuracy is undefined for an empty test set"));
    }
    match test.iter().find(|t| !lib.contains_class(t.class_label())) {
        Some(t) => Err(Error::UnknownClass(t.class_label().to_string())),
        None => Ok(()),
    }
}

/// Siamese accuracy of `test` against `lib`, plus the per-query results.
pub fn evaluate_accuracy(
    test: &[ResampledSpectrum],
    lib: &ReferenceLibrary,
    ensemble: &Ensemble,
    voting: VotingConfig,
) -> Result<(AccuracyReport, Vec<MatchResult>)> {
    check_classes(test, lib)?;
    let results = score_queries(test, lib, ensemble)?;
    let predicted: Vec<String> = results.iter().map(|r| classify(r, voting, None)).collect();
    let truths: Vec<&str> = test.iter().map(|t| t.class_label()).collect();
    Ok((summarize(&truths, &predicted, Some(&results))?, results))
}

pub fn baseline_accuracy(test: &[ResampledSpectrum], lib: &ReferenceLibrary, metric: Metric) -> Result<AccuracyReport> {
    check_classes(test, lib)?;
    let predicted: Vec<String> = test
        .iter()
        .map(|q| nn_baseline(q, lib, metric))
        .collect::<Result<_>>()?;
    let truths: Vec<&str> = test.iter().map(|t| t.class_label()).collect();
    summarize(&truths, &predicted, None)
}

/// One line of a match report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub query_id: String,
    pub predicted: String,
    pub top: Vec<(String, f64)>,
}

impl From<&MatchResult> for MatchRecord {
    fn from(r: &MatchResult) -> Self {
        MatchRecord {
            query_id: r.query_id.clone(),
            predicted: r.predicted.clone(),
            top: r.ranked.iter().take(5).cloned().collect(),
        }
    }
}
