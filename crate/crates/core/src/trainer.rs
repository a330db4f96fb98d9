//! Pair sampling, the regularized cross-entropy objective, Adam with cosine
//! annealing, and ensembles of independently initialized members.
//!
//! Each member owns four random streams derived from its seed: weight
//! initialization, pair sampling, dropout masks and validation pairs. A
//! member's result therefore depends only on its seed and the data.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{simulate_validation_pairs, NoiseAugConfig, ShiftSimConfig};
use crate::error::{Error, Result};
use crate::ndcore::{Gradients, Graph, NodeId, ParamKind, ParameterSet, Tensor};
use crate::network::{self, ArchitectureConfig, Pass};
use crate::spectra_io::ResampledSpectrum;

const STREAM_SAMPLER: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_VALIDATION: u64 = 3;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Ratio of positive to negative pairs per batch.
    pub beta: f64,
    /// L2 weight on convolution and linear weights.
    pub lambda: f64,
    pub lr0: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub ensemble_size: usize,
    pub seed: u64,
    /// Steps between validation passes.
    pub validation_interval: usize,
    /// Pairs drawn for each validation pass.
    pub validation_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            lambda: 1e-3,
            lr0: 5e-5,
            total_steps: 20_000,
            batch_size: 64,
            ensemble_size: 5,
            seed: 0,
            validation_interval: 200,
            validation_pairs: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if self.total_steps == 0 || self.batch_size < 2 || self.ensemble_size == 0 {
            return bad("total_steps, ensemble_size must be ≥ 1 and batch_size ≥ 2".into());
        }
        if self.validation_interval == 0 {
            return bad("validation_interval must be ≥ 1".into());
        }
        Ok(())
    }

    /// Seed of ensemble member `i`.
    pub fn member_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ----------------------------------------------------------------------
// Pair sampling

/// Spectrum indices grouped by class label.
pub type ClassIndex = BTreeMap<String, Vec<usize>>;

pub fn class_index(spectra: &[ResampledSpectrum]) -> ClassIndex {
    let mut index = ClassIndex::new();
    for (i, s) in spectra.iter().enumerate() {
        index.entry(s.class_label().to_string()).or_default().push(i);
    }
    index
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    /// 1 for same class, 0 otherwise.
    pub labels: Vec<f64>,
    pub beta: f64,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1.0).count()
    }
}

/// Number of positive pairs in a batch of `n` at ratio `beta`.
pub fn positive_count(n: usize, beta: f64) -> usize {
    (n as f64 * beta / (1.0 + beta)).round() as usize
}

/// `round(n·β/(1+β))` positive pairs drawn uniformly over eligible classes and
/// then over distinct pairs; the rest are negatives from two distinct
/// uniformly chosen classes.
pub fn sample_pair_batch<R: Rng + ?Sized>(index: &ClassIndex, beta: f64, n: usize, rng: &mut R) -> Result<PairBatch> {
    let eligible: Vec<&Vec<usize>> = index.values().filter(|v| v.len() >= 2).collect();
    let classes: Vec<&Vec<usize>> = index.values().filter(|v| !v.is_empty()).collect();
    let n_pos = positive_count(n, beta);
    if n_pos > 0 && eligible.is_empty() {
        return Err(Error::Config(
            "positive pairs need a class with at least two spectra".into(),
        ));
    }
    if n_pos < n && classes.len() < 2 {
        return Err(Error::Config("negative pairs need at least two classes".into()));
    }
    let mut pairs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_pos {
        let members = eligible[rng.random_range(0..eligible.len())];
        let i = rng.random_range(0..members.len());
        let mut j = rng.random_range(0..members.len() - 1);
        if j >= i {
            j += 1;
        }
        pairs.push((members[i], members[j]));
        labels.push(1.0);
    }
    for _ in n_pos..n {
        let a = rng.random_range(0..classes.len());
        let mut b = rng.random_range(0..classes.len() - 1);
        if b >= a {
            b += 1;
        }
        let (ca, cb) = (classes[a], classes[b]);
        pairs.push((ca[rng.random_range(0..ca.len())], cb[rng.random_range(0..cb.len())]));
        labels.push(0.0);
    }
    Ok(PairBatch { pairs, labels, beta })
}

/// Exact numbers of unordered positive and negative pairs for the given
/// class sizes.
pub fn count_possible_pairs(class_sizes: &[usize]) -> (usize, usize) {
    let total: usize = class_sizes.iter().sum();
    let pos: usize = class_sizes.iter().map(|&m| m * m.saturating_sub(1) / 2).sum();
    let all = total * total.saturating_sub(1) / 2;
    (pos, all - pos)
}

/// Approximate positive/negative ratio `(M−1)/(M(N−1))` for `N` classes of
/// `M` spectra each.
pub fn approx_pair_ratio(n_classes: usize, per_class: usize) -> f64 {
    (per_class as f64 - 1.0) / (per_class as f64 * (n_classes as f64 - 1.0))
}

// ----------------------------------------------------------------------
// Objective and optimizer

/// `λ·Σθ²` over weight entries, recorded on `g`; `None` when there are none.
fn regularizer_on(g: &mut Graph, params: &ParameterSet, lambda: f64) -> Result<Option<NodeId>> {
    let mut total: Option<NodeId> = None;
    for (name, p) in params.iter() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let id = g.param(params, name)?;
        let sq = g.sum_squares(id);
        total = Some(match total {
            None => sq,
            Some(t) => g.add(t, sq)?,
        });
    }
    Ok(total.map(|t| g.scale(t, lambda)))
}

/// Mean binary cross-entropy of `p` plus `λ·Σθ²`.
pub fn loss_on(g: &mut Graph, p: NodeId, labels: &[f64], params: &ParameterSet, lambda: f64) -> Result<NodeId> {
    let data = g.bce_mean(p, labels)?;
    match regularizer_on(g, params, lambda)? {
        Some(r) if lambda > 0.0 => g.add(data, r),
        _ => Ok(data),
    }
}

/// Value of the objective for already computed probabilities.
pub fn loss_value(p: &[f64], labels: &[f64], params: &ParameterSet, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let pn = g.input(Tensor::new(vec![p.len()], p.to_vec())?);
    let l = loss_on(&mut g, pn, labels, params, lambda)?;
    Ok(g.value(l).data()[0])
}

/// `lr0·(1 + cos(π·t/T))/2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = |_: ()| -> BTreeMap<String, Vec<f64>> {
            params
                .iter()
                .map(|(n, p)| (n.to_string(), vec![0.0; p.value.len()]))
                .collect()
        };
        AdamState {
            m: zeros(()),
            v: zeros(()),
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) if m.len() == p.value.len() && g.len() == m.len() => (m, v),
            _ => {
                return Err(Error::shape(
                    "adam_step",
                    format!("optimizer state does not match `{name}`"),
                ))
            }
        };
        for (((theta, gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *theta -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Training

/// Where validation pairs come from.
#[derive(Debug, Clone)]
pub enum Validation {
    /// No validation; the final parameters are kept.
    None,
    /// Fresh shift-simulated pairs at every validation pass.
    Shift {
        spectra: Vec<ResampledSpectrum>,
        grid_step: f64,
        shift: ShiftSimConfig,
        noise: NoiseAugConfig,
    },
    /// A fixed set of labelled pairs.
    Fixed {
        first: Vec<ResampledSpectrum>,
        second: Vec<ResampledSpectrum>,
        labels: Vec<f64>,
    },
}

/// Pairs each held-out spectrum with one same-class and one other-class
/// spectrum from `reference`.
pub fn holdout_pairs<R: Rng + ?Sized>(
    held_out: &[ResampledSpectrum],
    reference: &[ResampledSpectrum],
    rng: &mut R,
) -> Result<Validation> {
    let index = class_index(reference);
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut labels = Vec::new();
    for s in held_out {
        if let Some(same) = index.get(s.class_label()) {
            first.push(s.clone());
            second.push(reference[same[rng.random_range(0..same.len())]].clone());
            labels.push(1.0);
        }
        let others: Vec<&Vec<usize>> = index
            .iter()
            .filter(|(k, _)| k.as_str() != s.class_label())
            .map(|(_, v)| v)
            .collect();
        if !others.is_empty() {
            let c = others[rng.random_range(0..others.len())];
            first.push(s.clone());
            second.push(reference[c[rng.random_range(0..c.len())]].clone());
            labels.push(0.0);
        }
    }
    if labels.is_empty() {
        return Ok(Validation::None);
    }
    Ok(Validation::Fixed { first, second, labels })
}

#[derive(Debug, Clone)]
pub struct TrainingData {
    pub spectra: Vec<ResampledSpectrum>,
    pub validation: Validation,
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedMember {
    pub params: ParameterSet,
    pub log: Vec<TrainLogRecord>,
    /// Step whose parameters were kept (best validation accuracy).
    pub best_step: usize,
}

fn stack(spectra: &[&ResampledSpectrum]) -> Result<Tensor> {
    Tensor::from_rows(spectra.iter().map(|s| s.intensities()))
}

/// Fraction of pairs whose thresholded score (p ≥ 0.5) matches the label.
pub fn pair_accuracy(
    params: &ParameterSet,
    arch: &ArchitectureConfig,
    first: &[ResampledSpectrum],
    second: &[ResampledSpectrum],
    labels: &[f64],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("no pairs to score"));
    }
    let a = stack(&first.iter().collect::<Vec<_>>())?;
    let b = stack(&second.iter().collect::<Vec<_>>())?;
    let scores = network::siamese_forward(params, arch, &a, &b)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &y)| (s.p >= 0.5) == (y == 1.0))
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn validate_once(
    params: &ParameterSet,
    arch: &ArchitectureConfig,
    validation: &Validation,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    match validation {
        Validation::None => Ok(None),
        Validation::Shift {
            spectra,
            grid_step,
            shift,
            noise,
        } => {
            let pairs = simulate_validation_pairs(spectra, *grid_step, shift, noise, count, rng)?;
            pair_accuracy(params, arch, &pairs.first, &pairs.second, &pairs.labels).map(Some)
        }
        Validation::Fixed { first, second, labels } => pair_accuracy(params, arch, first, second, labels).map(Some),
    }
}

/// Training-mode loss of one pair batch and its gradient for every
/// parameter. Dropout masks come from `dropout_seed`, so repeated calls with
/// perturbed parameters see the same masks; running statistics in `params`
/// are left untouched.
pub fn pair_loss_and_gradients(
    params: &ParameterSet,
    arch: &ArchitectureConfig,
    a: &Tensor,
    b: &Tensor,
    labels: &[f64],
    lambda: f64,
    dropout_seed: u64,
) -> Result<(f64, Gradients)> {
    let mut rng = stream(dropout_seed, STREAM_DROPOUT);
    let mut running: BTreeMap<String, _> = params.running_iter().map(|(n, r)| (n.to_string(), r.clone())).collect();
    let mut g = Graph::new();
    let nodes = network::siamese_on(
        &mut g,
        params,
        arch,
        a,
        b,
        &mut Pass::Train {
            rng: &mut rng,
            running: &mut running,
        },
    )?;
    let loss = loss_on(&mut g, nodes.p, labels, params, lambda)?;
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    Ok((value, g.gradients(params)))
}

/// Train one member from `seed`.
pub fn train_member(
    data: &TrainingData,
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedMember> {
    cfg.validate()?;
    arch.validate()?;
    if let Some(s) = data.spectra.iter().find(|s| s.len() != arch.input_length) {
        return Err(Error::shape(
            "train_member",
            format!(
                "spectrum `{}` has length {}, expected {}",
                s.source_id(),
                s.len(),
                arch.input_length
            ),
        ));
    }
    let index = class_index(&data.spectra);
    let mut params = network::init_params(arch, seed)?;
    let mut adam = AdamState::new(&params);
    let mut sampler = stream(seed, STREAM_SAMPLER);
    let mut dropout = stream(seed, STREAM_DROPOUT);
    let mut val_rng = stream(seed, STREAM_VALIDATION);
    let mut running: BTreeMap<String, _> = params.running_iter().map(|(n, r)| (n.to_string(), r.clone())).collect();

    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    for step in 0..cfg.total_steps {
        let lr = cosine_lr(step, cfg.total_steps, cfg.lr0);
        let batch = sample_pair_batch(&index, cfg.beta, cfg.batch_size, &mut sampler)?;
        let a = stack(&batch.pairs.iter().map(|&(i, _)| &data.spectra[i]).collect::<Vec<_>>())?;
        let b = stack(&batch.pairs.iter().map(|&(_, j)| &data.spectra[j]).collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let nodes = network::siamese_on(
            &mut g,
            &params,
            arch,
            &a,
            &b,
            &mut Pass::Train {
                rng: &mut dropout,
                running: &mut running,
            },
        )?;
        let loss = loss_on(&mut g, nodes.p, &batch.labels, &params, cfg.lambda)?;
        let loss_v = g.value(loss).data()[0];
        if !loss_v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                lr,
                positives: batch.positives(),
                negatives: batch.len() - batch.positives(),
            });
        }
        g.backward(loss)?;
        let grads = g.gradients(&params);
        drop(g);
        adam_step(&mut params, &grads, &mut adam, lr)?;
        for (name, stats) in &running {
            *params.running_mut(name)? = stats.clone();
        }

        let done = step + 1;
        let val_accuracy = if done % cfg.validation_interval == 0 || done == cfg.total_steps {
            validate_once(&params, arch, &data.validation, cfg.validation_pairs, &mut val_rng)?
        } else {
            None
        };
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc >= *b) {
                best = Some((acc, done, params.clone()));
            }
        }
        log.push(TrainLogRecord {
            step: done,
            lr,
            loss: loss_v,
            val_accuracy,
        });
    }
    let (params, best_step) = match best {
        Some((_, s, p)) => (p, s),
        None => (params, cfg.total_steps),
    };
    Ok(TrainedMember { params, log, best_step })
}

/// Independently initialized members sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub arch: ArchitectureConfig,
    pub members: Vec<ParameterSet>,
    pub member_seeds: Vec<u64>,
}

impl Ensemble {
    pub fn new(arch: ArchitectureConfig, members: Vec<ParameterSet>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyInput("an ensemble needs at least one member"));
        }
        let member_seeds: Vec<u64> = members.iter().map(|m| m.seed).collect();
        let mut sorted = member_seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != member_seeds.len() {
            return Err(Error::Config("ensemble member seeds must be distinct".into()));
        }
        Ok(Ensemble {
            arch,
            members,
            member_seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Hash of the architecture and every member's parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.arch.hash());
        for m in &self.members {
            h.update(m.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Member-averaged similarity of each pair `(a[i], b[i])`.
    pub fn predict_pairs(&self, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
        let per_member: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| {
                Ok(network::siamese_forward(m, &self.arch, a, b)?
                    .iter()
                    .map(|s| s.p)
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(average(&per_member))
    }
}

/// Elementwise mean of equally long score lists.
pub fn average(per_member: &[Vec<f64>]) -> Vec<f64> {
    let n = per_member.first().map_or(0, Vec::len);
    let k = per_member.len() as f64;
    (0..n)
        .map(|i| per_member.iter().map(|m| m[i]).sum::<f64>() / k)
        .collect()
}

/// Train `cfg.ensemble_size` members concurrently, one per seed.
pub fn train_ensemble(
    data: &TrainingData,
    arch: &ArchitectureConfig,
    cfg: &TrainConfig,
) -> Result<(Ensemble, Vec<TrainedMember>)> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.ensemble_size).map(|i| cfg.member_seed(i)).collect();
    let trained: Vec<TrainedMember> = seeds
        .par_iter()
        .map(|&seed| {
            train_member(data, arch, cfg, seed).map_err(|e| Error::Member {
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let ensemble = Ensemble::new(arch.clone(), trained.iter().map(|t| t.params.clone()).collect())?;
    Ok((ensemble, trained))
}
