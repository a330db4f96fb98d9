//! Siamese representation network and similarity head.
//!
//! The representation path is two conventional convolution blocks, a single
//! max pool, then two Xception blocks:
//!
//! ```text
//! conv block   (conv → BN → LeakyReLU) × 2
//! conv block   (conv → BN → LeakyReLU) × 2
//! max pool     window = stride = pool_window
//! xception     (LeakyReLU → separable conv → BN) × S, + shortcut, dropout
//! xception     (LeakyReLU → separable conv → BN) × S, + shortcut, dropout
//! ```
//!
//! The shortcut is the identity when channel counts agree and a 1×1
//! projection otherwise. Two feature maps are compared through their
//! elementwise product and absolute difference, joined along width and
//! reduced by a kernel-1 convolution, a linear layer and a sigmoid.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndcore::{Graph, Mode, NodeId, ParamKind, ParameterSet, RunningStats, Tensor, Tensor2, BN_EPS, BN_MOMENTUM};

/// Layer sizes of the twin network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub conv_block_channels: [usize; 2],
    pub conv_kernel: usize,
    pub pool_window: usize,
    pub xception_channels: [usize; 2],
    pub depthwise_kernel: usize,
    /// Separable convolutions inside each Xception block.
    pub separable_convs_per_block: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    pub input_length: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            conv_block_channels: [32, 64],
            conv_kernel: 9,
            pool_window: 4,
            xception_channels: [96, 128],
            depthwise_kernel: 9,
            separable_convs_per_block: 5,
            leaky_slope: 0.01,
            dropout_rate: 0.5,
            input_length: crate::spectra_io::DEFAULT_INPUT_LENGTH,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_kernel % 2 == 0 || self.depthwise_kernel % 2 == 0 {
            return bad(format!(
                "kernels must be odd (conv_kernel {}, depthwise_kernel {})",
                self.conv_kernel, self.depthwise_kernel
            ));
        }
        if self.conv_block_channels.contains(&0) || self.xception_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.pool_window < 2 || self.pool_window > self.input_length {
            return bad(format!("pool_window {} must be in [2, input_length]", self.pool_window));
        }
        if self.separable_convs_per_block == 0 {
            return bad("separable_convs_per_block must be at least 1".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.input_length < 2 {
            return bad("input_length must be at least 2".into());
        }
        Ok(())
    }

    /// Width of the feature maps after pooling.
    pub fn feature_width(&self) -> usize {
        self.input_length / self.pool_window
    }

    /// `(channels, width)` of one feature map.
    pub fn feature_shape(&self) -> (usize, usize) {
        (self.xception_channels[1], self.feature_width())
    }

    /// Canonical TOML text; the basis of [`ArchitectureConfig::hash`].
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("architecture config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_toml().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }

    /// Learnable scalars, counted from the layer sizes alone.
    pub fn param_count(&self) -> usize {
        let k = self.conv_kernel;
        let mut total = 0;
        let mut cin = 1;
        for &c in &self.conv_block_channels {
            total += c * cin * k + c + 2 * c;
            total += c * c * k + c + 2 * c;
            cin = c;
        }
        for &c in &self.xception_channels {
            for j in 0..self.separable_convs_per_block {
                let i = if j == 0 { cin } else { c };
                total += c * i + c * self.depthwise_kernel + 2 * c;
            }
            if cin != c {
                total += c * cin;
            }
            cin = c;
        }
        total + cin + 1 + 2 * self.feature_width() + 1
    }
}

/// Feature map of one spectrum: `channels × feature width`.
pub type FeatureMap = Tensor2;

/// Elementwise product and absolute difference of two feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMaps {
    pub d_prod: Tensor2,
    pub d_diff: Tensor2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore {
    pub p: f64,
    pub logit: f64,
}

/// Mutable state a training-mode pass needs.
pub enum Pass<'a> {
    Eval,
    Train {
        rng: &'a mut ChaCha8Rng,
        /// Running batch-norm statistics, updated in place.
        running: &'a mut BTreeMap<String, RunningStats>,
    },
}

impl Pass<'_> {
    fn mode(&self) -> Mode {
        match self {
            Pass::Eval => Mode::Eval,
            Pass::Train { .. } => Mode::Train,
        }
    }
}

fn conv_names(block: usize, j: usize) -> (String, String, String) {
    (
        format!("block{block}.conv{j}.weight"),
        format!("block{block}.conv{j}.bias"),
        format!("block{block}.bn{j}"),
    )
}

fn sep_names(block: usize, j: usize) -> (String, String, String) {
    (
        format!("xception{block}.sep{j}.pointwise"),
        format!("xception{block}.sep{j}.depthwise"),
        format!("xception{block}.bn{j}"),
    )
}

/// Fresh parameters: Kaiming fan-in normal weights scaled for the LeakyReLU
/// slope, zero biases, unit scale and zero shift for batch norm.
pub fn init_params(arch: &ArchitectureConfig, seed: u64) -> Result<ParameterSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = (2.0 / (1.0 + arch.leaky_slope * arch.leaky_slope)).sqrt();
    let mut set = ParameterSet::new(seed);

    let mut weight =
        |set: &mut ParameterSet, name: String, shape: Vec<usize>, fan_in: usize, gain: f64| -> Result<()> {
            let std = gain / (fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            set.insert(name, ParamKind::Weight, Tensor::new(shape, data)?)
        };
    fn norm(set: &mut ParameterSet, prefix: &str, c: usize) -> Result<()> {
        set.insert(format!("{prefix}.gamma"), ParamKind::Norm, Tensor::full(vec![c], 1.0))?;
        set.insert(format!("{prefix}.beta"), ParamKind::Norm, Tensor::zeros(vec![c]))?;
        set.insert_running(prefix, RunningStats::new(c));
        Ok(())
    }

    let k = arch.conv_kernel;
    let mut cin = 1;
    for (b, &c) in arch.conv_block_channels.iter().enumerate() {
        for j in 0..2 {
            let i = if j == 0 { cin } else { c };
            let (w, bias, bn) = conv_names(b, j);
            weight(&mut set, w, vec![c, i, k], i * k, gain)?;
            set.insert(bias, ParamKind::Bias, Tensor::zeros(vec![c]))?;
            norm(&mut set, &bn, c)?;
        }
        cin = c;
    }
    let dk = arch.depthwise_kernel;
    for (b, &c) in arch.xception_channels.iter().enumerate() {
        for j in 0..arch.separable_convs_per_block {
            let i = if j == 0 { cin } else { c };
            let (pw, dw, bn) = sep_names(b, j);
            weight(&mut set, pw, vec![c, i, 1], i, gain)?;
            weight(&mut set, dw, vec![c, 1, dk], dk, 1.0)?;
            norm(&mut set, &bn, c)?;
        }
        if cin != c {
            weight(
                &mut set,
                format!("xception{b}.shortcut.weight"),
                vec![c, cin, 1],
                cin,
                1.0,
            )?;
        }
        cin = c;
    }
    weight(&mut set, "head.conv.weight".into(), vec![1, cin, 1], cin, 1.0)?;
    set.insert("head.conv.bias", ParamKind::Bias, Tensor::zeros(vec![1]))?;
    let features = 2 * arch.feature_width();
    weight(&mut set, "head.linear.weight".into(), vec![1, features], features, 1.0)?;
    set.insert("head.linear.bias", ParamKind::Bias, Tensor::zeros(vec![1]))?;
    debug_assert_eq!(set.param_count(), arch.param_count());
    Ok(set)
}

fn batch_norm(g: &mut Graph, params: &ParameterSet, prefix: &str, x: NodeId, pass: &mut Pass) -> Result<NodeId> {
    let gamma = g.param(params, &format!("{prefix}.gamma"))?;
    let beta = g.param(params, &format!("{prefix}.beta"))?;
    let mode = pass.mode();
    let named = |e: Error| match e {
        Error::UninitializedRunningStats(_) => Error::UninitializedRunningStats(prefix.to_string()),
        other => other,
    };
    match pass {
        Pass::Eval => {
            let mut stats = params.running(prefix)?.clone();
            g.batch_norm(x, gamma, beta, &mut stats, mode, BN_MOMENTUM, BN_EPS)
                .map_err(named)
        }
        Pass::Train { running, .. } => {
            let stats = match running.get_mut(prefix) {
                Some(s) => s,
                None => return Err(Error::UnknownParameter(prefix.to_string())),
            };
            g.batch_norm(x, gamma, beta, stats, mode, BN_MOMENTUM, BN_EPS)
                .map_err(named)
        }
    }
}

/// Record the representation network on `g` for a `(batch, 1, L)` input.
pub fn represent_on(
    g: &mut Graph,
    params: &ParameterSet,
    arch: &ArchitectureConfig,
    x: NodeId,
    pass: &mut Pass,
) -> Result<NodeId> {
    let (_, c, w) = g.value(x).dims3()?;
    if c != 1 || w != arch.input_length {
        return Err(Error::shape(
            "represent",
            format!("expected inputs of shape (1, {}), got ({c}, {w})", arch.input_length),
        ));
    }
    let slope = arch.leaky_slope;
    let pad = (arch.conv_kernel - 1) / 2;
    let mut h = x;
    for b in 0..2 {
        for j in 0..2 {
            let (w, bias, bn) = conv_names(b, j);
            let w = g.param(params, &w)?;
            let bias = g.param(params, &bias)?;
            h = g.conv1d(h, w, Some(bias), 1, pad)?;
            h = batch_norm(g, params, &bn, h, pass)?;
            h = g.leaky_relu(h, slope);
        }
    }
    h = g.max_pool1d(h, arch.pool_window, arch.pool_window)?;
    for b in 0..2 {
        let input = h;
        for j in 0..arch.separable_convs_per_block {
            let (pw, dw, bn) = sep_names(b, j);
            h = g.leaky_relu(h, slope);
            let pw = g.param(params, &pw)?;
            let dw = g.param(params, &dw)?;
            h = g.separable_conv1d(h, pw, dw)?;
            h = batch_norm(g, params, &bn, h, pass)?;
        }
        let shortcut = match params.get(&format!("xception{b}.shortcut.weight")) {
            Ok(_) => {
                let w = g.param(params, &format!("xception{b}.shortcut.weight"))?;
                g.conv1d(input, w, None, 1, 0)?
            }
            Err(_) => input,
        };
        h = g.add(h, shortcut)?;
        h = match pass {
            Pass::Eval => g.dropout(h, arch.dropout_rate, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?,
            Pass::Train { rng, .. } => g.dropout(h, arch.dropout_rate, Mode::Train, &mut **rng)?,
        };
    }
    Ok(h)
}

/// Nodes produced by [`siamese_on`].
#[derive(Debug, Clone, Copy)]
pub struct SiameseNodes {
    pub f1: NodeId,
    pub f2: NodeId,
    pub d_prod: NodeId,
    pub d_diff: NodeId,
    pub logit: NodeId,
    pub p: NodeId,
}

/// Record `d_prod = f1·f2` and `d_diff = |f1 − f2|`.
pub fn distance_maps_on(g: &mut Graph, f1: NodeId, f2: NodeId) -> Result<(NodeId, NodeId)> {
    let prod = g.mul(f1, f2)?;
    let diff = g.sub(f1, f2)?;
    let diff = g.abs(diff);
    Ok((prod, diff))
}

/// Record the head; returns `(logit, p)` nodes of shape `(batch, 1, 1)`.
pub fn similarity_head_on(
    g: &mut Graph,
    params: &ParameterSet,
    d_prod: NodeId,
    d_diff: NodeId,
) -> Result<(NodeId, NodeId)> {
    let joined = g.concat_width(d_prod, d_diff)?;
    let w = g.param(params, "head.conv.weight")?;
    let b = g.param(params, "head.conv.bias")?;
    let reduced = g.conv1d(joined, w, Some(b), 1, 0)?;
    let lw = g.param(params, "head.linear.weight")?;
    let lb = g.param(params, "head.linear.bias")?;
    let logit = g.linear(reduced, lw, lb)?;
    let p = g.sigmoid(logit);
    Ok((logit, p))
}

/// Record the full twin network on two equally sized batches. Both branches
/// run through one representation pass over the stacked batch, so they share
/// weights and, in training mode, batch statistics.
pub fn siamese_on(
    g: &mut Graph,
    params: &ParameterSet,
    arch: &ArchitectureConfig,
    a: &Tensor,
    b: &Tensor,
    pass: &mut Pass,
) -> Result<SiameseNodes> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "siamese_forward",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let n = a.dims3()?.0;
    let xa = g.input(a.clone());
    let xb = g.input(b.clone());
    let x = g.concat_batch(xa, xb)?;
    let f = represent_on(g, params, arch, x, pass)?;
    let f1 = g.slice_batch(f, 0, n)?;
    let f2 = g.slice_batch(f, n, n)?;
    let (d_prod, d_diff) = distance_maps_on(g, f1, f2)?;
    let (logit, p) = similarity_head_on(g, params, d_prod, d_diff)?;
    Ok(SiameseNodes {
        f1,
        f2,
        d_prod,
        d_diff,
        logit,
        p,
    })
}

fn scores_from(g: &Graph, logit: NodeId, p: NodeId) -> Vec<SimilarityScore> {
    g.value(logit)
        .data()
        .iter()
        .zip(g.value(p).data())
        .map(|(&logit, &p)| SimilarityScore { p, logit })
        .collect()
}

/// Inference-mode feature maps for a `(batch, 1, L)` input, returned as a
/// `(batch, channels, feature width)` tensor.
pub fn represent(params: &ParameterSet, arch: &ArchitectureConfig, batch: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(batch.clone());
    let f = represent_on(&mut g, params, arch, x, &mut Pass::Eval)?;
    Ok(g.value(f).clone())
}

pub fn distance_maps(f1: &FeatureMap, f2: &FeatureMap) -> Result<DistanceMaps> {
    if f1.shape() != f2.shape() {
        return Err(Error::shape(
            "distance_maps",
            format!("{:?} vs {:?}", f1.shape(), f2.shape()),
        ));
    }
    let d_prod = f1.data.iter().zip(&f2.data).map(|(p, q)| p * q).collect();
    let d_diff = f1.data.iter().zip(&f2.data).map(|(p, q)| (p - q).abs()).collect();
    Ok(DistanceMaps {
        d_prod: Tensor2::new(f1.channels, f1.width, d_prod)?,
        d_diff: Tensor2::new(f1.channels, f1.width, d_diff)?,
    })
}

pub fn similarity_head(d: &DistanceMaps, params: &ParameterSet) -> Result<SimilarityScore> {
    let mut g = Graph::new();
    let prod = g.input(d.d_prod.to_batch());
    let diff = g.input(d.d_diff.to_batch());
    let (logit, p) = similarity_head_on(&mut g, params, prod, diff)?;
    Ok(scores_from(&g, logit, p)[0])
}

/// Inference-mode similarity of each pair `(a[i], b[i])`.
pub fn siamese_forward(
    params: &ParameterSet,
    arch: &ArchitectureConfig,
    a: &Tensor,
    b: &Tensor,
) -> Result<Vec<SimilarityScore>> {
    let mut g = Graph::new();
    let nodes = siamese_on(&mut g, params, arch, a, b, &mut Pass::Eval)?;
    Ok(scores_from(&g, nodes.logit, nodes.p))
}

/// Similarity of one query feature map against a batch of reference feature
/// maps, running only the head. Gives the same bits as [`siamese_forward`]
/// on the underlying spectra.
pub fn score_features(params: &ParameterSet, query: &FeatureMap, references: &Tensor) -> Result<Vec<SimilarityScore>> {
    let (n, c, w) = references.dims3()?;
    if (c, w) != query.shape() {
        return Err(Error::shape(
            "score_features",
            format!("query {:?} vs references ({c}, {w})", query.shape()),
        ));
    }
    let mut tiled = Vec::with_capacity(n * c * w);
    for _ in 0..n {
        tiled.extend_from_slice(&query.data);
    }
    let mut g = Graph::new();
    let q = g.input(Tensor::new(vec![n, c, w], tiled)?);
    let r = g.input(references.clone());
    let (prod, diff) = distance_maps_on(&mut g, q, r)?;
    let (logit, p) = similarity_head_on(&mut g, params, prod, diff)?;
    Ok(scores_from(&g, logit, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::OpKind;

    fn small() -> ArchitectureConfig {
        ArchitectureConfig {
            conv_block_channels: [3, 4],
            conv_kernel: 3,
            pool_window: 2,
            xception_channels: [5, 5],
            depthwise_kernel: 3,
            separable_convs_per_block: 2,
            leaky_slope: 0.1,
            dropout_rate: 0.5,
            input_length: 16,
        }
    }

    fn warm(params: &mut ParameterSet) {
        let names: Vec<String> = params.running_iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            params.running_mut(&n).unwrap().updates = 1;
        }
    }

    fn random_batch(n: usize, l: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(vec![n, 1, l], (0..n * l).map(|_| normal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn default_param_count_in_budget() {
        let arch = ArchitectureConfig::default();
        let n = arch.param_count();
        assert!((150_000..=350_000).contains(&n), "{n}");
        assert_eq!(init_params(&arch, 0).unwrap().param_count(), n);
    }

    #[test]
    fn config_toml_roundtrip() {
        let arch = small();
        let text = arch.canonical_toml();
        let back: ArchitectureConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, arch);
        assert!(toml::from_str::<ArchitectureConfig>("bogus = 1").is_err());
        assert_ne!(arch.hash(), ArchitectureConfig::default().hash());
    }

    #[test]
    fn zero_input_shape_and_single_pool() {
        let arch = small();
        let mut params = init_params(&arch, 1).unwrap();
        warm(&mut params);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2, 1, 16]));
        let f = represent_on(&mut g, &params, &arch, x, &mut Pass::Eval).unwrap();
        assert_eq!(g.value(f).shape(), &[2, 5, 8]);
        assert!(g.value(f).all_finite());
        assert_eq!(g.count_ops(OpKind::MaxPool), 1);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let arch = small();
        let mut params = init_params(&arch, 1).unwrap();
        warm(&mut params);
        assert!(represent(&params, &arch, &Tensor::zeros(vec![1, 1, 15])).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let arch = small();
        let mut params = init_params(&arch, 2).unwrap();
        warm(&mut params);
        let x = random_batch(3, 16, 9);
        let a = represent(&params, &arch, &x).unwrap();
        let b = represent(&params, &arch, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distance_map_arithmetic() {
        let f1 = Tensor2::new(1, 2, vec![2.0, -1.0]).unwrap();
        let f2 = Tensor2::new(1, 2, vec![3.0, 4.0]).unwrap();
        let d = distance_maps(&f1, &f2).unwrap();
        assert_eq!(d.d_prod.data, vec![6.0, -4.0]);
        assert_eq!(d.d_diff.data, vec![1.0, 5.0]);
        let same = distance_maps(&f1, &f1).unwrap();
        assert_eq!(same.d_diff.data, vec![0.0, 0.0]);
        assert_eq!(same.d_prod.data, vec![4.0, 1.0]);
    }

    #[test]
    fn zero_maps_give_bias_only_score() {
        let arch = small();
        let mut params = init_params(&arch, 3).unwrap();
        params.get_mut("head.conv.bias").unwrap().value.data_mut()[0] = 0.25;
        params.get_mut("head.linear.bias").unwrap().value.data_mut()[0] = -0.5;
        let (c, w) = arch.feature_shape();
        let zero = Tensor2::zeros(c, w);
        let d = distance_maps(&zero, &zero).unwrap();
        let s = similarity_head(&d, &params).unwrap();
        let lw: f64 = params.get("head.linear.weight").unwrap().value.data().iter().sum();
        let expected = -0.5 + 0.25 * lw;
        assert!((s.logit - expected).abs() < 1e-12);
        assert!((s.p - crate::ndcore::kernels::sigmoid(expected)).abs() < 1e-12);
    }

    #[test]
    fn swap_symmetry_and_head_consistency() {
        let arch = small();
        let mut params = init_params(&arch, 4).unwrap();
        warm(&mut params);
        let a = random_batch(4, 16, 10);
        let b = random_batch(4, 16, 11);
        let ab = siamese_forward(&params, &arch, &a, &b).unwrap();
        let ba = siamese_forward(&params, &arch, &b, &a).unwrap();
        assert_eq!(ab, ba);
        for s in &ab {
            assert!(s.p > 0.0 && s.p < 1.0);
        }
        let fa = represent(&params, &arch, &a).unwrap();
        let fb = represent(&params, &arch, &b).unwrap();
        for i in 0..4 {
            let q = fa.sample(i).unwrap();
            let r = Tensor::stack([&fb.sample(i).unwrap()]).unwrap();
            assert_eq!(score_features(&params, &q, &r).unwrap()[0], ab[i]);
        }
    }

    #[test]
    fn zeroed_xception_block_reduces_to_shortcut() {
        let arch = small();
        let mut params = init_params(&arch, 5).unwrap();
        warm(&mut params);
        for j in 0..arch.separable_convs_per_block {
            for part in ["pointwise", "depthwise"] {
                let p = params.get_mut(&format!("xception1.sep{j}.{part}")).unwrap();
                p.value.data_mut().fill(0.0);
            }
        }
        let x = random_batch(2, 16, 12);
        let mut g = Graph::new();
        let xn = g.input(x);
        let out = represent_on(&mut g, &params, &arch, xn, &mut Pass::Eval).unwrap();
        // block 1 has equal in/out channels, so its shortcut is the identity
        // and its output must equal its input (the output of block 0)
        let block0_out = g.nodes_of_kind(OpKind::Dropout)[0];
        assert_eq!(g.value(out), g.value(block0_out));
    }
}
