use std::collections::BTreeMap;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{conv_unet, swin_unet};
use crate::error::{invalid, Error, Result};
use crate::nn::{Tape, Tensor, Var};
use crate::rng::SeedTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkVariant {
    ConvUnet,
    WindowedAttentionUnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub variant: NetworkVariant,
    pub base_channels: usize,
    /// Number of 2x downsamplings.
    pub depth: usize,
    /// Attention window edge, in voxels (attention variant only).
    pub window: usize,
    pub heads: usize,
    /// Nominal training patch edge.
    pub patch_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: NetworkVariant::ConvUnet,
            base_channels: 8,
            depth: 2,
            window: 4,
            heads: 2,
            patch_size: 32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(invalid("base_channels must be positive"));
        }
        self.check_input(&[self.patch_size; 3])?;
        if self.variant == NetworkVariant::WindowedAttentionUnet {
            if self.heads == 0 || !self.base_channels.is_multiple_of(self.heads) {
                return Err(invalid("base_channels must be divisible by heads"));
            }
            if self.window == 0 {
                return Err(invalid("window must be positive"));
            }
        }
        Ok(())
    }

    /// Whether a patch of this spatial shape can be processed.
    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let f = 1usize << self.depth;
        for &n in dims {
            if n == 0 || n % f != 0 {
                return Err(invalid(format!("patch edge {n} not divisible by 2^depth = {f}")));
            }
            if self.variant == NetworkVariant::WindowedAttentionUnet {
                for s in 0..=self.depth {
                    let m = n >> s;
                    if self.window == 0 || m % self.window != 0 {
                        return Err(invalid(format!(
                            "stage {s} edge {m} not divisible by window {}",
                            self.window
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Named parameter tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Per-voxel class probabilities `[2, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    probs: Array4<f64>,
}

impl Prediction {
    pub fn new(probs: Array4<f64>) -> Result<Self> {
        if probs.shape()[0] != 2 {
            return Err(invalid("prediction must have 2 channels"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid("probabilities must be finite and non-negative"));
        }
        let sums = probs.sum_axis(Axis(0));
        if sums.iter().any(|s| (s - 1.0).abs() > 1e-5) {
            return Err(invalid("per-voxel probabilities must sum to 1"));
        }
        Ok(Self { probs })
    }

    /// From vessel probabilities; background is `1 - p`.
    pub fn from_vessel(vessel: &Array3<f64>) -> Result<Self> {
        let sh = vessel.shape();
        let probs = Array4::from_shape_fn((2, sh[0], sh[1], sh[2]), |(c, i, j, k)| {
            let p = vessel[[i, j, k]];
            if c == 1 {
                p
            } else {
                1.0 - p
            }
        });
        Self::new(probs)
    }

    pub fn probs(&self) -> &Array4<f64> {
        &self.probs
    }

    pub fn vessel(&self) -> ArrayView3<'_, f64> {
        self.probs.index_axis(Axis(0), 1)
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }
}

/// Channel softmax of `[2, ...]` logits, computed in f64.
pub fn logits_to_prediction(logits: &Tensor) -> Prediction {
    let [d, h, w] = logits.spatial();
    let n = d * h * w;
    let z = logits.data();
    let mut probs = Array4::<f64>::zeros((2, d, h, w));
    {
        let flat = probs.as_slice_mut().expect("standard layout");
        for i in 0..n {
            let (a, b) = (z[i] as f64, z[n + i] as f64);
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let s = ea + eb;
            flat[i] = ea / s;
            flat[n + i] = eb / s;
        }
    }
    Prediction { probs }
}

/// Pull `d loss / d probs` back through the softmax to the logits.
pub fn softmax_backward(pred: &Prediction, grad: &Array4<f64>) -> Tensor {
    let p = pred.probs.as_slice().expect("standard layout");
    let g = grad.as_standard_layout();
    let g = g.as_slice().expect("standard layout");
    let n = p.len() / 2;
    let mut out = vec![0f32; 2 * n];
    for i in 0..n {
        let dot = p[i] * g[i] + p[n + i] * g[n + i];
        out[i] = (p[i] * (g[i] - dot)) as f32;
        out[n + i] = (p[n + i] * (g[n + i] - dot)) as f32;
    }
    let [d, h, w] = pred.spatial();
    Tensor::from_vec(&[2, d, h, w], out).expect("shape")
}

/// A segmentation network: configuration plus named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationNetwork {
    config: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameter registry used while building a network.
pub(super) struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: crate::rng::Rng,
}

impl Builder {
    /// He-normal conv weight `[cout, cin, k, k, k]` plus zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = (cin * k * k * k) as f64;
        self.normal(&format!("{name}.weight"), &[cout, cin, k, k, k], (2.0 / fan_in).sqrt());
        self.constant(&format!("{name}.bias"), &[cout], 0.0);
    }

    /// Pointwise linear layer with fan-in scaled init.
    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        self.normal(&format!("{name}.weight"), &[cout, cin, 1, 1, 1], (1.0 / cin as f64).sqrt());
        self.constant(&format!("{name}.bias"), &[cout], 0.0);
    }

    pub fn norm(&mut self, name: &str, c: usize) {
        self.constant(&format!("{name}.gamma"), &[c], 1.0);
        self.constant(&format!("{name}.beta"), &[c], 0.0);
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("std > 0");
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.sample(dist) as f32).collect();
        self.push(name, Tensor::from_vec(shape, data).expect("shape"));
    }

    fn constant(&mut self, name: &str, shape: &[usize], v: f32) {
        let mut t = Tensor::zeros(shape);
        t.data_mut().fill(v);
        self.push(name, t);
    }

    fn push(&mut self, name: &str, t: Tensor) {
        debug_assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.params.push(t);
    }
}

/// Binds parameters onto a tape by name during a forward pass.
pub(super) struct Binder<'a> {
    net: &'a SegmentationNetwork,
}

impl Binder<'_> {
    pub fn get(&self, tape: &mut Tape, name: &str) -> Var {
        let i = self
            .net
            .names
            .binary_search(&name.to_string())
            .unwrap_or_else(|_| panic!("unknown parameter {name}"));
        tape.param(i, &self.net.params[i])
    }

    pub fn conv(&self, tape: &mut Tape, name: &str, x: Var) -> Var {
        let w = self.get(tape, &format!("{name}.weight"));
        let b = self.get(tape, &format!("{name}.bias"));
        tape.conv3d(x, w, b)
    }

    pub fn norm(&self, tape: &mut Tape, name: &str, x: Var) -> Var {
        let g = self.get(tape, &format!("{name}.gamma"));
        let b = self.get(tape, &format!("{name}.beta"));
        tape.layer_norm(x, g, b)
    }

    pub fn instance_norm(&self, tape: &mut Tape, name: &str, x: Var) -> Var {
        let g = self.get(tape, &format!("{name}.gamma"));
        let b = self.get(tape, &format!("{name}.beta"));
        tape.instance_norm(x, g, b)
    }
}

/// Build a network with deterministic initialization for `seed`.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<SegmentationNetwork> {
    config.validate()?;
    let mut b = Builder {
        names: Vec::new(),
        params: Vec::new(),
        rng: SeedTree::new(seed).rng("init"),
    };
    match config.variant {
        NetworkVariant::ConvUnet => conv_unet::register(&mut b, config),
        NetworkVariant::WindowedAttentionUnet => swin_unet::register(&mut b, config),
    }
    // Sort by name so lookups can binary search.
    let mut pairs: Vec<(String, Tensor)> = b.names.into_iter().zip(b.params).collect();
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    let (names, params) = pairs.into_iter().unzip();
    Ok(SegmentationNetwork {
        config: config.clone(),
        names,
        params,
    })
}

impl SegmentationNetwork {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Record the forward pass on `tape`; returns the `[2, D, H, W]` logits.
    pub fn logits_on(&self, tape: &mut Tape, x: Var) -> Var {
        let binder = Binder { net: self };
        match self.config.variant {
            NetworkVariant::ConvUnet => conv_unet::forward(&binder, tape, x, &self.config),
            NetworkVariant::WindowedAttentionUnet => swin_unet::forward(&binder, tape, x, &self.config),
        }
    }

    /// Wrap a `[D, H, W]` patch as a single-channel tape input after shape checks.
    pub fn input_on(&self, tape: &mut Tape, patch: &Array3<f32>) -> Result<Var> {
        self.config.check_input(patch.shape())?;
        let sh = patch.shape();
        let data = patch.as_standard_layout().iter().copied().collect();
        Ok(tape.input(Tensor::from_vec(&[1, sh[0], sh[1], sh[2]], data)?))
    }

    /// Inference forward pass.
    pub fn forward(&self, patch: &Array3<f32>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let x = self.input_on(&mut tape, patch)?;
        let logits = self.logits_on(&mut tape, x);
        Ok(logits_to_prediction(tape.value(logits)))
    }

    /// Deep copy of every parameter.
    pub fn snapshot_parameters(&self) -> ParamMap {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    pub fn load_parameters(&mut self, map: &ParamMap) -> Result<()> {
        if map.len() != self.names.len() {
            return Err(Error::ParameterMismatch(format!(
                "expected {} tensors, got {}",
                self.names.len(),
                map.len()
            )));
        }
        for (name, cur) in self.names.iter().zip(&self.params) {
            let t = map
                .get(name)
                .ok_or_else(|| Error::ParameterMismatch(format!("missing parameter {name}")))?;
            if t.shape() != cur.shape() {
                return Err(Error::ParameterMismatch(format!(
                    "{name}: shape {:?} != {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
        }
        for (name, cur) in self.names.iter().zip(self.params.iter_mut()) {
            *cur = map[name].clone();
        }
        Ok(())
    }

    /// Same names and shapes as `other`.
    pub fn is_congruent(&self, other: &SegmentationNetwork) -> bool {
        self.names == other.names && self.params.iter().zip(&other.params).all(|(a, b)| a.shape() == b.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cross_entropy_with_grad;
    use crate::volume::LabelMask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_patch(n: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((n, n, n), |_| rng.random::<f32>())
    }

    fn attn_config() -> NetworkConfig {
        NetworkConfig {
            variant: NetworkVariant::WindowedAttentionUnet,
            base_channels: 4,
            depth: 2,
            window: 4,
            heads: 2,
            patch_size: 16,
        }
    }

    #[test]
    fn deterministic_build() {
        let cfg = NetworkConfig { depth: 3, patch_size: 32, ..Default::default() };
        assert_eq!(build_network(&cfg, 7).unwrap(), build_network(&cfg, 7).unwrap());
        assert_ne!(build_network(&cfg, 7).unwrap(), build_network(&cfg, 8).unwrap());
    }

    #[test]
    fn attention_build_and_bad_geometry() {
        let cfg = NetworkConfig { patch_size: 32, ..attn_config() };
        assert!(build_network(&cfg, 1).is_ok());
        let bad = NetworkConfig { depth: 5, patch_size: 16, ..Default::default() };
        assert!(build_network(&bad, 1).is_err());
        let bad_window = NetworkConfig { window: 3, ..attn_config() };
        assert!(build_network(&bad_window, 1).is_err());
    }

    #[test]
    fn shape_contract_and_normalization() {
        for cfg in [NetworkConfig { base_channels: 4, ..Default::default() }, attn_config()] {
            let net = build_network(&cfg, 3).unwrap();
            for n in [16, 32] {
                let pred = net.forward(&random_patch(n, n as u64)).unwrap();
                assert_eq!(pred.spatial(), [n, n, n]);
                let sums = pred.probs().sum_axis(Axis(0));
                assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
            }
        }
        let net = build_network(&NetworkConfig { base_channels: 2, ..Default::default() }, 3).unwrap();
        assert_eq!(net.forward(&random_patch(64, 1)).unwrap().spatial(), [64; 3]);
        assert!(net.forward(&random_patch(6, 1)).is_err());
    }

    #[test]
    fn inference_is_deterministic() {
        for cfg in [NetworkConfig { base_channels: 4, patch_size: 16, ..Default::default() }, attn_config()] {
            let net = build_network(&cfg, 11).unwrap();
            let x = random_patch(16, 2);
            assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        }
    }

    #[test]
    fn zero_head_gives_one_half() {
        for cfg in [NetworkConfig { base_channels: 4, patch_size: 16, ..Default::default() }, attn_config()] {
            let mut net = build_network(&cfg, 5).unwrap();
            let mut map = net.snapshot_parameters();
            for (name, t) in map.iter_mut() {
                if name.starts_with("head.") {
                    t.data_mut().fill(0.0);
                }
            }
            net.load_parameters(&map).unwrap();
            let pred = net.forward(&random_patch(16, 9)).unwrap();
            assert!(pred.probs().iter().all(|&p| p == 0.5));
        }
    }

    #[test]
    fn snapshot_round_trip_and_deep_copy() {
        let cfg = NetworkConfig { base_channels: 4, patch_size: 16, ..Default::default() };
        let mut net = build_network(&cfg, 5).unwrap();
        let x = random_patch(16, 4);
        let before = net.forward(&x).unwrap();
        let snap = net.snapshot_parameters();
        net.params_mut()[0].data_mut()[0] += 1.0;
        assert_ne!(snap[&net.param_names()[0]], net.params()[0], "snapshot must not alias");
        net.load_parameters(&snap).unwrap();
        assert_eq!(net.forward(&x).unwrap(), before);

        let other = build_network(&NetworkConfig { base_channels: 8, ..cfg.clone() }, 5).unwrap();
        assert!(net.load_parameters(&other.snapshot_parameters()).is_err());
        let attn = build_network(&attn_config(), 5).unwrap();
        assert!(net.load_parameters(&attn.snapshot_parameters()).is_err());
    }

    #[test]
    fn gradients_flow_to_every_tensor() {
        for cfg in [NetworkConfig { base_channels: 4, patch_size: 16, ..Default::default() }, attn_config()] {
            let net = build_network(&cfg, 21).unwrap();
            let x = random_patch(16, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let target = LabelMask::new(Array3::from_shape_fn((16, 16, 16), |_| u8::from(rng.random::<f32>() < 0.3)), [1.0; 3]).unwrap();
            let mut tape = Tape::new();
            let xv = net.input_on(&mut tape, &x).unwrap();
            let logits = net.logits_on(&mut tape, xv);
            let pred = logits_to_prediction(tape.value(logits));
            let (_, g) = cross_entropy_with_grad(&pred, &target).unwrap();
            let grads = tape.backward(&[(logits, softmax_backward(&pred, &g))]);
            let pg = tape.param_grads(&grads, net.params().len());
            assert!(pg.iter().all(|g| g.as_ref().is_some_and(Tensor::all_finite)));
            assert!(pg.iter().flatten().any(|g| g.data().iter().any(|&v| v != 0.0)));
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let logits = Tensor::from_vec(&[2, 1, 1, 2], vec![0.3, -1.2, 0.9, 0.4]).unwrap();
        let weights = [0.7f64, -0.2, 1.3, 0.5];
        let f = |l: &Tensor| -> f64 {
            let p = logits_to_prediction(l);
            p.probs().iter().zip(weights).map(|(a, w)| a * w).sum()
        };
        let pred = logits_to_prediction(&logits);
        let g = Array4::from_shape_vec((2, 1, 1, 2), weights.to_vec()).unwrap();
        let an = softmax_backward(&pred, &g);
        for i in 0..4 {
            let mut p = logits.clone();
            p.data_mut()[i] += 1e-3;
            let mut m = logits.clone();
            m.data_mut()[i] -= 1e-3;
            let fd = (f(&p) - f(&m)) / 2e-3;
            assert!((fd - an.data()[i] as f64).abs() < 1e-4);
        }
    }

    /// Mirror every 3x3x3 kernel along `axis`; the network then commutes with
    /// flips along that axis.
    fn symmetrize(net: &mut SegmentationNetwork, axis: usize) {
        let mut map = net.snapshot_parameters();
        for t in map.values_mut() {
            let sh = t.shape().to_vec();
            if sh.len() != 5 || sh[2] != 3 {
                continue;
            }
            let orig = t.clone();
            let idx = |o: usize, i: usize, a: usize, b: usize, c: usize| (((o * sh[1] + i) * 3 + a) * 3 + b) * 3 + c;
            for o in 0..sh[0] {
                for i in 0..sh[1] {
                    for a in 0..3 {
                        for b in 0..3 {
                            for c in 0..3 {
                                let mut m = [a, b, c];
                                m[axis] = 2 - m[axis];
                                let v = 0.5 * (orig.data()[idx(o, i, a, b, c)] + orig.data()[idx(o, i, m[0], m[1], m[2])]);
                                t.data_mut()[idx(o, i, a, b, c)] = v;
                            }
                        }
                    }
                }
            }
        }
        net.load_parameters(&map).unwrap();
    }

    #[test]
    fn conv_variant_flip_equivariance() {
        let cfg = NetworkConfig { base_channels: 4, patch_size: 16, ..Default::default() };
        for axis in 0..3 {
            let mut net = build_network(&cfg, 13).unwrap();
            symmetrize(&mut net, axis);
            let x = random_patch(16, 8);
            let mut flipped = x.clone();
            flipped.invert_axis(Axis(axis));
            let a = net.forward(&flipped).unwrap();
            let mut b = net.forward(&x).unwrap().probs().clone();
            b.invert_axis(Axis(axis + 1));
            let diff = a.probs().iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-4, "axis {axis}: {diff}");
        }
    }
}
