//! Small differentiable classifiers used for both teacher and student roles.
//!
//! `Linear` is a single affine map from features to logits. `OneHidden`
//! applies an affine map, elementwise `tanh`, then a second affine map.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Linear,
    OneHidden { hidden_width: usize },
}

impl Arch {
    fn layer_shapes(&self, num_features: usize, num_classes: usize) -> Vec<(usize, usize)> {
        match *self {
            Arch::Linear => vec![(num_classes, num_features)],
            Arch::OneHidden { hidden_width } => vec![
                (hidden_width, num_features),
                (num_classes, hidden_width),
            ],
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Linear => write!(f, "linear"),
            Arch::OneHidden { hidden_width } => write!(f, "hidden:{hidden_width}"),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    /// Parses `linear` or `hidden:<width>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("linear") {
            return Ok(Arch::Linear);
        }
        if let Some(width) = s.strip_prefix("hidden:") {
            let hidden_width: usize = width.parse().map_err(|_| {
                Error::InvalidParameter(format!("arch {s:?}: hidden width is not an integer"))
            })?;
            if hidden_width == 0 {
                return Err(Error::InvalidParameter(format!(
                    "arch {s:?}: hidden width must be positive"
                )));
            }
            return Ok(Arch::OneHidden { hidden_width });
        }
        Err(Error::InvalidParameter(format!(
            "arch {s:?}: expected `linear` or `hidden:<width>`"
        )))
    }
}

/// One affine layer. `weights[out][in]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            weights: vec![vec![0.0; cols]; rows],
            bias: vec![0.0; rows],
        }
    }

    fn shape(&self) -> (usize, usize) {
        (self.bias.len(), self.weights.first().map_or(0, Vec::len))
    }

    fn affine(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().flatten().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().flatten().chain(self.bias.iter_mut())
    }
}

/// Parameters of a classifier. Gradients share this layout (see [`Gradients`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    num_features: usize,
    num_classes: usize,
    layers: Vec<Layer>,
}

/// Same shape as the parameters they differentiate.
pub type Gradients = ModelParams;

impl ModelParams {
    /// Validates shapes and finiteness of explicitly supplied layers.
    pub fn from_layers(
        arch: Arch,
        num_features: usize,
        num_classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::InvalidParameter("num_features must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if let Arch::OneHidden { hidden_width: 0 } = arch {
            return Err(Error::InvalidParameter("hidden width must be positive".into()));
        }
        let shapes = arch.layer_shapes(num_features, num_classes);
        if shapes.len() != layers.len() {
            return Err(Error::InvalidInput(format!(
                "arch {arch} expects {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, (layer, &(rows, cols))) in layers.iter().zip(&shapes).enumerate() {
            let ok = layer.bias.len() == rows
                && layer.weights.len() == rows
                && layer.weights.iter().all(|r| r.len() == cols);
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "layer {i}: expected {rows}x{cols} weights and {rows} biases"
                )));
            }
            if layer.values().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(ModelParams {
            arch,
            num_features,
            num_classes,
            layers,
        })
    }

    pub fn zeros(arch: Arch, num_features: usize, num_classes: usize) -> Result<Self> {
        let layers = arch
            .layer_shapes(num_features, num_classes)
            .into_iter()
            .map(|(r, c)| Layer::zeros(r, c))
            .collect();
        Self::from_layers(arch, num_features, num_classes, layers)
    }

    /// Glorot-uniform weights in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`; zero biases.
    pub fn init<R: Rng + ?Sized>(
        arch: Arch,
        num_features: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(arch, num_features, num_classes)?;
        for layer in &mut params.layers {
            let (fan_out, fan_in) = layer.shape();
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weights.iter_mut().flatten() {
                *w = rng.random_range(-s..=s);
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            arch: self.arch,
            num_features: self.num_features,
            num_classes: self.num_classes,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let (r, c) = l.shape();
                    Layer::zeros(r, c)
                })
                .collect(),
        }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.values().count()).sum()
    }

    /// All parameters in a fixed order: layer by layer, weights row-major then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Layer::values_mut)
    }

    pub fn global_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn same_shape(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.num_features == other.num_features
            && self.num_classes == other.num_classes
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.shape() == b.shape())
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.num_features {
            return Err(Error::InvalidInput(format!(
                "feature vector has length {}, model expects {}",
                features.len(),
                self.num_features
            )));
        }
        Ok(())
    }

    pub fn forward(&self, features: &[f64]) -> Result<Logits> {
        self.check_features(features)?;
        Logits::new(self.forward_raw(features).1)
    }

    /// Returns (hidden activations if any, logits).
    fn forward_raw(&self, features: &[f64]) -> (Option<Vec<f64>>, Vec<f64>) {
        match self.arch {
            Arch::Linear => (None, self.layers[0].affine(features)),
            Arch::OneHidden { .. } => {
                let hidden: Vec<f64> = self.layers[0]
                    .affine(features)
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                let logits = self.layers[1].affine(&hidden);
                (Some(hidden), logits)
            }
        }
    }

    /// Adds `scale * d(logits)/d(params)^T * grad_logits` into `grads`.
    pub fn accumulate_backward(
        &self,
        features: &[f64],
        grad_logits: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.check_features(features)?;
        if grad_logits.len() != self.num_classes {
            return Err(Error::InvalidInput(format!(
                "logit gradient has length {}, model has {} classes",
                grad_logits.len(),
                self.num_classes
            )));
        }
        if !self.same_shape(grads) {
            return Err(Error::InvalidInput("gradient buffer shape mismatch".into()));
        }
        let (hidden, _) = self.forward_raw(features);
        match hidden {
            None => outer_accumulate(&mut grads.layers[0], grad_logits, features, scale),
            Some(hidden) => {
                outer_accumulate(&mut grads.layers[1], grad_logits, &hidden, scale);
                let out = &self.layers[1];
                let pre_grad: Vec<f64> = (0..hidden.len())
                    .map(|j| {
                        let back: f64 = out
                            .weights
                            .iter()
                            .zip(grad_logits)
                            .map(|(row, g)| row[j] * g)
                            .sum();
                        back * (1.0 - hidden[j] * hidden[j])
                    })
                    .collect();
                outer_accumulate(&mut grads.layers[0], &pre_grad, features, scale);
            }
        }
        Ok(())
    }

    /// `params - lr * clip(grads)` in place. See [`apply_update`].
    pub fn apply_update_in_place(
        &mut self,
        grads: &Gradients,
        lr: f64,
        max_grad_norm: Option<f64>,
    ) -> Result<()> {
        if !self.same_shape(grads) {
            return Err(Error::InvalidInput("gradient shape does not match parameters".into()));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate must be positive, got {lr}")));
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Divergence("parameter update: non-finite gradient".into()));
        }
        let mut step = lr;
        if let Some(max_norm) = max_grad_norm {
            if !(max_norm > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "max_grad_norm must be positive, got {max_norm}"
                )));
            }
            if norm > max_norm {
                step *= max_norm / norm;
            }
        }
        for (p, g) in self.values_mut().zip(grads.values()) {
            *p -= step * g;
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("parameter update: non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn to_checkpoint_json(&self) -> String {
        let ckpt = CheckpointRef {
            format_version: CHECKPOINT_FORMAT_VERSION,
            arch: self.arch,
            num_features: self.num_features,
            num_classes: self.num_classes,
            layers: &self.layers,
        };
        serde_json::to_string_pretty(&ckpt).expect("checkpoint serialization cannot fail")
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(json)
            .map_err(|e| Error::InvalidInput(format!("checkpoint: {e}")))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "checkpoint: unsupported format_version {}",
                ckpt.format_version
            )));
        }
        Self::from_layers(ckpt.arch, ckpt.num_features, ckpt.num_classes, ckpt.layers)
    }
}

fn outer_accumulate(layer: &mut Layer, out_grad: &[f64], input: &[f64], scale: f64) {
    for ((row, b), g) in layer.weights.iter_mut().zip(&mut layer.bias).zip(out_grad) {
        let sg = scale * g;
        *b += sg;
        for (w, x) in row.iter_mut().zip(input) {
            *w += sg * x;
        }
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    arch: Arch,
    num_features: usize,
    num_classes: usize,
    layers: &'a [Layer],
}

#[derive(Deserialize)]
struct Checkpoint {
    format_version: u32,
    arch: Arch,
    num_features: usize,
    num_classes: usize,
    layers: Vec<Layer>,
}

/// Gradient-clipped descent step returning new parameters.
///
/// If the global L2 norm of `grads` exceeds `max_grad_norm`, all gradients
/// are rescaled to that norm before `params - lr * grads`.
pub fn apply_update(
    params: &ModelParams,
    grads: &Gradients,
    lr: f64,
    max_grad_norm: Option<f64>,
) -> Result<ModelParams> {
    let mut next = params.clone();
    next.apply_update_in_place(grads, lr, max_grad_norm)?;
    Ok(next)
}

/// Finite real logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("logits are empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("logit {i} is not finite")));
        }
        Ok(Logits(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("probability vector is empty".into()));
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(format!(
                "probability {i} = {} is outside [0, 1]",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ProbDist(probs))
    }

    pub fn uniform(num_classes: usize) -> Self {
        ProbDist(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Class indices by descending probability, lower index first on ties.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx
    }

    /// Mean of several distributions over the same classes.
    pub fn mean(dists: &[&ProbDist]) -> Result<Self> {
        let first = dists
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot average zero distributions".into()))?;
        let c = first.num_classes();
        if dists.iter().any(|d| d.num_classes() != c) {
            return Err(Error::InvalidInput("distributions differ in length".into()));
        }
        let n = dists.len() as f64;
        let probs = (0..c)
            .map(|j| (dists.iter().map(|d| d.0[j]).sum::<f64>() / n).clamp(0.0, 1.0))
            .collect();
        ProbDist::new(probs)
    }
}

impl<'de> Deserialize<'de> for ProbDist {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(de)?;
        ProbDist::new(v).map_err(serde::de::Error::custom)
    }
}

/// Raw temperature softmax with max-subtraction. Caller guarantees `tau > 0`
/// and finite inputs.
pub(crate) fn softmax_values(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| ((v - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("temperature must be positive, got {tau}")))
    }
}

/// `softmax(z / tau)`.
pub fn softmax_temp(z: &Logits, tau: f64) -> Result<ProbDist> {
    check_tau(tau)?;
    ProbDist::new(softmax_values(z.values(), tau))
}

/// The `k` most probable classes, descending, lower index first on ties.
pub fn predict_topk(p: &ProbDist, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.num_classes() {
        return Err(Error::InvalidParameter(format!(
            "k must be in 1..={}, got {k}",
            p.num_classes()
        )));
    }
    let mut ranking = p.ranking();
    ranking.truncate(k);
    Ok(ranking)
}

/// Forward pass followed by temperature softmax.
pub fn predict_proba(params: &ModelParams, features: &[f64], tau: f64) -> Result<ProbDist> {
    softmax_temp(&params.forward(features)?, tau)
}
