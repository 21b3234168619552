//! The action guide: a small fully connected network scoring the three
//! refinement actions from the four-feature Bernstein summary, its Adam
//! trainer, the labelled-dataset generator, and model persistence.
//!
//! The guide takes `(p_min, p_max, grad_min, grad_max)` through an input
//! normalizer, three ReLU hidden layers of 40 neurons, and a softmax output
//! over `{under_approx, over_approx, split}`. Training labels come from
//! replaying single-polynomial abstraction refinement on random quadratics
//! and measuring, at every visited ambiguous region, which action removes
//! the most ambiguous volume.

use std::collections::BinaryHeap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abstraction::{self, Action, DEFAULT_CLASSIFY_DEPTH};
use crate::bernstein::{self, EnclosureFeatures};
use crate::poly::{IntervalBox, Polynomial};
use crate::{par, Error, Result};

pub const GUIDE_DIMS: [usize; 5] = [4, 40, 40, 40, 3];
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One training sample: the four enclosure features and a one-hot action
/// label.
#[derive(Clone, Debug)]
pub struct GuideSample {
    pub features: [f64; 4],
    pub label: [f64; 3],
}

impl GuideSample {
    pub fn label_index(&self) -> usize {
        self.label
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// A labelled refinement decision with its provenance, for experiments that
/// need the raw polynomial and region alongside the reduced features.
#[derive(Clone, Debug)]
pub struct LabeledInstance {
    pub poly: Polynomial,
    pub region: IntervalBox,
    pub features: [f64; 4],
    pub label: usize,
}

impl LabeledInstance {
    pub fn to_sample(&self) -> GuideSample {
        let mut label = [0.0; 3];
        label[self.label] = 1.0;
        GuideSample {
            features: self.features,
            label,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dropout_p: 0.5,
            seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// Plain fully connected network: ReLU hidden layers, softmax output.
/// Weights are row-major `out x in`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        let weights = (0..dims.len() - 1)
            .map(|l| vec![0.0; dims[l + 1] * dims[l]])
            .collect();
        let biases = (0..dims.len() - 1).map(|l| vec![0.0; dims[l + 1]]).collect();
        Self {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    /// He-uniform initialisation, deterministic in the RNG stream.
    pub fn he_init(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(dims);
        for l in 0..dims.len() - 1 {
            let bound = (6.0 / dims[l] as f64).sqrt();
            for w in net.weights[l].iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        net
    }

    fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    /// Forward pass without dropout; returns the softmax probabilities.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        for l in 0..self.layer_count() {
            let mut z = self.affine(l, &a);
            if l + 1 < self.layer_count() {
                relu(&mut z);
            } else {
                softmax(&mut z);
            }
            a = z;
        }
        a
    }

    fn affine(&self, l: usize, a: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
        let mut z = self.biases[l].clone();
        for o in 0..n_out {
            let row = &self.weights[l][o * n_in..(o + 1) * n_in];
            let mut acc = 0.0;
            for (w, x) in row.iter().zip(a) {
                acc += w * x;
            }
            z[o] += acc;
        }
        z
    }

    fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }
}

fn relu(z: &mut [f64]) {
    for v in z.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn softmax(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Affine input normalizer `(x - mu) / sigma` fit on training features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Normalizer {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation per component. Components with
    /// zero spread get sigma 1 with a warning so normalisation stays finite.
    pub fn fit(features: &[Vec<f64>]) -> Self {
        let d = features.first().map(Vec::len).unwrap_or(0);
        let n = features.len().max(1) as f64;
        let mut mu = vec![0.0; d];
        for f in features {
            for (m, v) in mu.iter_mut().zip(f) {
                *m += v;
            }
        }
        for m in mu.iter_mut() {
            *m /= n;
        }
        let mut sigma = vec![0.0; d];
        for f in features {
            for (s, (v, m)) in sigma.iter_mut().zip(f.iter().zip(&mu)) {
                *s += (v - m) * (v - m);
            }
        }
        for (i, s) in sigma.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                log::warn!("normalizer: feature {i} is constant; using sigma = 1");
                *s = 1.0;
            }
        }
        Self { mu, sigma }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            sigma: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Guide model (normalizer + fixed-architecture network)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GuideModel {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub meta: ModelMeta,
}

impl GuideModel {
    pub fn from_parts(mlp: Mlp, norm: Normalizer, meta: ModelMeta) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            layer_dims: mlp.dims,
            weights: mlp.weights,
            biases: mlp.biases,
            mu: norm.mu,
            sigma: norm.sigma,
            meta,
        }
    }

    fn as_mlp(&self) -> Mlp {
        Mlp {
            dims: self.layer_dims.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        }
    }

    /// Normalised forward pass; deterministic, no dropout. The output is a
    /// probability vector over the three actions.
    pub fn forward(&self, features: &EnclosureFeatures) -> [f64; 3] {
        let x: Vec<f64> = features
            .as_array()
            .iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let out = self.as_mlp().forward(&x);
        [out[0], out[1], out[2]]
    }

    /// Highest-probability action; ties resolve in action order.
    pub fn action(&self, features: &EnclosureFeatures) -> Action {
        let out = self.forward(features);
        let mut best = 0;
        for i in 1..3 {
            if out[i] > out[best] {
                best = i;
            }
        }
        Action::from_index(best)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format_version {} (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.layer_dims.len() < 2 {
            return Err(Error::ModelFormat("layer_dims too short".into()));
        }
        if self.weights.len() != self.layer_dims.len() - 1
            || self.biases.len() != self.layer_dims.len() - 1
        {
            return Err(Error::ModelFormat("layer count mismatch".into()));
        }
        for l in 0..self.weights.len() {
            if self.weights[l].len() != self.layer_dims[l + 1] * self.layer_dims[l]
                || self.biases[l].len() != self.layer_dims[l + 1]
            {
                return Err(Error::ModelFormat(format!("layer {l} shape mismatch")));
            }
        }
        if self.mu.len() != self.layer_dims[0] || self.sigma.len() != self.layer_dims[0] {
            return Err(Error::ModelFormat("normalizer shape mismatch".into()));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::ModelFormat(
                "sigma components must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::ModelFormat(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: GuideModel =
            serde_json::from_str(&text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub mlp: Mlp,
    pub normalizer: Normalizer,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// Mean training cross-entropy of the freshly initialised network,
    /// measured without dropout before any update.
    pub initial_loss: f64,
    /// Clean (dropout-off) mean training loss after the first epoch.
    pub first_epoch_loss: f64,
    /// Mean training loss per epoch (with dropout active).
    pub losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Runs `f` over the flattened parameter vector and writes the result back.
fn with_flat_params<R>(mlp: &mut Mlp, f: impl FnOnce(&mut Vec<f64>) -> R) -> R {
    let mut flat = Vec::with_capacity(mlp.param_count());
    for l in 0..mlp.layer_count() {
        flat.extend_from_slice(&mlp.weights[l]);
        flat.extend_from_slice(&mlp.biases[l]);
    }
    let r = f(&mut flat);
    let mut at = 0;
    for l in 0..mlp.layer_count() {
        let wl = mlp.weights[l].len();
        mlp.weights[l].copy_from_slice(&flat[at..at + wl]);
        at += wl;
        let bl = mlp.biases[l].len();
        mlp.biases[l].copy_from_slice(&flat[at..at + bl]);
        at += bl;
    }
    r
}

/// Forward with cached activations and optional inverted dropout on the
/// first two hidden layers, then backprop of the softmax cross-entropy
/// loss. Gradients accumulate into `grads` (flat layout matching
/// [`with_flat_params`]); the return value is the sample loss.
fn backprop_sample(
    mlp: &Mlp,
    x: &[f64],
    label: usize,
    mut dropout: Option<(&TrainConfig, &mut ChaCha8Rng)>,
    grads: &mut [f64],
) -> f64 {
    let layers = mlp.layer_count();
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers + 1);
    let mut masks: Vec<Option<Vec<f64>>> = vec![None; layers];
    activations.push(x.to_vec());
    for l in 0..layers {
        let mut z = mlp.affine(l, &activations[l]);
        if l + 1 < layers {
            relu(&mut z);
            if l < 2 {
                if let Some((cfg, rng)) = dropout.as_mut() {
                    let keep = 1.0 - cfg.dropout_p;
                    let mask: Vec<f64> = z
                        .iter()
                        .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                        .collect();
                    for (v, m) in z.iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    masks[l] = Some(mask);
                }
            }
        } else {
            softmax(&mut z);
        }
        activations.push(z);
    }

    let probs = activations.last().unwrap();
    let loss = -(probs[label].max(1e-300)).ln();

    // Softmax cross-entropy delta: probabilities minus the one-hot target.
    let mut delta: Vec<f64> = probs.clone();
    delta[label] -= 1.0;

    let mut at_end = grads.len();
    for l in (0..layers).rev() {
        let (n_in, n_out) = (mlp.dims[l], mlp.dims[l + 1]);
        let wl = n_out * n_in;
        let b_at = at_end - n_out;
        let w_at = b_at - wl;
        let a_prev = &activations[l];
        for o in 0..n_out {
            grads[b_at + o] += delta[o];
            let row = &mut grads[w_at + o * n_in..w_at + (o + 1) * n_in];
            for (g, a) in row.iter_mut().zip(a_prev) {
                *g += delta[o] * a;
            }
        }
        if l > 0 {
            let mut prev_delta = vec![0.0; n_in];
            for o in 0..n_out {
                let row = &mlp.weights[l][o * n_in..(o + 1) * n_in];
                for (pd, w) in prev_delta.iter_mut().zip(row) {
                    *pd += delta[o] * w;
                }
            }
            // Through dropout, then through the previous ReLU.
            if let Some(mask) = &masks[l - 1] {
                for (pd, m) in prev_delta.iter_mut().zip(mask) {
                    *pd *= m;
                }
            }
            for (pd, a) in prev_delta.iter_mut().zip(&activations[l]) {
                if *a <= 0.0 {
                    *pd = 0.0;
                }
            }
            delta = prev_delta;
        }
        at_end = w_at;
    }
    loss
}

/// Trains a network of the given shape on raw feature vectors. The
/// normalizer is fit on the training features before any update, batches
/// are visited in a seeded shuffle, and dropout masks come from the same
/// stream, so the whole run is deterministic in `cfg.seed`.
pub fn train_mlp(
    dims: &[usize],
    train_features: &[Vec<f64>],
    train_labels: &[usize],
    val_features: &[Vec<f64>],
    val_labels: &[usize],
    cfg: &TrainConfig,
) -> TrainOutcome {
    assert_eq!(train_features.len(), train_labels.len());
    assert!(
        train_features.len() >= cfg.batch_size,
        "need at least one full batch"
    );
    let norm = Normalizer::fit(train_features);
    let xs: Vec<Vec<f64>> = train_features.iter().map(|f| norm.apply(f)).collect();
    let val_xs: Vec<Vec<f64>> = val_features.iter().map(|f| norm.apply(f)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mlp = Mlp::he_init(dims, &mut rng);
    let clean_loss = |mlp: &Mlp| -> f64 {
        xs.iter()
            .zip(train_labels)
            .map(|(x, &y)| -(mlp.forward(x)[y].max(1e-300)).ln())
            .sum::<f64>()
            / xs.len() as f64
    };
    let initial_loss = clean_loss(&mlp);
    let mut first_epoch_loss = initial_loss;
    let mut adam = Adam::new(mlp.param_count());
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = vec![0.0; mlp.param_count()];
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += backprop_sample(
                    &mlp,
                    &xs[i],
                    train_labels[i],
                    if cfg.dropout_p > 0.0 {
                        Some((cfg, &mut rng))
                    } else {
                        None
                    },
                    &mut grads,
                );
            }
            for g in grads.iter_mut() {
                *g *= scale;
            }
            with_flat_params(&mut mlp, |flat| adam.step(flat, &grads, cfg));
            epoch_loss += batch_loss;
        }
        losses.push(epoch_loss / xs.len() as f64);
        if epoch == 0 {
            first_epoch_loss = clean_loss(&mlp);
        }
    }

    let acc = |inputs: &[Vec<f64>], labels: &[usize]| -> f64 {
        if inputs.is_empty() {
            return 0.0;
        }
        let hits = inputs
            .iter()
            .zip(labels)
            .filter(|(x, &y)| argmax(&mlp.forward(x)) == y)
            .count();
        hits as f64 / inputs.len() as f64
    };
    let train_accuracy = acc(&xs, train_labels);
    let val_accuracy = acc(&val_xs, val_labels);
    TrainOutcome {
        mlp,
        normalizer: norm,
        train_accuracy,
        val_accuracy,
        initial_loss,
        first_epoch_loss,
        losses,
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Trains the standard four-feature guide.
pub fn train(samples: &[GuideSample], val: &[GuideSample], cfg: &TrainConfig) -> GuideModel {
    let feats: Vec<Vec<f64>> = samples.iter().map(|s| s.features.to_vec()).collect();
    let labels: Vec<usize> = samples.iter().map(GuideSample::label_index).collect();
    let vfeats: Vec<Vec<f64>> = val.iter().map(|s| s.features.to_vec()).collect();
    let vlabels: Vec<usize> = val.iter().map(GuideSample::label_index).collect();
    let out = train_mlp(&GUIDE_DIMS, &feats, &labels, &vfeats, &vlabels, cfg);
    GuideModel::from_parts(
        out.mlp,
        out.normalizer,
        ModelMeta {
            train_accuracy: out.train_accuracy,
            val_accuracy: out.val_accuracy,
        },
    )
}

/// Fraction of samples whose predicted action matches the label.
pub fn evaluate_accuracy(model: &GuideModel, data: &[GuideSample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .iter()
        .filter(|s| {
            let f = EnclosureFeatures {
                p_min: s.features[0],
                p_max: s.features[1],
                grad_min: s.features[2],
                grad_max: s.features[3],
            };
            model.action(&f).index() == s.label_index()
        })
        .count();
    hits as f64 / data.len() as f64
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Families of random polynomials used for training and the generalization
/// benchmarks.
#[derive(Clone, Copy, Debug)]
pub enum PolyTemplate {
    /// Full two-variable quadratic with coefficients uniform in [-1, 1].
    Quadratic2,
    /// Two-variable degree-four family
    /// `c1 x1^4 + c2 x2^3 + c3 x1^4 x2^3 + c4 x1^3 + c5`.
    Degree4,
}

impl PolyTemplate {
    pub fn sample(self, rng: &mut impl Rng) -> Polynomial {
        let mut c = || rng.gen_range(-1.0..1.0);
        match self {
            PolyTemplate::Quadratic2 => Polynomial::new(
                2,
                [
                    (vec![2, 0], c()),
                    (vec![0, 2], c()),
                    (vec![1, 1], c()),
                    (vec![1, 0], c()),
                    (vec![0, 1], c()),
                    (vec![0, 0], c()),
                ],
            )
            .expect("well-formed"),
            PolyTemplate::Degree4 => Polynomial::new(
                2,
                [
                    (vec![4, 0], c()),
                    (vec![0, 3], c()),
                    (vec![4, 3], c()),
                    (vec![3, 0], c()),
                    (vec![0, 0], c()),
                ],
            )
            .expect("well-formed"),
        }
    }
}

/// What one visited region contributes to a trace: nothing (sign already
/// settled), a continuation without a label (no action reduced anything, so
/// no best action exists), or a labelled decision.
enum RegionVisit {
    Resolved,
    Unlabeled(Vec<IntervalBox>),
    Labeled(LabeledInstance, Vec<IntervalBox>),
}

/// Measures all three actions on one ambiguous region and labels it with
/// the volume-reduction winner. Split is scored with one level of
/// lookahead: the best single action on each half, reductions summed.
fn label_region(p: &Polynomial, region: &IntervalBox, ref_widths: &[f64]) -> Result<RegionVisit> {
    let feats = bernstein::features(p, region)?;
    if !matches!(
        bernstein::classify_bounds(feats.p_min, feats.p_max),
        bernstein::SignClass::Ambiguous
    ) {
        return Ok(RegionVisit::Resolved);
    }
    let depth = DEFAULT_CLASSIFY_DEPTH;
    let under =
        abstraction::apply_action_detail(p, region, Action::UnderApprox, depth, ref_widths)?;
    let over = abstraction::apply_action_detail(p, region, Action::OverApprox, depth, ref_widths)?;

    // Split lookahead: best single action on each half, reductions summed.
    // The halves classify at depth - 1 so the lookahead bottoms out at the
    // same cell size as the single actions; split then wins exactly when
    // the finer abstractions it enables prune more at equal resolution.
    let dim = region.widest_scaled_dim(ref_widths);
    let (ha, hb) = region.bisect(dim);
    let half_depth = depth.saturating_sub(1);
    let mut split_reduction = 0.0;
    let split_children = vec![ha, hb];
    for half in &split_children {
        let hu =
            abstraction::apply_action_detail(p, half, Action::UnderApprox, half_depth, ref_widths)?;
        let ho =
            abstraction::apply_action_detail(p, half, Action::OverApprox, half_depth, ref_widths)?;
        split_reduction += hu.volume_reduction.max(ho.volume_reduction);
    }

    let reductions = [
        under.volume_reduction,
        over.volume_reduction,
        split_reduction,
    ];
    let mut label = 0;
    for i in 1..3 {
        if reductions[i] > reductions[label] {
            label = i;
        }
    }
    // No action reduced anything: there is no best action to learn from.
    // Split is the only move that makes progress, so continue through it.
    if reductions[label] <= 1e-12 * region.volume() {
        return Ok(RegionVisit::Unlabeled(split_children));
    }
    let continue_with = match Action::from_index(label) {
        Action::UnderApprox => under.partition.ambiguous,
        Action::OverApprox => over.partition.ambiguous,
        Action::Split => split_children,
    };
    let instance = LabeledInstance {
        poly: p.clone(),
        region: region.clone(),
        features: feats.as_array(),
        label,
    };
    Ok(RegionVisit::Labeled(instance, continue_with))
}

struct HeapEntry {
    vol: f64,
    seq: u64,
    region: IntervalBox,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.vol == other.vol && self.seq == other.seq
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Larger volume first; older insertion wins ties.
        self.vol
            .total_cmp(&other.vol)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Replays abstraction refinement for one polynomial and collects labelled
/// decisions at every visited ambiguous region, largest volume first.
pub fn trace_instances(
    p: &Polynomial,
    domain: &IntervalBox,
    max_instances: usize,
    min_rel_volume: f64,
) -> Result<Vec<LabeledInstance>> {
    let ref_widths = domain.widths();
    let vol0 = domain.volume();
    let mut out = Vec::new();
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();
    let mut seq = 0u64;
    for piece in domain.split_orthants() {
        heap.push(HeapEntry {
            vol: piece.volume(),
            seq,
            region: piece,
        });
        seq += 1;
    }
    while let Some(entry) = heap.pop() {
        if out.len() >= max_instances || entry.vol < min_rel_volume * vol0 {
            break;
        }
        let children = match label_region(p, &entry.region, &ref_widths)? {
            RegionVisit::Resolved => continue,
            RegionVisit::Unlabeled(children) => children,
            RegionVisit::Labeled(instance, children) => {
                out.push(instance);
                children
            }
        };
        for child in children {
            heap.push(HeapEntry {
                vol: child.volume(),
                seq,
                region: child,
            });
            seq += 1;
        }
    }
    Ok(out)
}

/// Generates labelled instances from independent per-polynomial RNG streams
/// derived from `seed`. Each polynomial's refinement is traced all the way
/// to the volume floor and at most `PER_POLY` of its decisions are kept by
/// reservoir sampling, so the collected instances follow the depth profile
/// of a real refinement workload. Deterministic for a given `(count, seed,
/// template, domain)` regardless of the parallel schedule.
pub fn generate_instances(
    count: usize,
    seed: u64,
    template: PolyTemplate,
    domain: &IntervalBox,
) -> Vec<LabeledInstance> {
    generate_instances_impl(count, seed, template, domain, false)
}

/// Sequential twin of [`generate_instances`]; same output, no fan-out.
pub fn generate_instances_seq(
    count: usize,
    seed: u64,
    template: PolyTemplate,
    domain: &IntervalBox,
) -> Vec<LabeledInstance> {
    generate_instances_impl(count, seed, template, domain, true)
}

fn generate_instances_impl(
    count: usize,
    seed: u64,
    template: PolyTemplate,
    domain: &IntervalBox,
    sequential: bool,
) -> Vec<LabeledInstance> {
    const PER_POLY: usize = 48;
    const TRACE_CAP: usize = 4096;
    let mut out: Vec<LabeledInstance> = Vec::with_capacity(count);
    let mut next_poly = 0u64;
    while out.len() < count {
        // Chunk sized to the remaining need so small requests stay cheap;
        // per-polynomial streams keep the output independent of chunking.
        let chunk = ((count - out.len()).div_ceil(PER_POLY / 2)).clamp(2, 64);
        let trace_one = |i: usize| {
            let mut rng = crate::oracle::stream(seed, next_poly + i as u64);
            let p = template.sample(&mut rng);
            let trace = trace_instances(&p, domain, TRACE_CAP, 1e-5).unwrap_or_default();
            reservoir(trace, PER_POLY, &mut rng)
        };
        let traces = if sequential {
            par::map_range_seq(chunk, trace_one)
        } else {
            par::map_range(chunk, trace_one)
        };
        for t in traces {
            out.extend(t);
        }
        next_poly += chunk as u64;
    }
    out.truncate(count);
    out
}

/// Algorithm-R reservoir sample of `k` items, preserving stream order.
fn reservoir<T>(items: Vec<T>, k: usize, rng: &mut impl Rng) -> Vec<T> {
    if items.len() <= k {
        return items;
    }
    let mut keep: Vec<usize> = (0..k).collect();
    for i in k..items.len() {
        let j = rng.gen_range(0..=i);
        if j < k {
            keep[j] = i;
        }
    }
    keep.sort_unstable();
    let mut by_index: Vec<Option<T>> = items.into_iter().map(Some).collect();
    keep.into_iter()
        .map(|i| by_index[i].take().expect("indices unique"))
        .collect()
}

/// The training distribution: labelled refinement decisions for random
/// quadratics over `[-2, 2]^2`.
pub fn generate_dataset(count: usize, seed: u64) -> Vec<GuideSample> {
    let domain = IntervalBox::uniform(2, -2.0, 2.0).expect("static bounds");
    generate_instances(count, seed, PolyTemplate::Quadratic2, &domain)
        .iter()
        .map(LabeledInstance::to_sample)
        .collect()
}

/// Sequential twin of [`generate_dataset`] for the benchmark suite.
pub fn generate_dataset_seq(count: usize, seed: u64) -> Vec<GuideSample> {
    let domain = IntervalBox::uniform(2, -2.0, 2.0).expect("static bounds");
    generate_instances_seq(count, seed, PolyTemplate::Quadratic2, &domain)
        .iter()
        .map(LabeledInstance::to_sample)
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset CSV
// ---------------------------------------------------------------------------

pub fn dataset_to_csv(samples: &[GuideSample]) -> String {
    let mut out = String::from("f1,f2,f3,f4,label\n");
    for s in samples {
        let f = s.features;
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            f[0],
            f[1],
            f[2],
            f[3],
            s.label_index()
        ));
    }
    out
}

pub fn dataset_from_csv(text: &str) -> Result<Vec<GuideSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("f1") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::ModelFormat(format!(
                "dataset line {}: expected 5 columns, got {}",
                i + 1,
                cols.len()
            )));
        }
        let mut features = [0.0; 4];
        for (j, f) in features.iter_mut().enumerate() {
            *f = cols[j].trim().parse().map_err(|_| {
                Error::ModelFormat(format!("dataset line {}: bad number `{}`", i + 1, cols[j]))
            })?;
        }
        let label: usize = cols[4].trim().parse().map_err(|_| {
            Error::ModelFormat(format!("dataset line {}: bad label `{}`", i + 1, cols[4]))
        })?;
        if label > 2 {
            return Err(Error::ModelFormat(format!(
                "dataset line {}: label out of range",
                i + 1
            )));
        }
        let mut onehot = [0.0; 3];
        onehot[label] = 1.0;
        out.push(GuideSample {
            features,
            label: onehot,
        });
    }
    Ok(out)
}

/// Coefficients of a two-variable quadratic in the fixed order
/// `x1^2, x2^2, x1 x2, x1, x2, 1`: the raw power-basis encoding used by the
/// basis-comparison experiment.
pub fn quadratic_power_features(p: &Polynomial) -> Vec<f64> {
    [
        vec![2u32, 0],
        vec![0, 2],
        vec![1, 1],
        vec![1, 0],
        vec![0, 1],
        vec![0, 0],
    ]
    .iter()
    .map(|idx| p.coeff(idx))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn any_features() -> EnclosureFeatures {
        EnclosureFeatures {
            p_min: -1.0,
            p_max: 1.0,
            grad_min: -2.0,
            grad_max: 2.0,
        }
    }

    #[test]
    fn zero_network_outputs_uniform() {
        let model = GuideModel::from_parts(
            Mlp::zeros(&GUIDE_DIMS),
            Normalizer::identity(4),
            ModelMeta::default(),
        );
        let out = model.forward(&any_features());
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_bias_dominates() {
        let mut mlp = Mlp::zeros(&GUIDE_DIMS);
        let last = mlp.biases.len() - 1;
        mlp.biases[last] = vec![10.0, 0.0, 0.0];
        let model = GuideModel::from_parts(mlp, Normalizer::identity(4), ModelMeta::default());
        let out = model.forward(&any_features());
        assert!(out[0] > 0.99);
        assert_eq!(model.action(&any_features()), Action::UnderApprox);
    }

    #[test]
    fn softmax_always_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = Mlp::he_init(&GUIDE_DIMS, &mut rng);
        let model = GuideModel::from_parts(mlp, Normalizer::identity(4), ModelMeta::default());
        for _ in 0..100 {
            let f = EnclosureFeatures {
                p_min: rng.gen_range(-10.0..10.0),
                p_max: rng.gen_range(-10.0..10.0),
                grad_min: rng.gen_range(-10.0..10.0),
                grad_max: rng.gen_range(-10.0..10.0),
            };
            let out = model.forward(&f);
            assert!(out.iter().all(|v| *v >= 0.0));
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn save_load_reproduces_outputs_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mlp = Mlp::he_init(&GUIDE_DIMS, &mut rng);
        let norm = Normalizer {
            mu: vec![0.1, -0.2, 0.3, 0.4],
            sigma: vec![1.0, 2.0, 0.5, 3.0],
        };
        let model = GuideModel::from_parts(mlp, norm, ModelMeta::default());
        let dir = std::env::temp_dir().join("polybern-guide-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        model.save(&path).unwrap();
        let back = GuideModel::load(&path).unwrap();
        for _ in 0..100 {
            let f = EnclosureFeatures {
                p_min: rng.gen_range(-5.0..5.0),
                p_max: rng.gen_range(-5.0..5.0),
                grad_min: rng.gen_range(-5.0..5.0),
                grad_max: rng.gen_range(-5.0..5.0),
            };
            let a = model.forward(&f);
            let b = back.forward(&f);
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
            assert_eq!(a[2].to_bits(), b[2].to_bits());
        }
    }

    #[test]
    fn model_validation_rejects_bad_files() {
        let mut model = GuideModel::from_parts(
            Mlp::zeros(&GUIDE_DIMS),
            Normalizer::identity(4),
            ModelMeta::default(),
        );
        model.format_version = 99;
        assert!(model.validate().is_err());
        let mut model = GuideModel::from_parts(
            Mlp::zeros(&GUIDE_DIMS),
            Normalizer::identity(4),
            ModelMeta::default(),
        );
        model.sigma[0] = 0.0;
        assert!(model.validate().is_err());
    }

    #[test]
    fn gradcheck_small_network() {
        let dims = [4usize, 5, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut mlp = Mlp::he_init(&dims, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let label = 1usize;

        let mut grads = vec![0.0; mlp.param_count()];
        backprop_sample(&mlp, &x, label, None, &mut grads);

        let h = 1e-6;
        for k in 0..mlp.param_count() {
            let loss_at = |mlp: &mut Mlp, delta: f64| -> f64 {
                with_flat_params(mlp, |flat| flat[k] += delta);
                let out = mlp.forward(&x);
                let loss = -out[label].ln();
                with_flat_params(mlp, |flat| flat[k] -= delta);
                loss
            };
            let lp = loss_at(&mut mlp, h);
            let lm = loss_at(&mut mlp, -h);
            let fd = (lp - lm) / (2.0 * h);
            let scale = fd.abs().max(grads[k].abs()).max(1e-3);
            assert!(
                (fd - grads[k]).abs() <= 1e-4 * scale,
                "param {k}: backprop {} vs fd {}",
                grads[k],
                fd
            );
        }
    }

    #[test]
    fn training_fits_separable_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..600 {
            let class = i % 3;
            let center = [
                [4.0, 0.0, 0.0, 0.0],
                [0.0, 4.0, 0.0, 0.0],
                [0.0, 0.0, 4.0, 0.0],
            ][class];
            let f: Vec<f64> = center.iter().map(|c| c + rng.gen_range(-0.5..0.5)).collect();
            feats.push(f);
            labels.push(class);
        }
        let cfg = TrainConfig {
            epochs: 60,
            dropout_p: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train_mlp(&[4, 16, 3], &feats, &labels, &feats, &labels, &cfg);
        assert!(
            out.train_accuracy >= 0.99,
            "train accuracy {}",
            out.train_accuracy
        );
        assert!(out.losses[out.losses.len() - 1] < out.losses[0]);
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let a = generate_dataset(120, 7);
        let b = generate_dataset(120, 7);
        assert_eq!(a.len(), 120);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
        let c = generate_dataset(120, 8);
        assert!(a.iter().zip(&c).any(|(x, y)| x.features != y.features));
    }

    #[test]
    fn dataset_labels_are_one_hot() {
        assert_eq!(generate_dataset(1, 1).len(), 1);
        let data = generate_dataset(50, 1);
        assert!(!data.is_empty());
        for s in &data {
            let ones = s.label.iter().filter(|v| **v == 1.0).count();
            let zeros = s.label.iter().filter(|v| **v == 0.0).count();
            assert_eq!((ones, zeros), (1, 2));
        }
    }

    #[test]
    fn full_prune_labels_under_approx() {
        // (x1 - x2)^2 + 1/2 is strictly positive but the cancellation blinds
        // the per-term fast bound, so the region is feature-ambiguous. The
        // under-approximation prunes everything, split can at best tie, and
        // the tie breaks in action order.
        let p = Polynomial::new(
            2,
            [
                (vec![2, 0], 1.0),
                (vec![0, 2], 1.0),
                (vec![1, 1], -2.0),
                (vec![0, 0], 0.5),
            ],
        )
        .unwrap();
        let region = IntervalBox::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let ref_w = region.widths();
        match label_region(&p, &region, &ref_w).unwrap() {
            RegionVisit::Labeled(inst, _) => {
                assert_eq!(Action::from_index(inst.label), Action::UnderApprox)
            }
            _ => panic!("expected a labelled instance"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let data = generate_dataset(30, 4);
        let text = dataset_to_csv(&data);
        let back = dataset_from_csv(&text).unwrap();
        assert_eq!(data.len(), back.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.label_index(), b.label_index());
        }
        assert!(dataset_from_csv("f1,f2,f3,f4,label\n1,2,3\n").is_err());
    }

    #[test]
    fn trained_guide_beats_chance_on_held_out_data() {
        let train_data = generate_dataset(4000, 11);
        let test_data = generate_dataset(400, 99);
        let cfg = TrainConfig {
            epochs: 60,
            seed: 5,
            ..TrainConfig::default()
        };
        let model = train(&train_data, &test_data, &cfg);
        let acc = evaluate_accuracy(&model, &test_data);
        assert!(acc > 0.55, "held-out accuracy {acc}");
    }

    #[test]
    fn accuracy_on_self_labelled_data_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mlp = Mlp::he_init(&GUIDE_DIMS, &mut rng);
        let model = GuideModel::from_parts(mlp, Normalizer::identity(4), ModelMeta::default());
        let data: Vec<GuideSample> = (0..200)
            .map(|_| {
                let features = [
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ];
                let f = EnclosureFeatures {
                    p_min: features[0],
                    p_max: features[1],
                    grad_min: features[2],
                    grad_max: features[3],
                };
                let mut label = [0.0; 3];
                label[model.action(&f).index()] = 1.0;
                GuideSample { features, label }
            })
            .collect();
        assert_eq!(evaluate_accuracy(&model, &data), 1.0);
    }

    #[test]
    fn uniform_model_scores_one_class_share() {
        // All-zero weights output exactly (1/3, 1/3, 1/3); the argmax tie
        // resolves to the first action, so accuracy equals that label's
        // share of a balanced set.
        let model = GuideModel::from_parts(
            Mlp::zeros(&GUIDE_DIMS),
            Normalizer::identity(4),
            ModelMeta::default(),
        );
        let data: Vec<GuideSample> = (0..300)
            .map(|i| {
                let mut label = [0.0; 3];
                label[i % 3] = 1.0;
                GuideSample {
                    features: [i as f64, 1.0, -1.0, 0.5],
                    label,
                }
            })
            .collect();
        let acc = evaluate_accuracy(&model, &data);
        assert!((acc - 1.0 / 3.0).abs() < 1e-12, "accuracy {acc}");
    }

    #[test]
    fn loss_descends_on_generated_data() {
        let data = generate_dataset(600, 13);
        let feats: Vec<Vec<f64>> = data.iter().map(|s| s.features.to_vec()).collect();
        let labels: Vec<usize> = data.iter().map(GuideSample::label_index).collect();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train_mlp(&GUIDE_DIMS, &feats, &labels, &[], &[], &cfg);
        assert!(
            out.first_epoch_loss < out.initial_loss,
            "epoch 1 loss {} not below initial {}",
            out.first_epoch_loss,
            out.initial_loss
        );
        assert!(out.losses.last().unwrap() < &out.losses[0]);
    }

    #[test]
    fn normalizer_centers_training_features() {
        let data = generate_dataset(500, 2);
        let feats: Vec<Vec<f64>> = data.iter().map(|s| s.features.to_vec()).collect();
        let norm = Normalizer::fit(&feats);
        let normalized: Vec<Vec<f64>> = feats.iter().map(|f| norm.apply(f)).collect();
        for j in 0..4 {
            let mean: f64 = normalized.iter().map(|f| f[j]).sum::<f64>() / normalized.len() as f64;
            let var: f64 = normalized.iter().map(|f| f[j] * f[j]).sum::<f64>()
                / normalized.len() as f64
                - mean * mean;
            assert!(mean.abs() < 1e-6, "component {j} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "component {j} std");
        }
    }

    #[test]
    fn training_is_seed_reproducible() {
        let data = generate_dataset(400, 31);
        let cfg = TrainConfig {
            epochs: 8,
            seed: 17,
            ..TrainConfig::default()
        };
        let m1 = train(&data[..320], &data[320..], &cfg);
        let m2 = train(&data[..320], &data[320..], &cfg);
        let j1 = serde_json::to_string(&m1).unwrap();
        let j2 = serde_json::to_string(&m2).unwrap();
        assert_eq!(j1, j2);
    }
}
