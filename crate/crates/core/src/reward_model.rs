//! Episodic reward predictor fit to pairwise preferences.
//!
//! The predictor maps an episode's summary features to one scalar reward.
//! Preferences are modelled Bradley-Terry style,
//! `P(a > b) = exp(r_a) / (exp(r_a) + exp(r_b))`, and the loss per triple is
//! the cross-entropy against the label distribution `mu` plus
//! `lambda * (r_a^2 + r_b^2)` to keep rewards small.

use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::gridworld::TaskId;
use crate::interpreter::{features, TrajectorySummary};
use crate::math;
use crate::nn::{Activations, Input, Mlp, Momentum};
use crate::oracle::{PreferenceLabel, PreferenceTriple};
use crate::seed::{self, streams};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RewardModelError {
    DimensionMismatch { expected: usize, got: usize },
    EmptyDataset,
    MixedTasks,
    InvalidConfig(&'static str),
}

impl fmt::Display for RewardModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardModelError::DimensionMismatch { expected, got } => {
                write!(f, "feature vector has length {got}, predictor expects {expected}")
            }
            RewardModelError::EmptyDataset => f.write_str("preference dataset is empty"),
            RewardModelError::MixedTasks => f.write_str("preference dataset mixes tasks"),
            RewardModelError::InvalidConfig(why) => write!(f, "invalid reward-model config: {why}"),
        }
    }
}

impl core::error::Error for RewardModelError {}

/// Two-layer network `r = w2 . tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardPredictor {
    pub task: TaskId,
    pub lambda_reg: f64,
    net: Mlp,
}

impl RewardPredictor {
    pub fn new(task: TaskId, hidden_dim: usize, lambda_reg: f64, seed: u64) -> Self {
        let input = TrajectorySummary::feature_dim(task);
        let mut rng = seed::derived_rng(seed, streams::INIT, 0);
        RewardPredictor { task, lambda_reg, net: Mlp::new(&[input, hidden_dim, 1], 1.0, &mut rng) }
    }

    pub fn zeros(task: TaskId, hidden_dim: usize, lambda_reg: f64) -> Self {
        let input = TrajectorySummary::feature_dim(task);
        RewardPredictor { task, lambda_reg, net: Mlp::zeros(&[input, hidden_dim, 1]) }
    }

    pub fn from_network(task: TaskId, lambda_reg: f64, net: Mlp) -> Result<Self, RewardModelError> {
        let expected = TrajectorySummary::feature_dim(task);
        if net.input_dim() != expected || net.output_dim() != 1 || net.layer_count() != 2 {
            return Err(RewardModelError::DimensionMismatch { expected, got: net.input_dim() });
        }
        Ok(RewardPredictor { task, lambda_reg, net })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.net.sizes()[1]
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64, RewardModelError> {
        if features.len() != self.input_dim() {
            return Err(RewardModelError::DimensionMismatch { expected: self.input_dim(), got: features.len() });
        }
        Ok(self.predict_unchecked(features))
    }

    fn predict_unchecked(&self, features: &[f64]) -> f64 {
        self.net.predict(Input::Dense(features))[0]
    }

    pub fn predict_summary(&self, summary: &TrajectorySummary) -> Result<f64, RewardModelError> {
        self.predict(&features(summary))
    }
}

/// `P(a preferred over b)`; `sigmoid(r_a - r_b)` is the same ratio with the
/// larger exponent factored out.
pub fn pref_probability(r_a: f64, r_b: f64) -> f64 {
    math::sigmoid(r_a - r_b)
}

/// `ln P(a preferred over b)`, finite for all finite inputs.
pub fn log_pref_probability(r_a: f64, r_b: f64) -> f64 {
    -math::softplus(r_b - r_a)
}

/// Loss of one triple given the two predicted rewards.
pub fn triple_loss(r_a: f64, r_b: f64, mu: [f64; 2], lambda: f64) -> f64 {
    cross_entropy(r_a, r_b, mu) + lambda * (r_a * r_a + r_b * r_b)
}

/// Cross-entropy part of [`triple_loss`].
pub fn cross_entropy(r_a: f64, r_b: f64, mu: [f64; 2]) -> f64 {
    -(mu[0] * log_pref_probability(r_a, r_b) + mu[1] * log_pref_probability(r_b, r_a))
}

/// Derivatives of [`triple_loss`] with respect to `r_a` and `r_b`.
pub fn triple_loss_grad(r_a: f64, r_b: f64, mu: [f64; 2], lambda: f64) -> (f64, f64) {
    let p = pref_probability(r_a, r_b);
    // d/d(r_a - r_b) of the cross-entropy is P - mu_a (mu sums to one).
    let d = p - mu[0];
    (d + 2.0 * lambda * r_a, -d + 2.0 * lambda * r_b)
}

/// A triple with its features extracted once.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTriple {
    pub features_a: Vec<f64>,
    pub features_b: Vec<f64>,
    pub mu: [f64; 2],
}

impl PreparedTriple {
    pub fn new(triple: &PreferenceTriple) -> Self {
        PreparedTriple {
            features_a: features(&triple.summary_a),
            features_b: features(&triple.summary_b),
            mu: triple.mu.mu(),
        }
    }
}

/// Mean loss over a batch.
pub fn loss(model: &RewardPredictor, batch: &[PreparedTriple]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|t| {
            triple_loss(model.predict_unchecked(&t.features_a), model.predict_unchecked(&t.features_b), t.mu, model.lambda_reg)
        })
        .sum();
    total / batch.len() as f64
}

/// Mean loss and its gradient with respect to every network parameter.
pub fn loss_and_gradient(model: &RewardPredictor, batch: &[PreparedTriple]) -> (f64, Vec<f64>) {
    let net = &model.net;
    let mut grads = net.zero_grad();
    let (mut acts_a, mut acts_b) = (Activations::default(), Activations::default());
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for t in batch {
        net.forward(Input::Dense(&t.features_a), &mut acts_a);
        net.forward(Input::Dense(&t.features_b), &mut acts_b);
        let (r_a, r_b) = (acts_a.output()[0], acts_b.output()[0]);
        total += triple_loss(r_a, r_b, t.mu, model.lambda_reg);
        let (g_a, g_b) = triple_loss_grad(r_a, r_b, t.mu, model.lambda_reg);
        net.backward(Input::Dense(&t.features_a), &acts_a, &[g_a * scale], &mut grads);
        net.backward(Input::Dense(&t.features_b), &acts_b, &[g_b * scale], &mut grads);
    }
    (total * scale, grads)
}

pub fn gradient(model: &RewardPredictor, batch: &[PreparedTriple]) -> Vec<f64> {
    loss_and_gradient(model, batch).1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub task: TaskId,
    pub triples: Vec<PreferenceTriple>,
}

impl PreferenceDataset {
    pub fn new(task: TaskId, triples: Vec<PreferenceTriple>) -> Result<Self, RewardModelError> {
        let dataset = PreferenceDataset { task, triples };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn validate(&self) -> Result<(), RewardModelError> {
        if self.triples.iter().any(|t| t.summary_a.task != self.task || t.summary_b.task != self.task) {
            return Err(RewardModelError::MixedTasks);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn prepared(&self) -> Vec<PreparedTriple> {
        self.triples.iter().map(PreparedTriple::new).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_reg: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            epochs: 200,
            lambda_reg: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RewardModelError> {
        let bad = |why| Err(RewardModelError::InvalidConfig(why));
        if self.hidden_dim == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("hidden_dim, batch_size and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be positive and momentum in [0, 1)");
        }
        if !(self.lambda_reg >= 0.0) {
            return bad("lambda_reg must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: RewardPredictor,
    /// Full-dataset loss after each epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch momentum descent over shuffled triples. Initialization and
/// shuffling are both seeded from `config.seed`.
pub fn fit(dataset: &PreferenceDataset, config: &TrainConfig) -> Result<FitResult, RewardModelError> {
    config.validate()?;
    dataset.validate()?;
    if dataset.is_empty() {
        return Err(RewardModelError::EmptyDataset);
    }
    let data = dataset.prepared();
    let mut model = RewardPredictor::new(dataset.task, config.hidden_dim, config.lambda_reg, config.seed);
    let mut opt = Momentum::new(model.net.num_params(), config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = seed::derived_rng(config.seed, streams::SHUFFLE, 0);
    let batch_size = config.batch_size.min(data.len());
    let mut batch = Vec::with_capacity(batch_size);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (_, grads) = loss_and_gradient(&model, &batch);
            opt.step(model.net.params_mut(), &grads);
        }
        loss_trace.push(loss(&model, &data));
    }
    Ok(FitResult { model, loss_trace })
}

/// Strictly-preferred pairs ranked correctly by the model, and the number of
/// strictly-preferred pairs. Ties are skipped.
pub fn ranking_accuracy(model: &RewardPredictor, triples: &[PreferenceTriple]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for t in triples {
        let (r_a, r_b) = (
            model.predict_unchecked(&features(&t.summary_a)),
            model.predict_unchecked(&features(&t.summary_b)),
        );
        let ok = match t.mu {
            PreferenceLabel::First => r_a > r_b,
            PreferenceLabel::Second => r_b > r_a,
            PreferenceLabel::Equal => continue,
        };
        total += 1;
        correct += usize::from(ok);
    }
    (correct, total)
}

/// Running mean and standard deviation (Welford) used to standardize
/// predictor rewards before the policy sees them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RewardNormalizer {
    pub const CLIP: f64 = 10.0;
    const EPSILON: f64 = 1e-8;

    pub fn observe(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            math::sqrt(self.m2 / self.count as f64)
        }
    }

    pub fn normalize(&self, value: f64) -> f64 {
        ((value - self.mean) / (self.std() + Self::EPSILON)).clamp(-Self::CLIP, Self::CLIP)
    }

    /// Folds `value` into the statistics, then standardizes it.
    pub fn observe_and_normalize(&mut self, value: f64) -> f64 {
        self.observe(value);
        self.normalize(value)
    }
}
