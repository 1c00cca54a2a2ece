//! PPO with episodic rewards and the baseline trainers.
//!
//! Rewards are attached to the final transition of each episode and all
//! earlier rewards are zero. Where that scalar comes from is the
//! [`RewardSource`]: the environment, the shaped baseline, a trained
//! [`RewardPredictor`] (standardized on the fly), or the environment reward
//! minus a Lagrange penalty on the key-drop constraint.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::gridworld::{
    self, Action, CellKind, EnvConfig, GridError, Observation, Outcome, Policy, RandomPolicy, VIEW_CELLS,
};
use crate::interpreter::{features, summarize, TrajectorySummary};
use crate::math;
use crate::nn::{clip_global_norm, Activations, Adam, Input, Mlp};
use crate::reward_model::{RewardNormalizer, RewardPredictor};
use crate::seed::{self, streams, Rng};

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyError {
    Env(GridError),
    EmptyBatch,
    InvalidConfig(&'static str),
    MissingPredictor,
    EncoderMismatch,
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::Env(e) => write!(f, "environment error: {e}"),
            PolicyError::EmptyBatch => f.write_str("rollout batch contains no transitions"),
            PolicyError::InvalidConfig(why) => write!(f, "invalid PPO config: {why}"),
            PolicyError::MissingPredictor => f.write_str("predictor reward requested without a fitted model"),
            PolicyError::EncoderMismatch => f.write_str("policy encoder does not match the constraint setting"),
        }
    }
}

impl core::error::Error for PolicyError {}

impl From<GridError> for PolicyError {
    fn from(e: GridError) -> Self {
        PolicyError::Env(e)
    }
}

/// Target number of key drops; violation cost is the squared difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub target_key_drops: u32,
}

impl ConstraintSpec {
    pub fn new(target_key_drops: u32) -> Self {
        ConstraintSpec { target_key_drops }
    }

    pub fn deviation(&self, summary: &TrajectorySummary) -> u32 {
        summary.key_drops.abs_diff(self.target_key_drops)
    }

    pub fn cost(&self, summary: &TrajectorySummary) -> f64 {
        let d = f64::from(self.deviation(summary));
        d * d
    }

    /// Sentence appended to the oracle prompt.
    pub fn prompt_sentence(&self) -> String {
        const WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
        let n = match WORDS.get(self.target_key_drops as usize) {
            Some(word) => String::from(*word),
            None => format!("{}", self.target_key_drops),
        };
        format!("We aim for the agent to drop the key exactly {n} times, with closer to {n} being more desirable.")
    }
}

/// One-hot encoding of an observation: 8 cell kinds for each of the 49 view
/// cells, then the carrying flag, then (with `drop_counter`) a one-hot of the
/// drops made so far, saturating at [`ObservationEncoder::DROP_BUCKETS`] - 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationEncoder {
    pub drop_counter: bool,
}

impl ObservationEncoder {
    pub const DROP_BUCKETS: usize = 8;
    const CARRY_INDEX: usize = VIEW_CELLS * CellKind::COUNT;

    pub fn dim(&self) -> usize {
        Self::CARRY_INDEX + 1 + if self.drop_counter { Self::DROP_BUCKETS } else { 0 }
    }

    /// Appends the indices of the active (one-valued) inputs.
    pub fn encode_into(&self, obs: &Observation, out: &mut Vec<u32>) {
        for (i, &code) in obs.grid.iter().enumerate() {
            out.push((i * CellKind::COUNT + code as usize) as u32);
        }
        if obs.carrying_key {
            out.push(Self::CARRY_INDEX as u32);
        }
        if self.drop_counter {
            let bucket = (obs.key_drops as usize).min(Self::DROP_BUCKETS - 1);
            out.push((Self::CARRY_INDEX + 1 + bucket) as u32);
        }
    }

    pub fn encode_dense(&self, obs: &Observation) -> Vec<f64> {
        let mut active = Vec::new();
        self.encode_into(obs, &mut active);
        let mut dense = vec![0.0; self.dim()];
        for j in active {
            dense[j as usize] = 1.0;
        }
        dense
    }
}

/// Actor and critic networks over encoded observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub encoder: ObservationEncoder,
    pub actor: Mlp,
    pub critic: Mlp,
}

impl PolicyParameters {
    pub fn new(encoder: ObservationEncoder, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = seed::derived_rng(seed, streams::INIT, 1);
        let dim = encoder.dim();
        PolicyParameters {
            encoder,
            actor: Mlp::new(&[dim, hidden_dim, hidden_dim, Action::COUNT], 0.01, &mut rng),
            critic: Mlp::new(&[dim, hidden_dim, hidden_dim, 1], 1.0, &mut rng),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let dim = self.encoder.dim();
        if self.actor.input_dim() != dim
            || self.critic.input_dim() != dim
            || self.actor.output_dim() != Action::COUNT
            || self.critic.output_dim() != 1
        {
            return Err(PolicyError::EncoderMismatch);
        }
        Ok(())
    }

    /// Action probabilities.
    pub fn action_distribution(&self, obs: &Observation) -> [f64; Action::COUNT] {
        let mut active = Vec::with_capacity(VIEW_CELLS + 2);
        self.encoder.encode_into(obs, &mut active);
        let mut acts = Activations::default();
        self.actor.forward(Input::OneHot(&active), &mut acts);
        let mut probs = [0.0; Action::COUNT];
        probs.copy_from_slice(acts.output());
        math::softmax_in_place(&mut probs);
        probs
    }

    pub fn value(&self, obs: &Observation) -> f64 {
        let mut active = Vec::with_capacity(VIEW_CELLS + 2);
        self.encoder.encode_into(obs, &mut active);
        self.critic.predict(Input::OneHot(&active))[0]
    }
}

fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl Policy for PolicyParameters {
    fn act(&self, obs: &Observation, rng: &mut Rng) -> Action {
        let probs = self.action_distribution(obs);
        Action::ALL[sample_categorical(&probs, rng)]
    }
}

/// Where the terminal reward comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSource {
    Environment,
    /// Environment reward on success, minus the episode length on failure.
    Shaped,
    Predictor { model: RewardPredictor },
    LagrangeEnv { multiplier: f64 },
}

impl RewardSource {
    pub fn label(&self) -> &'static str {
        match self {
            RewardSource::Environment => "original",
            RewardSource::Shaped => "shaped",
            RewardSource::Predictor { .. } => "predictor",
            RewardSource::LagrangeEnv { .. } => "lagrange",
        }
    }
}

/// Terminal reward of a finished episode. Predictor rewards are folded into
/// `normalizer` and returned standardized.
pub fn episode_reward(
    source: &RewardSource,
    summary: &TrajectorySummary,
    env_reward: f64,
    constraint: Option<&ConstraintSpec>,
    normalizer: &mut RewardNormalizer,
) -> f64 {
    match source {
        RewardSource::Environment => env_reward,
        RewardSource::Shaped => {
            if summary.success {
                env_reward
            } else {
                -f64::from(summary.steps)
            }
        }
        RewardSource::Predictor { model } => {
            let raw = model.predict(&features(summary)).expect("predictor matches the task");
            normalizer.observe_and_normalize(raw)
        }
        RewardSource::LagrangeEnv { multiplier } => {
            env_reward - multiplier * constraint.map_or(0.0, |c| c.cost(summary))
        }
    }
}

/// Discounted return of every step, computed right to left.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Generalized advantage estimates and value targets for one episode that
/// ends in a terminal state (no bootstrap after the last step).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, returns)
}

/// One on-policy episode with everything PPO needs.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// Active input indices of all steps, concatenated.
    pub inputs: Vec<u32>,
    /// `inputs[offsets[t]..offsets[t + 1]]` belongs to step `t`.
    pub offsets: Vec<usize>,
    pub actions: Vec<u8>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub summary: TrajectorySummary,
    pub env_reward: f64,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Plays one episode with `params`, recording log-probabilities and values.
pub fn run_episode(params: &PolicyParameters, env: &EnvConfig, episode_seed: u64) -> Result<EpisodeRecord, PolicyError> {
    let (mut state, mut obs) = env.reset(episode_seed)?;
    let mut rng = seed::derived_rng(episode_seed, streams::ACTIONS, 0);
    let mut rec = EpisodeRecord {
        inputs: Vec::new(),
        offsets: vec![0],
        actions: Vec::new(),
        log_probs: Vec::new(),
        values: Vec::new(),
        summary: TrajectorySummary::unlock(false, 0, env.max_steps, 0),
        env_reward: 0.0,
    };
    let (mut actor_acts, mut critic_acts) = (Activations::default(), Activations::default());
    let mut drops = 0;
    let mut crossed = false;
    loop {
        let start = rec.inputs.len();
        params.encoder.encode_into(&obs, &mut rec.inputs);
        let active = &rec.inputs[start..];
        params.actor.forward(Input::OneHot(active), &mut actor_acts);
        params.critic.forward(Input::OneHot(active), &mut critic_acts);
        let mut probs = [0.0; Action::COUNT];
        probs.copy_from_slice(actor_acts.output());
        math::softmax_in_place(&mut probs);
        let a = sample_categorical(&probs, &mut rng);
        rec.offsets.push(rec.inputs.len());
        rec.actions.push(a as u8);
        rec.log_probs.push(math::ln(probs[a]));
        rec.values.push(critic_acts.output()[0]);
        let result = state.step(Action::ALL[a])?;
        for e in &result.events {
            match e {
                gridworld::Event::KeyDropped => drops += 1,
                gridworld::Event::CrossedLava => crossed = true,
                _ => {}
            }
        }
        obs = result.observation;
        if result.terminated {
            rec.env_reward = result.env_reward;
            break;
        }
    }
    rec.summary = TrajectorySummary {
        task: env.task,
        success: state.outcome == Outcome::Success,
        steps: rec.actions.len() as u32,
        max_steps: env.max_steps,
        key_drops: drops,
        fell_in_lava: state.outcome == Outcome::LavaDeath,
        crossed_lava: crossed,
    };
    Ok(rec)
}

/// Executes batches of episodes. Implementations may run them concurrently
/// but must return records in the order of `seeds`.
pub trait EpisodeRunner {
    fn parallelism(&self) -> usize {
        1
    }

    fn run(&self, params: &PolicyParameters, env: &EnvConfig, seeds: &[u64]) -> Result<Vec<EpisodeRecord>, PolicyError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialRunner;

impl EpisodeRunner for SequentialRunner {
    fn run(&self, params: &PolicyParameters, env: &EnvConfig, seeds: &[u64]) -> Result<Vec<EpisodeRecord>, PolicyError> {
        seeds.iter().map(|&s| run_episode(params, env, s)).collect()
    }
}

/// Flattened transitions of whole episodes with their advantage targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub inputs: Vec<u32>,
    pub offsets: Vec<usize>,
    pub actions: Vec<u8>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Reward of every transition; only episode ends are nonzero.
    pub rewards: Vec<f64>,
}

impl RolloutBatch {
    /// Builds a batch from episodes and their terminal rewards.
    pub fn from_episodes(episodes: &[EpisodeRecord], terminal_rewards: &[f64], gamma: f64, gae_lambda: f64) -> Self {
        let mut batch = RolloutBatch { offsets: vec![0], ..Default::default() };
        for (ep, &terminal) in episodes.iter().zip(terminal_rewards) {
            let mut rewards = vec![0.0; ep.len()];
            if let Some(last) = rewards.last_mut() {
                *last = terminal;
            }
            let (adv, ret) = gae(&rewards, &ep.values, gamma, gae_lambda);
            let base = batch.inputs.len();
            batch.inputs.extend_from_slice(&ep.inputs);
            batch.offsets.extend(ep.offsets[1..].iter().map(|o| o + base));
            batch.actions.extend_from_slice(&ep.actions);
            batch.old_log_probs.extend_from_slice(&ep.log_probs);
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
            batch.rewards.extend(rewards);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn input(&self, t: usize) -> &[u32] {
        &self.inputs[self.offsets[t]..self.offsets[t + 1]]
    }
}

/// Fixed-multiplier Lagrange runs can optionally adapt the multiplier by dual
/// ascent on the mean batch cost. Off unless configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualAscent {
    pub learning_rate: f64,
    pub cost_limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Transitions collected per update, rounded up to whole episodes.
    pub steps_per_update: usize,
    pub max_grad_norm: f64,
    pub hidden_dim: usize,
    pub normalize_advantages: bool,
    pub total_env_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub checkpoint_interval: Option<u64>,
    pub dual_ascent: Option<DualAscent>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 3e-4,
            epochs: 4,
            minibatch_size: 256,
            steps_per_update: 2048,
            max_grad_norm: 0.5,
            hidden_dim: 64,
            normalize_advantages: false,
            total_env_steps: 100_000,
            eval_interval: 5_000,
            eval_episodes: 64,
            checkpoint_interval: None,
            dual_ascent: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |why| Err(PolicyError::InvalidConfig(why));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0) || !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("clip_epsilon, learning_rate and max_grad_norm must be positive");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.steps_per_update == 0 || self.hidden_dim == 0 {
            return bad("epochs, minibatch_size, steps_per_update and hidden_dim must be positive");
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("eval_interval and eval_episodes must be positive");
        }
        if self.total_env_steps % self.eval_interval != 0 {
            return bad("total_env_steps must be a multiple of eval_interval");
        }
        if self.checkpoint_interval == Some(0) {
            return bad("checkpoint_interval must be positive");
        }
        Ok(())
    }
}

/// Loss components of one PPO objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl PpoStats {
    pub fn total(&self, config: &PpoConfig) -> f64 {
        self.policy_loss + config.value_coef * self.value_loss - config.entropy_coef * self.entropy
    }
}

/// Clipped-surrogate objective over `indices` of `batch`, accumulating its
/// gradient into `actor_grad` and `critic_grad`.
///
/// Loss = `-mean(min(ratio * A, clip(ratio) * A))`
///      + `value_coef * 0.5 * mean((V - R)^2)` - `entropy_coef * mean(H)`.
pub fn ppo_objective(
    params: &PolicyParameters,
    batch: &RolloutBatch,
    indices: &[usize],
    config: &PpoConfig,
    actor_grad: &mut [f64],
    critic_grad: &mut [f64],
) -> PpoStats {
    let n = indices.len() as f64;
    let (adv_mean, adv_std) = if config.normalize_advantages && indices.len() > 1 {
        let mean = indices.iter().map(|&i| batch.advantages[i]).sum::<f64>() / n;
        let var = indices.iter().map(|&i| (batch.advantages[i] - mean) * (batch.advantages[i] - mean)).sum::<f64>() / n;
        (mean, math::sqrt(var) + 1e-8)
    } else {
        (0.0, 1.0)
    };
    let (lo, hi) = (1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon);
    let mut stats = PpoStats::default();
    let (mut actor_acts, mut critic_acts) = (Activations::default(), Activations::default());
    let mut d_logits = [0.0; Action::COUNT];
    for &i in indices {
        let input = Input::OneHot(batch.input(i));
        params.actor.forward(input, &mut actor_acts);
        let mut log_probs = [0.0; Action::COUNT];
        log_probs.copy_from_slice(actor_acts.output());
        let mut probs = log_probs;
        let lse = math::softmax_in_place(&mut probs);
        for lp in log_probs.iter_mut() {
            *lp -= lse;
        }
        let a = batch.actions[i] as usize;
        let advantage = (batch.advantages[i] - adv_mean) / adv_std;
        let log_ratio = log_probs[a] - batch.old_log_probs[i];
        let ratio = math::exp(log_ratio);
        let unclipped = ratio * advantage;
        let clipped = ratio.clamp(lo, hi) * advantage;
        stats.policy_loss -= unclipped.min(clipped) / n;
        stats.approx_kl -= log_ratio / n;
        if ratio < lo || ratio > hi {
            stats.clip_fraction += 1.0 / n;
        }
        // The gradient flows through the unclipped branch only when it is
        // the smaller one; otherwise the objective is constant in ratio.
        let d_log_prob = if unclipped <= clipped { -unclipped / n } else { 0.0 };
        let entropy: f64 = -probs.iter().zip(&log_probs).map(|(p, lp)| p * lp).sum::<f64>();
        stats.entropy += entropy / n;
        for k in 0..Action::COUNT {
            let indicator = if k == a { 1.0 } else { 0.0 };
            d_logits[k] = d_log_prob * (indicator - probs[k])
                + config.entropy_coef * probs[k] * (log_probs[k] + entropy) / n;
        }
        params.actor.backward(input, &actor_acts, &d_logits, actor_grad);

        params.critic.forward(input, &mut critic_acts);
        let err = critic_acts.output()[0] - batch.returns[i];
        stats.value_loss += 0.5 * err * err / n;
        params.critic.backward(input, &critic_acts, &[config.value_coef * err / n], critic_grad);
    }
    stats
}

/// Owns the policy and its optimizer state across updates.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoLearner {
    pub params: PolicyParameters,
    pub config: PpoConfig,
    actor_opt: Adam,
    critic_opt: Adam,
    updates: u64,
    seed: u64,
}

impl PpoLearner {
    pub fn new(params: PolicyParameters, config: PpoConfig, seed: u64) -> Self {
        let actor_opt = Adam::new(params.actor.num_params(), config.learning_rate);
        let critic_opt = Adam::new(params.critic.num_params(), config.learning_rate);
        PpoLearner { params, config, actor_opt, critic_opt, updates: 0, seed }
    }

    /// Runs `config.epochs` passes of shuffled minibatch updates and returns
    /// the statistics averaged over minibatches.
    pub fn update(&mut self, batch: &RolloutBatch) -> Result<PpoStats, PolicyError> {
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let mut rng = seed::derived_rng(self.seed, streams::MINIBATCH, self.updates);
        self.updates += 1;
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut actor_grad = self.params.actor.zero_grad();
        let mut critic_grad = self.params.critic.zero_grad();
        let mut mean = PpoStats::default();
        let mut count = 0.0;
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.minibatch_size) {
                actor_grad.fill(0.0);
                critic_grad.fill(0.0);
                let s = ppo_objective(&self.params, batch, chunk, &self.config, &mut actor_grad, &mut critic_grad);
                clip_global_norm(&mut [&mut actor_grad, &mut critic_grad], self.config.max_grad_norm);
                self.actor_opt.step(self.params.actor.params_mut(), &actor_grad);
                self.critic_opt.step(self.params.critic.params_mut(), &critic_grad);
                mean.policy_loss += s.policy_loss;
                mean.value_loss += s.value_loss;
                mean.entropy += s.entropy;
                mean.approx_kl += s.approx_kl;
                mean.clip_fraction += s.clip_fraction;
                count += 1.0;
            }
        }
        mean.policy_loss /= count;
        mean.value_loss /= count;
        mean.entropy /= count;
        mean.approx_kl /= count;
        mean.clip_fraction /= count;
        Ok(mean)
    }
}

/// One evaluation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub success_rate: f64,
    pub env_reward_mean: f64,
    /// Raw (unstandardized) predictor output, when a predictor is available.
    pub predictor_reward_mean: Option<f64>,
    pub key_drops_mean: f64,
    /// Mean constraint cost, when a constraint is active.
    pub cost_mean: Option<f64>,
    /// Mean absolute deviation from the target drop count.
    pub deviation_mean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTrace {
    pub fn grid(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.env_steps).collect()
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn at(&self, env_steps: u64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.env_steps == env_steps)
    }

    /// First grid point whose success rate reaches `threshold`.
    pub fn first_reaching(&self, threshold: f64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.success_rate >= threshold)
    }
}

/// Evaluates `policy` on `episodes` episodes whose seeds depend only on
/// `seed` and `window`, so runs of different methods see the same layouts.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    env: &EnvConfig,
    constraint: Option<&ConstraintSpec>,
    predictor: Option<&RewardPredictor>,
    seed: u64,
    window: u64,
    episodes: usize,
) -> Result<MetricsRow, PolicyError> {
    let window_seed = seed::derive(seed, streams::EVAL_EPISODES, window);
    let mut successes = 0usize;
    let (mut env_reward, mut predicted, mut drops, mut cost, mut deviation) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..episodes {
        let trajectory = gridworld::rollout(policy, env, seed::derive(window_seed, streams::EVAL_EPISODES, i as u64))?;
        let summary = summarize(&trajectory).expect("rollouts run to termination");
        successes += usize::from(summary.success);
        env_reward += trajectory.env_reward();
        drops += f64::from(summary.key_drops);
        if let Some(model) = predictor {
            predicted += model.predict(&features(&summary)).expect("predictor matches the task");
        }
        if let Some(c) = constraint {
            cost += c.cost(&summary);
            deviation += f64::from(c.deviation(&summary));
        }
    }
    let n = episodes as f64;
    Ok(MetricsRow {
        env_steps: 0,
        success_rate: successes as f64 / n,
        env_reward_mean: env_reward / n,
        predictor_reward_mean: predictor.map(|_| predicted / n),
        key_drops_mean: drops / n,
        cost_mean: constraint.map(|_| cost / n),
        deviation_mean: constraint.map(|_| deviation / n),
    })
}

/// Everything that defines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub env: EnvConfig,
    pub source: RewardSource,
    pub constraint: Option<ConstraintSpec>,
    pub config: PpoConfig,
    pub seed: u64,
    /// Predictor used only to report `predictor_reward_mean` for sources
    /// that do not carry one.
    pub eval_predictor: Option<RewardPredictor>,
}

impl TrainSpec {
    pub fn new(env: EnvConfig, source: RewardSource, constraint: Option<ConstraintSpec>, config: PpoConfig, seed: u64) -> Self {
        TrainSpec { env, source, constraint, config, seed, eval_predictor: None }
    }

    pub fn encoder(&self) -> ObservationEncoder {
        ObservationEncoder { drop_counter: self.constraint.is_some() }
    }

    fn report_predictor(&self) -> Option<&RewardPredictor> {
        match &self.source {
            RewardSource::Predictor { model } => Some(model),
            _ => self.eval_predictor.as_ref(),
        }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        self.config.validate()?;
        self.env.validate()?;
        if let RewardSource::Predictor { model } = &self.source {
            if model.task != self.env.task {
                return Err(PolicyError::MissingPredictor);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: PolicyParameters,
    pub trace: MetricsTrace,
    /// Policy snapshots at multiples of `checkpoint_interval`.
    pub checkpoints: Vec<(u64, PolicyParameters)>,
    pub update_stats: Vec<PpoStats>,
    pub final_multiplier: Option<f64>,
}

pub fn train(spec: &TrainSpec) -> Result<TrainOutput, PolicyError> {
    train_with_runner(spec, &SequentialRunner)
}

/// Rollout, terminal reward, PPO update, repeated until the step budget is
/// spent; evaluates after every update that crosses an evaluation boundary.
pub fn train_with_runner(spec: &TrainSpec, runner: &dyn EpisodeRunner) -> Result<TrainOutput, PolicyError> {
    spec.validate()?;
    let config = &spec.config;
    let params = PolicyParameters::new(spec.encoder(), config.hidden_dim, spec.seed);
    let mut learner = PpoLearner::new(params, *config, spec.seed);
    let mut source = spec.source.clone();
    let mut normalizer = RewardNormalizer::default();
    let constraint = spec.constraint.as_ref();
    let report_predictor = spec.report_predictor();

    let mut trace = MetricsTrace::default();
    let mut checkpoints = Vec::new();
    let mut update_stats = Vec::new();
    let mut eval_window = 0u64;
    let record = |learner: &PpoLearner, trace: &mut MetricsTrace, window: u64| -> Result<(), PolicyError> {
        let mut row = evaluate(
            &learner.params,
            &spec.env,
            constraint,
            report_predictor,
            spec.seed,
            window,
            config.eval_episodes,
        )?;
        row.env_steps = window * config.eval_interval;
        trace.rows.push(row);
        Ok(())
    };
    record(&learner, &mut trace, eval_window)?;
    eval_window += 1;

    let mut env_steps = 0u64;
    let mut next_episode = 0u64;
    let mut next_checkpoint = config.checkpoint_interval;
    while env_steps < config.total_env_steps {
        let budget = (config.steps_per_update as u64).min(config.total_env_steps - env_steps) as usize;
        let mut episodes = Vec::new();
        let mut collected = 0usize;
        while collected < budget {
            let seeds: Vec<u64> = (0..runner.parallelism().max(1) as u64)
                .map(|k| seed::derive(spec.seed, streams::TRAIN_EPISODES, next_episode + k))
                .collect();
            for rec in runner.run(&learner.params, &spec.env, &seeds)? {
                if collected >= budget {
                    break;
                }
                collected += rec.len();
                episodes.push(rec);
                next_episode += 1;
            }
        }
        env_steps += collected as u64;

        let terminal: Vec<f64> = episodes
            .iter()
            .map(|e| episode_reward(&source, &e.summary, e.env_reward, constraint, &mut normalizer))
            .collect();
        let batch = RolloutBatch::from_episodes(&episodes, &terminal, config.gamma, config.gae_lambda);
        update_stats.push(learner.update(&batch)?);

        if let (Some(dual), RewardSource::LagrangeEnv { multiplier }, Some(c)) =
            (config.dual_ascent, &mut source, constraint)
        {
            let mean_cost = episodes.iter().map(|e| c.cost(&e.summary)).sum::<f64>() / episodes.len() as f64;
            *multiplier = (*multiplier + dual.learning_rate * (mean_cost - dual.cost_limit)).max(0.0);
        }
        while let Some(at) = next_checkpoint.filter(|&at| at <= env_steps) {
            checkpoints.push((at, learner.params.clone()));
            next_checkpoint = Some(at + config.checkpoint_interval.unwrap_or(u64::MAX));
        }
        while eval_window * config.eval_interval <= env_steps {
            record(&learner, &mut trace, eval_window)?;
            eval_window += 1;
        }
    }
    let final_multiplier = match source {
        RewardSource::LagrangeEnv { multiplier } => Some(multiplier),
        _ => None,
    };
    Ok(TrainOutput { params: learner.params, trace, checkpoints, update_stats, final_multiplier })
}

/// The random baseline on the same evaluation grid: no learning, episodes
/// only advance the step counter.
pub fn train_random(spec: &TrainSpec) -> Result<MetricsTrace, PolicyError> {
    spec.validate()?;
    let config = &spec.config;
    let constraint = spec.constraint.as_ref();
    let predictor = spec.report_predictor();
    let mut trace = MetricsTrace::default();
    let mut env_steps = 0u64;
    let mut next_episode = 0u64;
    let mut window = 0u64;
    loop {
        while window * config.eval_interval <= env_steps && window * config.eval_interval <= config.total_env_steps {
            let mut row = evaluate(&RandomPolicy, &spec.env, constraint, predictor, spec.seed, window, config.eval_episodes)?;
            row.env_steps = window * config.eval_interval;
            trace.rows.push(row);
            window += 1;
        }
        if env_steps >= config.total_env_steps {
            break;
        }
        let seed = seed::derive(spec.seed, streams::TRAIN_EPISODES, next_episode);
        next_episode += 1;
        env_steps += gridworld::rollout(&RandomPolicy, &spec.env, seed)?.len() as u64;
    }
    Ok(trace)
}

/// One fixed-multiplier Lagrange run per multiplier, same seed for all.
pub fn lagrange_sweep(
    env: &EnvConfig,
    constraint: ConstraintSpec,
    multipliers: &[f64],
    config: &PpoConfig,
    seed: u64,
) -> Result<Vec<(f64, MetricsTrace)>, PolicyError> {
    if multipliers.is_empty() {
        return Err(PolicyError::InvalidConfig("multiplier list is empty"));
    }
    multipliers
        .iter()
        .map(|&m| {
            let spec = TrainSpec::new(*env, RewardSource::LagrangeEnv { multiplier: m }, Some(constraint), *config, seed);
            train(&spec).map(|out| (m, out.trace))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::TaskId;

    #[test]
    fn constraint_cost() {
        let c = ConstraintSpec::new(3);
        let s = |d| TrajectorySummary::unlock(true, 10, 288, d);
        assert_eq!(c.cost(&s(3)), 0.0);
        assert_eq!(c.cost(&s(5)), 4.0);
        assert_eq!(c.cost(&s(0)), 9.0);
        for d in 0..20 {
            assert!(c.cost(&s(d)) >= 0.0);
            assert_eq!(c.cost(&s(d)) == 0.0, d == 3);
        }
        assert_eq!(
            ConstraintSpec::new(3).prompt_sentence(),
            "We aim for the agent to drop the key exactly three times, with closer to three being more desirable."
        );
        assert!(ConstraintSpec::new(12).prompt_sentence().contains("exactly 12 times"));
    }

    #[test]
    fn episode_reward_variants() {
        let mut norm = RewardNormalizer::default();
        let fail = TrajectorySummary::unlock(false, 120, 288, 0);
        assert_eq!(episode_reward(&RewardSource::Shaped, &fail, 0.0, None, &mut norm), -120.0);
        let win = TrajectorySummary::unlock(true, 120, 288, 5);
        assert_eq!(episode_reward(&RewardSource::Shaped, &win, 0.625, None, &mut norm), 0.625);
        assert_eq!(episode_reward(&RewardSource::Environment, &win, 0.625, None, &mut norm), 0.625);
        let c = ConstraintSpec::new(3);
        let lagrange = RewardSource::LagrangeEnv { multiplier: 0.1 };
        let r = episode_reward(&lagrange, &win, 0.5, Some(&c), &mut norm);
        assert!((r - 0.1).abs() < 1e-15);
        let zero = RewardSource::Predictor { model: RewardPredictor::zeros(TaskId::Unlock, 8, 0.0) };
        for s in [fail, win] {
            assert_eq!(episode_reward(&zero, &s, 0.0, None, &mut norm), 0.0);
        }
    }

    #[test]
    fn encoder_layout() {
        let (state, obs) = gridworld::reset(TaskId::Unlock, 3);
        let plain = ObservationEncoder { drop_counter: false };
        let counted = ObservationEncoder { drop_counter: true };
        assert_eq!(plain.dim(), 393);
        assert_eq!(counted.dim(), 401);
        let dense = plain.encode_dense(&obs);
        assert_eq!(dense.iter().sum::<f64>(), 49.0 + f64::from(u8::from(state.carrying_key)));
        let mut obs = obs;
        obs.key_drops = 12;
        obs.carrying_key = true;
        let dense = counted.encode_dense(&obs);
        assert_eq!(dense[392], 1.0);
        assert_eq!(dense[400], 1.0);
    }

    #[test]
    fn discounted_returns_match_brute_force() {
        let mut rng = seed::rng(11);
        for _ in 0..100 {
            let rewards: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gamma = rng.random_range(0.5..1.0);
            let fast = discounted_returns(&rewards, gamma);
            for t in 0..10 {
                let brute: f64 = (t..10).map(|k| libm::pow(gamma, (k - t) as f64) * rewards[k]).sum();
                assert!((fast[t] - brute).abs() < 1e-12);
            }
            let values: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, returns) = gae(&rewards, &values, gamma, 1.0);
            for t in 0..10 {
                assert!((returns[t] - fast[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_rewards_are_terminal_only() {
        let params = PolicyParameters::new(ObservationEncoder { drop_counter: false }, 16, 1);
        let env = EnvConfig::new(TaskId::LavaGapS7);
        let eps: Vec<_> = (0..5).map(|s| run_episode(&params, &env, s).unwrap()).collect();
        let terminal: Vec<f64> = (0..5).map(|i| i as f64 + 1.0).collect();
        let batch = RolloutBatch::from_episodes(&eps, &terminal, 0.99, 0.95);
        let mut t = 0;
        for (ep, &r) in eps.iter().zip(&terminal) {
            for k in 0..ep.len() {
                let expected = if k + 1 == ep.len() { r } else { 0.0 };
                assert_eq!(batch.rewards[t], expected);
                t += 1;
            }
        }
        assert_eq!(t, batch.len());
    }

    #[test]
    fn run_episode_agrees_with_rollout() {
        let params = PolicyParameters::new(ObservationEncoder { drop_counter: true }, 16, 2);
        for task in TaskId::ALL {
            let env = EnvConfig::new(task);
            for seed in 0..5 {
                let rec = run_episode(&params, &env, seed).unwrap();
                let traj = gridworld::rollout(&params, &env, seed).unwrap();
                assert_eq!(rec.summary, summarize(&traj).unwrap());
                let actions: Vec<u8> = traj.steps.iter().map(|(_, a)| a.index() as u8).collect();
                assert_eq!(rec.actions, actions);
            }
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let params = PolicyParameters::new(ObservationEncoder { drop_counter: false }, 8, 0);
        let mut learner = PpoLearner::new(params, PpoConfig::default(), 0);
        assert_eq!(learner.update(&RolloutBatch::default()), Err(PolicyError::EmptyBatch));
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let bad = PpoConfig { total_env_steps: 1234, ..PpoConfig::default() };
        assert!(bad.validate().is_err());
        let bad = PpoConfig { minibatch_size: 0, ..PpoConfig::default() };
        assert!(bad.validate().is_err());
    }
}
