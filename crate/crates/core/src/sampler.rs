//! Trajectory pairs for preference queries: a mixture of a uniformly random
//! policy and snapshots of an original-reward PPO run, so the pairs cover
//! both hopeless and competent behavior.

use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::gridworld::{rollout, EnvConfig, RandomPolicy, Trajectory};
use crate::interpreter::{summarize, TrajectorySummary};
use crate::oracle::{scripted_compare, PreferenceTriple};
use crate::policy::{train_with_runner, ConstraintSpec, EpisodeRunner, PolicyError, PolicyParameters, PpoConfig, RewardSource, TrainSpec};
use crate::reward_model::PreferenceDataset;
use crate::seed::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Probability that a trajectory comes from the random policy.
    pub random_fraction: f64,
    /// Env steps of the original-reward run that supplies snapshots; 0
    /// disables snapshots and the sampler is purely random.
    pub checkpoint_budget: u64,
    pub checkpoint_interval: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { random_fraction: 0.5, checkpoint_budget: 40_000, checkpoint_interval: 8_000 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(0.0..=1.0).contains(&self.random_fraction) {
            return Err(PolicyError::InvalidConfig("random_fraction must lie in [0, 1]"));
        }
        if self.checkpoint_budget > 0 && (self.checkpoint_interval == 0 || self.checkpoint_budget % self.checkpoint_interval != 0) {
            return Err(PolicyError::InvalidConfig("checkpoint_budget must be a positive multiple of checkpoint_interval"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySampler {
    pub env: EnvConfig,
    pub random_fraction: f64,
    pub checkpoints: Vec<PolicyParameters>,
}

impl TrajectorySampler {
    pub fn random(env: EnvConfig) -> Self {
        TrajectorySampler { env, random_fraction: 1.0, checkpoints: Vec::new() }
    }

    /// Trains the snapshot source with `ppo` (budget and checkpoint interval
    /// taken from `config`) and keeps every snapshot.
    pub fn build(
        env: EnvConfig,
        config: &SamplerConfig,
        ppo: &PpoConfig,
        seed: u64,
        runner: &dyn EpisodeRunner,
    ) -> Result<Self, PolicyError> {
        config.validate()?;
        if config.checkpoint_budget == 0 {
            return Ok(TrajectorySampler::random(env));
        }
        let ppo = PpoConfig {
            total_env_steps: config.checkpoint_budget,
            eval_interval: config.checkpoint_budget,
            eval_episodes: 1,
            checkpoint_interval: Some(config.checkpoint_interval),
            ..*ppo
        };
        let spec = TrainSpec::new(env, RewardSource::Environment, None, ppo, seed::derive(seed, streams::SAMPLER, 0));
        let out = train_with_runner(&spec, runner)?;
        Ok(TrajectorySampler {
            env,
            random_fraction: config.random_fraction,
            checkpoints: out.checkpoints.into_iter().map(|(_, p)| p).collect(),
        })
    }

    /// The `index`-th trajectory of the stream rooted at `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> Result<Trajectory, PolicyError> {
        let mut rng = seed::derived_rng(seed, streams::SAMPLER, index);
        let episode_seed: u64 = rng.random();
        let use_random = self.checkpoints.is_empty() || rng.random::<f64>() < self.random_fraction;
        let trajectory = if use_random {
            rollout(&RandomPolicy, &self.env, episode_seed)?
        } else {
            let policy = &self.checkpoints[rng.random_range(0..self.checkpoints.len())];
            rollout(policy, &self.env, episode_seed)?
        };
        Ok(trajectory)
    }

    /// Pair `m` of the stream: trajectories `2m` and `2m + 1`.
    pub fn sample_pair(&self, seed: u64, m: u64) -> Result<(TrajectorySummary, TrajectorySummary), PolicyError> {
        let summary = |t: Trajectory| summarize(&t).expect("rollouts run to termination");
        Ok((summary(self.sample(seed, 2 * m)?), summary(self.sample(seed, 2 * m + 1)?)))
    }
}

/// `m` pairs labelled by the scripted oracle.
pub fn scripted_dataset(
    sampler: &TrajectorySampler,
    constraint: Option<&ConstraintSpec>,
    m: u64,
    seed: u64,
) -> Result<PreferenceDataset, PolicyError> {
    let triples: Vec<PreferenceTriple> = (0..m)
        .map(|i| {
            let (a, b) = sampler.sample_pair(seed, i)?;
            Ok(scripted_compare(&a, &b, constraint).expect("same task"))
        })
        .collect::<Result<_, PolicyError>>()?;
    Ok(PreferenceDataset { task: sampler.env.task, triples })
}
