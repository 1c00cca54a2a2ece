//! Multi-threaded rollout collection.

use prefrl_core::gridworld::EnvConfig;
use prefrl_core::policy::{run_episode, EpisodeRecord, EpisodeRunner, PolicyError, PolicyParameters};

/// Runs each batch of episodes on `workers` scoped threads sharing a
/// read-only policy snapshot. Records come back in seed order, so traces do
/// not depend on the worker count.
#[derive(Debug, Clone, Copy)]
pub struct ThreadedRunner {
    pub workers: usize,
}

impl ThreadedRunner {
    pub fn new(workers: usize) -> Self {
        ThreadedRunner { workers: workers.max(1) }
    }
}

impl EpisodeRunner for ThreadedRunner {
    fn parallelism(&self) -> usize {
        self.workers
    }

    fn run(&self, params: &PolicyParameters, env: &EnvConfig, seeds: &[u64]) -> Result<Vec<EpisodeRecord>, PolicyError> {
        if self.workers <= 1 || seeds.len() <= 1 {
            return seeds.iter().map(|&s| run_episode(params, env, s)).collect();
        }
        let chunk = seeds.len().div_ceil(self.workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = seeds
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|&s| run_episode(params, env, s)).collect::<Vec<_>>()))
                .collect();
            let mut out = Vec::with_capacity(seeds.len());
            for h in handles {
                for r in h.join().expect("rollout worker panicked") {
                    out.push(r?);
                }
            }
            Ok(out)
        })
    }
}
