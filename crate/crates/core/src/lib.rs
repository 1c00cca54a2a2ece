//! Preference-based reinforcement learning on small gridworld tasks.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is pure
//! computation:
//!
//! - [`gridworld`]: seedable reimplementations of the Unlock and LavaGapS7 tasks.
//! - [`interpreter`]: per-episode summaries, their feature vectors and the
//!   natural-language sentences shown to a preference oracle.
//! - [`oracle`]: prompt assembly, answer parsing and the scripted comparator.
//! - [`reward_model`]: the episodic reward predictor trained from preference
//!   triples with a regularized Bradley-Terry loss.
//! - [`policy`]: actor-critic PPO driven by episodic rewards, the Lagrange
//!   penalty baseline and the random baseline.
//!
//! IO, the LLM client, file formats and the CLI live in the `prefrl` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod gridworld;
pub mod interpreter;
pub mod math;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod reward_model;
pub mod sampler;
pub mod seed;

pub use gridworld::{Action, CellKind, GridState, Observation, Outcome, StepResult, TaskId};
pub use interpreter::TrajectorySummary;
pub use oracle::{PreferenceLabel, PreferenceTriple};
pub use policy::{ConstraintSpec, PolicyParameters, RewardSource};
pub use reward_model::RewardPredictor;
