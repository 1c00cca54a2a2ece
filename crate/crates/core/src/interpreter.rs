//! Turns finished episodes into compact summaries, feature vectors for the
//! reward predictor, and the sentences shown to a preference oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::gridworld::{Event, Outcome, TaskId, Trajectory};

/// Key drops at or above this count map to the maximal feature value.
pub const KEY_DROP_CAP: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub task: TaskId,
    pub success: bool,
    pub steps: u32,
    pub max_steps: u32,
    /// Unlock only; zero for LavaGap.
    pub key_drops: u32,
    /// LavaGap only.
    pub fell_in_lava: bool,
    /// LavaGap only.
    pub crossed_lava: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InterpretError {
    IncompleteTrajectory,
    InconsistentSummary(&'static str),
}

impl fmt::Display for InterpretError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterpretError::IncompleteTrajectory => f.write_str("trajectory has not terminated"),
            InterpretError::InconsistentSummary(why) => write!(f, "inconsistent summary: {why}"),
        }
    }
}

impl core::error::Error for InterpretError {}

impl TrajectorySummary {
    pub fn unlock(success: bool, steps: u32, max_steps: u32, key_drops: u32) -> Self {
        TrajectorySummary {
            task: TaskId::Unlock,
            success,
            steps,
            max_steps,
            key_drops,
            fell_in_lava: false,
            crossed_lava: false,
        }
    }

    pub fn lava_gap(success: bool, steps: u32, max_steps: u32, fell_in_lava: bool, crossed_lava: bool) -> Self {
        TrajectorySummary {
            task: TaskId::LavaGapS7,
            success,
            steps,
            max_steps,
            key_drops: 0,
            fell_in_lava,
            crossed_lava,
        }
    }

    pub fn validate(&self) -> Result<(), InterpretError> {
        let bad = |why| Err(InterpretError::InconsistentSummary(why));
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if self.steps > self.max_steps {
            return bad("steps exceed max_steps");
        }
        if self.success && self.fell_in_lava {
            return bad("a successful episode cannot end in lava");
        }
        match self.task {
            TaskId::Unlock if self.fell_in_lava || self.crossed_lava => bad("unlock has no lava"),
            TaskId::LavaGapS7 if self.key_drops != 0 => bad("lava gap has no key"),
            TaskId::LavaGapS7 if self.success && !self.crossed_lava => bad("success requires crossing the lava"),
            _ => Ok(()),
        }
    }

    /// Feature dimension of the task's reward predictor.
    pub fn feature_dim(task: TaskId) -> usize {
        match task {
            TaskId::Unlock => 3,
            TaskId::LavaGapS7 => 4,
        }
    }
}

/// Feature extraction half of the interpreter.
pub fn summarize(trajectory: &Trajectory) -> Result<TrajectorySummary, InterpretError> {
    let terminated = trajectory.results.last().is_some_and(|r| r.terminated);
    if !terminated || !trajectory.outcome.is_terminal() {
        return Err(InterpretError::IncompleteTrajectory);
    }
    let mut key_drops = 0u32;
    let mut crossed = false;
    for event in trajectory.events() {
        match event {
            Event::KeyDropped => key_drops += 1,
            Event::CrossedLava => crossed = true,
            Event::KeyPickedUp | Event::EnteredLavaRow => {}
        }
    }
    let summary = TrajectorySummary {
        task: trajectory.task,
        success: trajectory.outcome == Outcome::Success,
        steps: trajectory.len() as u32,
        max_steps: trajectory.max_steps,
        key_drops,
        fell_in_lava: trajectory.outcome == Outcome::LavaDeath,
        crossed_lava: crossed,
    };
    summary.validate()?;
    Ok(summary)
}

/// Rule-based narration of a summary.
pub fn render(summary: &TrajectorySummary) -> String {
    let steps = summary.steps;
    match summary.task {
        TaskId::Unlock => {
            let head = if summary.success {
                "the agent successfully got the key and reached the gate."
            } else {
                "the agent failed to reach the gate."
            };
            format!("{head} it took {steps} steps totally and it dropped the key {} times.", summary.key_drops)
        }
        TaskId::LavaGapS7 => {
            let head = match (summary.success, summary.crossed_lava) {
                (true, _) => "the agent successfully crossed the lava and reached the exit.",
                (false, true) => "the agent successfully crossed the lava but failed to reach the exit.",
                (false, false) => "the agent failed to cross the lava and failed to reach the exit.",
            };
            let mut text = format!("{head} it took {steps} steps totally.");
            if summary.fell_in_lava {
                text.push_str(" it fell into the lava and died.");
            }
            text
        }
    }
}

/// Predictor input: `[success, steps/max_steps, min(drops, cap)/cap]` for
/// Unlock, `[success, steps/max_steps, fell_in_lava, crossed_lava]` for LavaGap.
pub fn features(summary: &TrajectorySummary) -> Vec<f64> {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let steps = (f64::from(summary.steps) / f64::from(summary.max_steps.max(1))).min(1.0);
    match summary.task {
        TaskId::Unlock => {
            let drops = f64::from(summary.key_drops.min(KEY_DROP_CAP)) / f64::from(KEY_DROP_CAP);
            alloc::vec![flag(summary.success), steps, drops]
        }
        TaskId::LavaGapS7 => alloc::vec![
            flag(summary.success),
            steps,
            flag(summary.fell_in_lava),
            flag(summary.crossed_lava),
        ],
    }
}
