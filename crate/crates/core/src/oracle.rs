//! Preference labels, prompt assembly, answer parsing and the scripted
//! comparator. Network and terminal oracles live in the `prefrl` crate and
//! reuse everything here.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::gridworld::TaskId;
use crate::interpreter::TrajectorySummary;
use crate::policy::ConstraintSpec;

/// Which trajectory of a pair is preferred. Serialized as the distribution
/// `mu` over the pair: `[1, 0]`, `[0, 1]` or `[0.5, 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[f64; 2]", try_from = "[f64; 2]")]
pub enum PreferenceLabel {
    First,
    Second,
    Equal,
}

impl PreferenceLabel {
    pub fn mu(self) -> [f64; 2] {
        match self {
            PreferenceLabel::First => [1.0, 0.0],
            PreferenceLabel::Second => [0.0, 1.0],
            PreferenceLabel::Equal => [0.5, 0.5],
        }
    }

    /// The digit an oracle answers with: 0 = first, 1 = second, 2 = equal.
    pub fn answer_digit(self) -> u8 {
        match self {
            PreferenceLabel::First => 0,
            PreferenceLabel::Second => 1,
            PreferenceLabel::Equal => 2,
        }
    }

    pub fn from_answer_digit(digit: u8) -> Option<Self> {
        match digit {
            0 => Some(PreferenceLabel::First),
            1 => Some(PreferenceLabel::Second),
            2 => Some(PreferenceLabel::Equal),
            _ => None,
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            PreferenceLabel::First => PreferenceLabel::Second,
            PreferenceLabel::Second => PreferenceLabel::First,
            PreferenceLabel::Equal => PreferenceLabel::Equal,
        }
    }

    /// Label for "a compared to b" where `Greater` means a is better.
    pub fn from_ordering(ord: Ordering) -> Self {
        match ord {
            Ordering::Greater => PreferenceLabel::First,
            Ordering::Less => PreferenceLabel::Second,
            Ordering::Equal => PreferenceLabel::Equal,
        }
    }
}

impl From<PreferenceLabel> for [f64; 2] {
    fn from(label: PreferenceLabel) -> Self {
        label.mu()
    }
}

impl TryFrom<[f64; 2]> for PreferenceLabel {
    type Error = &'static str;

    fn try_from(mu: [f64; 2]) -> Result<Self, Self::Error> {
        match mu {
            [a, b] if a == 1.0 && b == 0.0 => Ok(PreferenceLabel::First),
            [a, b] if a == 0.0 && b == 1.0 => Ok(PreferenceLabel::Second),
            [a, b] if a == 0.5 && b == 0.5 => Ok(PreferenceLabel::Equal),
            _ => Err("mu must be [1,0], [0,1] or [0.5,0.5]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Llm { model_id: String },
    Scripted,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub summary_a: TrajectorySummary,
    pub summary_b: TrajectorySummary,
    pub mu: PreferenceLabel,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleError {
    MalformedResponse,
    TaskMismatch,
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OracleError::MalformedResponse => f.write_str("no 0/1/2 answer found in response"),
            OracleError::TaskMismatch => f.write_str("compared trajectories come from different tasks"),
        }
    }
}

impl core::error::Error for OracleError {}

pub const UNLOCK_ENVIRONMENT: &str = "In a 2 grid world, there is a key and a gate. The agent needs to first get the key and then it can reach the gate and exit. ";
pub const UNLOCK_OBJECTIVE: &str =
    "We hope that the agent can get the key and reach the gate successfully in the least steps. ";
pub const LAVA_ENVIRONMENT: &str = "In a two-dimensional world, there exists a green exit and a lava strip. The agent is required to first cross the lava strip and then exit through the green exit.";
pub const LAVA_OBJECTIVE: &str = "We desire that the agent accomplish this by taking as few steps as possible while avoiding falling into the lava, as doing so would result in its demise.";
pub const TRAJECTORIES_INTRO: &str = "here are two trajectories of the agent. Please choose the better one.";
pub const QUESTION: &str = "please give me which one is better or they are equal.";
pub const ANSWER_INSTRUCTIONS: &str = "if the first one is better, you should return 0. otherwise, you should return 1. if they are equal, you should return 2.\n\nYour answer should be structured as follows:\n\nanswer:<your answer(a number)>";

/// The pieces of one comparison prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task: TaskId,
    pub environment_blurb: String,
    pub objective_blurb: String,
    pub constraint_blurb: Option<String>,
    pub trajectory_0: String,
    pub trajectory_1: String,
    pub answer_instructions: String,
}

impl PromptBundle {
    /// Environment, objective and constraint paragraphs.
    pub fn system_message(&self) -> String {
        let mut text = String::new();
        text.push_str(&self.environment_blurb);
        text.push_str("\n\n");
        text.push_str(&self.objective_blurb);
        if let Some(constraint) = &self.constraint_blurb {
            text.push_str("\n\n");
            text.push_str(constraint);
        }
        text
    }

    /// Trajectories, question and answer format.
    pub fn user_message(&self) -> String {
        // Unlock's template has no space after the slot number, LavaGap's has.
        let sep = match self.task {
            TaskId::Unlock => "",
            TaskId::LavaGapS7 => " ",
        };
        let mut text = String::new();
        for part in [
            TRAJECTORIES_INTRO,
            "\n\n0.",
            sep,
            &self.trajectory_0,
            "\n\n1.",
            sep,
            &self.trajectory_1,
            "\n\n",
            QUESTION,
            "\n\n",
            &self.answer_instructions,
        ] {
            text.push_str(part);
        }
        text
    }

    /// The complete prompt as a single document.
    pub fn full_text(&self) -> String {
        let mut text = self.system_message();
        text.push_str("\n\n");
        text.push_str(&self.user_message());
        text
    }
}

pub fn build_prompt(task: TaskId, constraint: Option<&ConstraintSpec>, text_a: &str, text_b: &str) -> PromptBundle {
    let (environment, objective) = match task {
        TaskId::Unlock => (UNLOCK_ENVIRONMENT, UNLOCK_OBJECTIVE),
        TaskId::LavaGapS7 => (LAVA_ENVIRONMENT, LAVA_OBJECTIVE),
    };
    PromptBundle {
        task,
        environment_blurb: environment.into(),
        objective_blurb: objective.into(),
        constraint_blurb: constraint.map(ConstraintSpec::prompt_sentence),
        trajectory_0: text_a.into(),
        trajectory_1: text_b.into(),
        answer_instructions: ANSWER_INSTRUCTIONS.into(),
    }
}

const SEPARATORS: &[char] = &[' ', '\t', ':', '\u{ff1a}', '=', '<', '*', '"', '\'', '(', '[', '`', '#', '-', '_'];

/// Tries to read a single digit answer right after an `answer` keyword.
fn answer_after(rest: &str) -> Option<u8> {
    let mut rest = rest.trim_start_matches(SEPARATORS);
    if let Some(stripped) = rest.strip_prefix("is") {
        rest = stripped.trim_start_matches(SEPARATORS);
    }
    let digits: &str = &rest[..rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len())];
    match digits.as_bytes() {
        [d] => Some(d - b'0'),
        _ => None,
    }
}

/// Extracts the last `answer: <digit>` in a response (case-insensitive).
pub fn parse_answer(response: &str) -> Result<PreferenceLabel, OracleError> {
    let lower = response.to_ascii_lowercase();
    let mut found = None;
    for (idx, _) in lower.match_indices("answer") {
        if let Some(label) = answer_after(&lower[idx + "answer".len()..]).and_then(PreferenceLabel::from_answer_digit) {
            found = Some(label);
        }
    }
    found.ok_or(OracleError::MalformedResponse)
}

/// Preference key of a LavaGap episode: higher is better.
fn lava_rank(s: &TrajectorySummary) -> u8 {
    match (s.success, s.crossed_lava, s.fell_in_lava) {
        (true, _, _) => 4,
        (false, true, false) => 3,
        (false, false, false) => 2,
        (false, true, true) => 1,
        (false, false, true) => 0,
    }
}

/// Lexicographic order of the task's stated criteria; `Greater` means `a` is
/// better.
pub fn scripted_order(
    a: &TrajectorySummary,
    b: &TrajectorySummary,
    constraint: Option<&ConstraintSpec>,
) -> Result<Ordering, OracleError> {
    if a.task != b.task {
        return Err(OracleError::TaskMismatch);
    }
    let primary = match a.task {
        TaskId::Unlock => a.success.cmp(&b.success),
        TaskId::LavaGapS7 => lava_rank(a).cmp(&lava_rank(b)),
    };
    let constrained = match constraint {
        Some(c) => c.deviation(b).cmp(&c.deviation(a)),
        None => Ordering::Equal,
    };
    Ok(primary.then(constrained).then(b.steps.cmp(&a.steps)))
}

pub fn scripted_compare(
    a: &TrajectorySummary,
    b: &TrajectorySummary,
    constraint: Option<&ConstraintSpec>,
) -> Result<PreferenceTriple, OracleError> {
    let ord = scripted_order(a, b, constraint)?;
    Ok(PreferenceTriple {
        summary_a: *a,
        summary_b: *b,
        mu: PreferenceLabel::from_ordering(ord),
        provenance: Provenance::Scripted,
        raw_response: None,
    })
}

/// Writes a response in the requested answer format, for round-trip checks.
pub fn format_answer(label: PreferenceLabel) -> String {
    alloc::format!("answer:{}", label.answer_digit())
}

/// Counts of discarded pairs by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardCounts {
    pub malformed: u32,
    pub unavailable: u32,
}

impl DiscardCounts {
    pub fn total(&self) -> u32 {
        self.malformed + self.unavailable
    }
}

/// Sorts summaries best-first under the scripted order.
pub fn rank_summaries(summaries: &mut Vec<TrajectorySummary>, constraint: Option<&ConstraintSpec>) {
    summaries.sort_by(|a, b| scripted_order(b, a, constraint).unwrap_or(Ordering::Equal));
}
