//! Rollouts, groups, and the per-trajectory reward and advantage records.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::RewardScalar;

/// Latent difficulty of a prompt. Only the environment looks at it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub difficulty: Difficulty,
    /// Index of the correct answer among the environment's `K` candidates.
    pub answer_key: usize,
    /// Observation shown to the policy at turn 0.
    pub observation_code: usize,
}

/// One policy decision. The turn of a step is its index in the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(rename = "state")]
    pub state_code: usize,
    #[serde(rename = "action")]
    pub action_index: usize,
    /// Log-probability of the action under the policy that sampled it.
    #[serde(rename = "logp")]
    pub log_prob_behavior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub steps: Vec<Step>,
    pub tool_calls: u32,
    pub final_answer: Option<usize>,
    /// The episode hit `max_turns` without an answer.
    pub truncated: bool,
}

/// Shape of the environment a group was sampled from: `K` answers plus one
/// tool action, at most `max_turns` decisions per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub num_answers: usize,
    pub max_turns: usize,
}

impl ActionSpace {
    pub fn num_actions(&self) -> usize {
        self.num_answers + 1
    }

    /// The tool action always sits after the answers.
    pub fn tool_action(&self) -> usize {
        self.num_answers
    }

    pub fn is_tool(&self, action: usize) -> bool {
        action == self.num_answers
    }

    /// Observation codes are `0..K` for evidence pointing at an answer and
    /// `K` for "no evidence".
    pub fn num_states(&self) -> usize {
        self.num_answers + 1
    }
}

/// The `G` rollouts for one prompt. Advantages are normalized per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: u64,
    pub trajectories: Vec<Trajectory>,
    pub group_size: usize,
    pub space: ActionSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle<T> {
    pub r_ans: T,
    pub r_fmt: T,
    pub r_acc: T,
    pub r_tool: T,
    pub r_mix: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBundle<T> {
    pub a_acc: T,
    pub a_tool: T,
    pub a_mix: T,
    pub in_qualifying_set: bool,
}

impl<T: RewardScalar> AdvantageBundle<T> {
    pub fn zero(in_qualifying_set: bool) -> Self {
        AdvantageBundle {
            a_acc: T::zero(),
            a_tool: T::zero(),
            a_mix: T::zero(),
            in_qualifying_set,
        }
    }
}

/// Reward weights, channel weights, and the normalization constant.
///
/// The optimizer's learning rate and clip ratio live in
/// [`crate::policy::UpdateConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams<T> {
    pub lambda_a: T,
    pub lambda_f: T,
    /// Weight of the tool reward inside the coupled reward.
    pub alpha: T,
    pub w_acc: T,
    pub w_tool: T,
    pub epsilon: T,
    pub group_size: usize,
}

impl<T: RewardScalar> Default for HyperParams<T> {
    fn default() -> Self {
        let f = |x: f64| T::from_f64(x).expect("default representable");
        HyperParams {
            lambda_a: f(0.9),
            lambda_f: f(0.1),
            alpha: T::zero(),
            w_acc: T::one(),
            w_tool: f(0.15),
            epsilon: f(1e-8),
            group_size: 16,
        }
    }
}

/// A broken invariant found by [`validate_group`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    GroupTooSmall { group_size: usize },
    LengthMismatch { group_size: usize, trajectories: usize },
    ForeignTrajectory { index: usize, prompt_id: u64 },
    ToolCountMismatch { index: usize, recorded: u32, counted: u32 },
    TooManyToolCalls { index: usize, tool_calls: u32, max_turns: usize },
    TooManySteps { index: usize, steps: usize, max_turns: usize },
    MissingAnswer { index: usize },
    AnswerMismatch { index: usize },
    TruncatedWithAnswer { index: usize },
    ActionOutOfRange { index: usize, step: usize, action: usize },
    StateOutOfRange { index: usize, step: usize, state: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            GroupTooSmall { group_size } => write!(f, "group_size {group_size} < 2"),
            LengthMismatch { group_size, trajectories } => {
                write!(f, "group_size {group_size} but {trajectories} trajectories")
            }
            ForeignTrajectory { index, prompt_id } => {
                write!(f, "trajectory {index} belongs to prompt {prompt_id}")
            }
            ToolCountMismatch { index, recorded, counted } => write!(
                f,
                "trajectory {index}: tool_calls={recorded} but {counted} tool actions in steps"
            ),
            TooManyToolCalls { index, tool_calls, max_turns } => write!(
                f,
                "trajectory {index}: tool_calls={tool_calls} exceeds max_turns={max_turns}"
            ),
            TooManySteps { index, steps, max_turns } => {
                write!(f, "trajectory {index}: {steps} steps exceeds max_turns={max_turns}")
            }
            MissingAnswer { index } => {
                write!(f, "trajectory {index}: not truncated but does not end in an answer")
            }
            AnswerMismatch { index } => {
                write!(f, "trajectory {index}: final_answer differs from last action")
            }
            TruncatedWithAnswer { index } => {
                write!(f, "trajectory {index}: truncated but has a final answer")
            }
            ActionOutOfRange { index, step, action } => {
                write!(f, "trajectory {index} step {step}: action {action} out of range")
            }
            StateOutOfRange { index, step, state } => {
                write!(f, "trajectory {index} step {step}: state {state} out of range")
            }
        }
    }
}

/// Checks every trajectory and group invariant. An empty report means the
/// group is well formed.
pub fn validate_group(group: &RolloutGroup) -> Vec<Violation> {
    let mut out = Vec::new();
    let space = group.space;
    if group.group_size < 2 {
        out.push(Violation::GroupTooSmall { group_size: group.group_size });
    }
    if group.trajectories.len() != group.group_size {
        out.push(Violation::LengthMismatch {
            group_size: group.group_size,
            trajectories: group.trajectories.len(),
        });
    }
    for (index, t) in group.trajectories.iter().enumerate() {
        if t.prompt_id != group.prompt_id {
            out.push(Violation::ForeignTrajectory { index, prompt_id: t.prompt_id });
        }
        for (step, s) in t.steps.iter().enumerate() {
            if s.action_index >= space.num_actions() {
                out.push(Violation::ActionOutOfRange { index, step, action: s.action_index });
            }
            if s.state_code >= space.num_states() {
                out.push(Violation::StateOutOfRange { index, step, state: s.state_code });
            }
        }
        let counted = t.steps.iter().filter(|s| space.is_tool(s.action_index)).count() as u32;
        if counted != t.tool_calls {
            out.push(Violation::ToolCountMismatch { index, recorded: t.tool_calls, counted });
        }
        if t.tool_calls as usize > space.max_turns {
            out.push(Violation::TooManyToolCalls {
                index,
                tool_calls: t.tool_calls,
                max_turns: space.max_turns,
            });
        }
        if t.steps.len() > space.max_turns {
            out.push(Violation::TooManySteps {
                index,
                steps: t.steps.len(),
                max_turns: space.max_turns,
            });
        }
        if t.truncated {
            if t.final_answer.is_some() {
                out.push(Violation::TruncatedWithAnswer { index });
            }
        } else {
            match (t.steps.last(), t.final_answer) {
                (Some(last), Some(answer)) if last.action_index < space.num_answers => {
                    if last.action_index != answer {
                        out.push(Violation::AnswerMismatch { index });
                    }
                }
                _ => out.push(Violation::MissingAnswer { index }),
            }
        }
    }
    out
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write, V: Serialize>(mut w: W, items: &[V]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads one JSON object per non-empty line.
pub fn read_jsonl<R: BufRead, V: for<'de> Deserialize<'de>>(r: R) -> Result<Vec<V>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
