//! Scalar rewards: correctness, format, tool parsimony, and the coupled mix.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::RewardScalar;
use crate::trajectory::{HyperParams, Prompt, RewardBundle, RolloutGroup, Trajectory};

/// Outcome of the simulator judge: exact answer matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub correct: bool,
    pub format_ok: bool,
}

/// Scores a finished trajectory. A truncated episode never answered, so it is
/// both wrong and malformed.
pub fn judge(trajectory: &Trajectory, prompt: &Prompt) -> Result<JudgeVerdict> {
    if trajectory.prompt_id != prompt.id {
        return Err(Error::PromptMismatch { trajectory: trajectory.prompt_id, prompt: prompt.id });
    }
    let answered_right = trajectory.final_answer == Some(prompt.answer_key);
    Ok(JudgeVerdict {
        correct: answered_right && !trajectory.truncated,
        format_ok: !trajectory.truncated,
    })
}

fn indicator<T: RewardScalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

/// `lambda_a * [correct] + lambda_f * [format_ok]`.
pub fn accuracy_reward<T: RewardScalar>(verdict: JudgeVerdict, hp: &HyperParams<T>) -> T {
    hp.lambda_a * indicator::<T>(verdict.correct) + hp.lambda_f * indicator::<T>(verdict.format_ok)
}

/// `1 / (T + 1)` for correct answers, zero otherwise. Conditioning on the raw
/// correctness bit keeps an incorrect rollout from being paid for brevity.
pub fn tool_reward<T: RewardScalar>(verdict: JudgeVerdict, tool_calls: u32) -> T {
    if !verdict.correct {
        return T::zero();
    }
    let denom = T::from_u64(u64::from(tool_calls) + 1).expect("tool count representable");
    T::one() / denom
}

/// `r_acc + alpha * r_tool`.
pub fn coupled_reward<T: RewardScalar>(r_acc: T, r_tool: T, alpha: T) -> T {
    r_acc + alpha * r_tool
}

/// Resolves prompt ids to prompts.
pub trait PromptLookup {
    fn lookup(&self, id: u64) -> Option<&Prompt>;
}

impl PromptLookup for HashMap<u64, Prompt> {
    fn lookup(&self, id: u64) -> Option<&Prompt> {
        self.get(&id)
    }
}

impl PromptLookup for [Prompt] {
    fn lookup(&self, id: u64) -> Option<&Prompt> {
        self.iter().find(|p| p.id == id)
    }
}

impl PromptLookup for Prompt {
    fn lookup(&self, id: u64) -> Option<&Prompt> {
        (self.id == id).then_some(self)
    }
}

/// Rewards for a single trajectory.
pub fn score_trajectory<T: RewardScalar>(
    trajectory: &Trajectory,
    prompt: &Prompt,
    hp: &HyperParams<T>,
) -> Result<RewardBundle<T>> {
    let verdict = judge(trajectory, prompt)?;
    let r_acc = accuracy_reward(verdict, hp);
    let r_tool = tool_reward(verdict, trajectory.tool_calls);
    Ok(RewardBundle {
        r_ans: indicator(verdict.correct),
        r_fmt: indicator(verdict.format_ok),
        r_acc,
        r_tool,
        r_mix: coupled_reward(r_acc, r_tool, hp.alpha),
    })
}

/// One reward bundle per trajectory, in group order.
pub fn score_group<T: RewardScalar, P: PromptLookup + ?Sized>(
    group: &RolloutGroup,
    prompts: &P,
    hp: &HyperParams<T>,
) -> Result<Vec<RewardBundle<T>>> {
    group
        .trajectories
        .iter()
        .map(|t| {
            let prompt = prompts.lookup(t.prompt_id).ok_or(Error::UnknownPrompt(t.prompt_id))?;
            score_trajectory(t, prompt, hp)
        })
        .collect()
}
