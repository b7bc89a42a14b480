//! ToolWorld: a multi-turn environment with one abstract tool.
//!
//! Observation codes `0..K` mean "the evidence points at answer k"; code `K`
//! means "no evidence". Easy prompts start with evidence for the right
//! answer (unless `easy_signal_noise` swaps in a distractor). Hard prompts
//! start with no evidence, so without the tool the best a policy can do is
//! guess. The tool action consumes a turn and with probability `p_reveal`
//! returns evidence, which is a distractor with probability `tool_noise`.
//! Calling the tool on the last turn truncates the episode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng;
use crate::trajectory::{ActionSpace, Difficulty, Prompt, RolloutGroup, Step, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub num_answers: usize,
    pub max_turns: usize,
    pub p_hard: f64,
    pub p_reveal: f64,
    /// Probability an easy prompt's initial evidence is a distractor.
    pub easy_signal_noise: f64,
    /// Probability revealed tool evidence is a distractor.
    pub tool_noise: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            num_answers: 4,
            max_turns: 4,
            p_hard: 0.5,
            p_reveal: 0.9,
            easy_signal_noise: 0.0,
            tool_noise: 0.0,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn space(&self) -> ActionSpace {
        ActionSpace { num_answers: self.num_answers, max_turns: self.max_turns }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_answers < 2 {
            return Err(Error::config("env.num_answers must be >= 2"));
        }
        if self.max_turns < 1 {
            return Err(Error::config("env.max_turns must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_hard) {
            return Err(Error::config("env.p_hard must be in [0, 1]"));
        }
        if !(self.p_reveal > 0.0 && self.p_reveal <= 1.0) {
            return Err(Error::config("env.p_reveal must be in (0, 1]"));
        }
        if !(0.0..0.5).contains(&self.easy_signal_noise) {
            return Err(Error::config("env.easy_signal_noise must be in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.tool_noise) {
            return Err(Error::config("env.tool_noise must be in [0, 1]"));
        }
        Ok(())
    }

    fn no_evidence(&self) -> usize {
        self.num_answers
    }
}

fn distractor(rng: &mut ChaCha8Rng, answer_key: usize, num_answers: usize) -> usize {
    let r = rng.random_range(0..num_answers - 1);
    if r >= answer_key {
        r + 1
    } else {
        r
    }
}

/// Prompt `id`, drawn from its own stream so it never depends on which other
/// prompts were generated.
pub fn generate_prompt(cfg: &EnvConfig, id: u64) -> Prompt {
    let mut r = rng::stream(cfg.seed, &[rng::PROMPT, id]);
    let difficulty = if r.random_bool(cfg.p_hard) { Difficulty::Hard } else { Difficulty::Easy };
    let answer_key = r.random_range(0..cfg.num_answers);
    let observation_code = match difficulty {
        Difficulty::Hard => cfg.no_evidence(),
        Difficulty::Easy if r.random_bool(cfg.easy_signal_noise) => {
            distractor(&mut r, answer_key, cfg.num_answers)
        }
        Difficulty::Easy => answer_key,
    };
    Prompt { id, difficulty, answer_key, observation_code }
}

/// Prompts with ids `start..start + n`.
pub fn generate_prompt_range(cfg: &EnvConfig, start: u64, n: usize) -> Vec<Prompt> {
    (start..start + n as u64).map(|id| generate_prompt(cfg, id)).collect()
}

pub fn generate_prompts(cfg: &EnvConfig, n: usize) -> Vec<Prompt> {
    generate_prompt_range(cfg, 0, n)
}

/// Live episode state.
#[derive(Debug, Clone)]
pub struct EnvState {
    pub prompt: Prompt,
    pub turn: usize,
    pub evidence_revealed: bool,
    /// What the policy currently sees.
    pub observation: usize,
    pub finished: bool,
    rng: ChaCha8Rng,
}

impl EnvState {
    /// Fresh episode whose randomness comes from the stream keyed by the
    /// environment seed, the prompt id, and `tags`.
    pub fn start(prompt: &Prompt, cfg: &EnvConfig, tags: &[u64]) -> Self {
        let mut key = vec![rng::ENV, prompt.id];
        key.extend_from_slice(tags);
        EnvState {
            prompt: prompt.clone(),
            turn: 0,
            evidence_revealed: prompt.difficulty == Difficulty::Easy,
            observation: prompt.observation_code,
            finished: false,
            rng: rng::stream(cfg.seed, &key),
        }
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Continue { observation: usize },
    Answered { final_answer: usize },
    Truncated,
}

/// Applies `action` (`0..K` answer, `K` tool) to a live episode.
pub fn step(state: &mut EnvState, action: usize, cfg: &EnvConfig) -> Result<Transition> {
    if state.finished {
        return Err(Error::TerminalState);
    }
    let space = cfg.space();
    if action >= space.num_actions() {
        return Err(Error::InvalidAction { action, num_actions: space.num_actions() });
    }
    if action < cfg.num_answers {
        state.finished = true;
        return Ok(Transition::Answered { final_answer: action });
    }
    if state.rng.random_bool(cfg.p_reveal) {
        state.evidence_revealed = true;
        state.observation = if state.rng.random_bool(cfg.tool_noise) {
            distractor(&mut state.rng, state.prompt.answer_key, cfg.num_answers)
        } else {
            state.prompt.answer_key
        };
    }
    state.turn += 1;
    if state.turn >= cfg.max_turns {
        state.finished = true;
        return Ok(Transition::Truncated);
    }
    Ok(Transition::Continue { observation: state.observation })
}

fn sample(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}

/// Plays one episode. `tags` select the random streams; the policy and the
/// environment draw from separate streams.
pub fn run_episode<P: Policy + ?Sized>(
    policy: &P,
    prompt: &Prompt,
    cfg: &EnvConfig,
    tool_enabled: bool,
    tags: &[u64],
) -> Trajectory {
    let mut state = EnvState::start(prompt, cfg, tags);
    let mut key = vec![rng::POLICY, prompt.id];
    key.extend_from_slice(tags);
    let mut policy_rng = rng::stream(cfg.seed, &key);
    let mut probs = vec![0.0; cfg.space().num_actions()];
    let mut steps = Vec::new();
    let mut tool_calls = 0;
    loop {
        policy.fill_probabilities(state.observation, state.turn, tool_enabled, &mut probs);
        let action = sample(&probs, &mut policy_rng);
        steps.push(Step {
            state_code: state.observation,
            action_index: action,
            log_prob_behavior: probs[action].ln(),
        });
        if action == cfg.num_answers {
            tool_calls += 1;
        }
        match step(&mut state, action, cfg).expect("sampled action is in range") {
            Transition::Continue { .. } => {}
            Transition::Answered { final_answer } => {
                return Trajectory {
                    prompt_id: prompt.id,
                    steps,
                    tool_calls,
                    final_answer: Some(final_answer),
                    truncated: false,
                };
            }
            Transition::Truncated => {
                return Trajectory {
                    prompt_id: prompt.id,
                    steps,
                    tool_calls,
                    final_answer: None,
                    truncated: true,
                };
            }
        }
    }
}

/// `group_size` rollouts of one prompt; rollout `j` uses streams keyed by
/// `(seed, prompt.id, j, salt)`.
pub fn rollout_group_salted<P: Policy + ?Sized>(
    policy: &P,
    prompt: &Prompt,
    cfg: &EnvConfig,
    group_size: usize,
    salt: u64,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    let trajectories = (0..group_size as u64)
        .map(|j| run_episode(policy, prompt, cfg, true, &[j, salt]))
        .collect();
    Ok(RolloutGroup { prompt_id: prompt.id, trajectories, group_size, space: cfg.space() })
}

pub fn rollout_group<P: Policy + ?Sized>(
    policy: &P,
    prompt: &Prompt,
    cfg: &EnvConfig,
    group_size: usize,
) -> Result<RolloutGroup> {
    rollout_group_salted(policy, prompt, cfg, group_size, 0)
}

/// Accuracy and expected tool calls of the omniscient strategy: answer easy
/// prompts from the initial evidence, and on hard prompts call the tool
/// until it reveals (at most `max_turns - 1` times) then answer the evidence,
/// guessing if nothing was revealed.
pub fn oracle_policy_metrics(cfg: &EnvConfig) -> (f64, f64) {
    let k = cfg.num_answers as f64;
    let easy_acc = 1.0 - cfg.easy_signal_noise;
    let budget = cfg.max_turns.saturating_sub(1) as i32;
    let miss = 1.0 - cfg.p_reveal;
    let mut hard_acc = 0.0;
    let mut hard_calls = 0.0;
    for t in 1..=budget {
        let first_reveal_at_t = miss.powi(t - 1) * cfg.p_reveal;
        hard_acc += first_reveal_at_t * (1.0 - cfg.tool_noise);
        hard_calls += first_reveal_at_t * t as f64;
    }
    let never = miss.powi(budget);
    hard_acc += never / k;
    hard_calls += never * budget as f64;
    (
        (1.0 - cfg.p_hard) * easy_acc + cfg.p_hard * hard_acc,
        cfg.p_hard * hard_calls,
    )
}

/// Policy performance on a fresh evaluation set, split by difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub accuracy: f64,
    pub tool_rate: f64,
    pub tool_invocation_fraction: f64,
    pub truncation_rate: f64,
    pub easy_episodes: usize,
    pub easy_accuracy: f64,
    pub easy_tool_fraction: f64,
    pub hard_episodes: usize,
    pub hard_accuracy: f64,
    pub hard_tool_fraction: f64,
}

const EVAL_ID_BASE: u64 = 1 << 48;

/// Plays one episode on each of `episodes` held-out prompts.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    cfg: &EnvConfig,
    episodes: usize,
    salt: u64,
) -> EvalReport {
    let prompts = generate_prompt_range(cfg, EVAL_ID_BASE, episodes);
    let outcomes: Vec<(Difficulty, bool, u32, bool)> = prompts
        .par_iter()
        .map(|p| {
            let t = run_episode(policy, p, cfg, true, &[rng::EVAL, salt]);
            let correct = !t.truncated && t.final_answer == Some(p.answer_key);
            (p.difficulty, correct, t.tool_calls, t.truncated)
        })
        .collect();

    let mut r = EvalReport { episodes, ..EvalReport::default() };
    let (mut easy_correct, mut easy_tool, mut hard_correct, mut hard_tool) = (0, 0, 0, 0);
    let (mut correct, mut calls, mut invoked, mut truncated) = (0, 0u64, 0, 0);
    for &(d, ok, t, trunc) in &outcomes {
        correct += ok as usize;
        calls += u64::from(t);
        invoked += (t > 0) as usize;
        truncated += trunc as usize;
        match d {
            Difficulty::Easy => {
                r.easy_episodes += 1;
                easy_correct += ok as usize;
                easy_tool += (t > 0) as usize;
            }
            Difficulty::Hard => {
                r.hard_episodes += 1;
                hard_correct += ok as usize;
                hard_tool += (t > 0) as usize;
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    r.accuracy = frac(correct, episodes);
    r.tool_rate = if episodes == 0 { 0.0 } else { calls as f64 / episodes as f64 };
    r.tool_invocation_fraction = frac(invoked, episodes);
    r.truncation_rate = frac(truncated, episodes);
    r.easy_accuracy = frac(easy_correct, r.easy_episodes);
    r.easy_tool_fraction = frac(easy_tool, r.easy_episodes);
    r.hard_accuracy = frac(hard_correct, r.hard_episodes);
    r.hard_tool_fraction = frac(hard_tool, r.hard_episodes);
    r
}
