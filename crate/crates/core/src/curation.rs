//! Prompt-set filters driven by pass@k under a snapshot policy.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::Policy;
use crate::rng;
use crate::toolworld::{run_episode, EnvConfig};
use crate::trajectory::Prompt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassAtKReport {
    pub prompt_id: u64,
    pub k: usize,
    pub successes: usize,
    pub pass_rate: f64,
}

/// Samples `k` rollouts of `prompt` and counts correct answers. With
/// `tool_enabled == false` the tool action is masked out of the policy.
pub fn pass_at_k<P: Policy + ?Sized>(
    policy: &P,
    prompt: &Prompt,
    cfg: &EnvConfig,
    k: usize,
    tool_enabled: bool,
) -> PassAtKReport {
    assert!(k >= 1, "pass@k needs k >= 1");
    let successes = (0..k as u64)
        .filter(|&j| {
            let t = run_episode(policy, prompt, cfg, tool_enabled, &[rng::CURATE, j, tool_enabled as u64]);
            !t.truncated && t.final_answer == Some(prompt.answer_key)
        })
        .count();
    PassAtKReport { prompt_id: prompt.id, k, successes, pass_rate: successes as f64 / k as f64 }
}

/// Retained prompts plus the report behind every decision, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub retained: Vec<Prompt>,
    pub reports: Vec<PassAtKReport>,
}

fn filter_by<P, F>(prompts: &[Prompt], policy: &P, cfg: &EnvConfig, k: usize, tool: bool, keep: F) -> FilterOutcome
where
    P: Policy + ?Sized,
    F: Fn(&PassAtKReport) -> bool,
{
    let reports: Vec<PassAtKReport> =
        prompts.par_iter().map(|p| pass_at_k(policy, p, cfg, k, tool)).collect();
    let retained = prompts
        .iter()
        .zip(&reports)
        .filter(|(_, r)| keep(r))
        .map(|(p, _)| p.clone())
        .collect();
    FilterOutcome { retained, reports }
}

/// A prompt survives solvability filtering unless every sample succeeded.
pub fn solvability_keeps(r: &PassAtKReport) -> bool {
    r.successes < r.k
}

/// A prompt survives calibration when it was solved sometimes but not always.
pub fn calibration_keeps(r: &PassAtKReport) -> bool {
    r.successes > 0 && r.successes < r.k
}

/// Drops prompts the policy solves every time without the tool.
pub fn solvability_filter<P: Policy + ?Sized>(
    prompts: &[Prompt],
    policy: &P,
    cfg: &EnvConfig,
    k: usize,
) -> FilterOutcome {
    filter_by(prompts, policy, cfg, k, false, solvability_keeps)
}

/// Keeps prompts whose tool-enabled pass rate over `g` rollouts is strictly
/// between 0 and 1.
pub fn difficulty_calibration_filter<P: Policy + ?Sized>(
    prompts: &[Prompt],
    policy: &P,
    cfg: &EnvConfig,
    g: usize,
) -> FilterOutcome {
    assert!(g >= 2, "calibration needs at least 2 rollouts");
    filter_by(prompts, policy, cfg, g, true, calibration_keeps)
}

pub fn write_pass_at_k_csv<W: Write>(w: W, reports: &[PassAtKReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["prompt_id", "k", "successes", "pass_rate"])?;
    for r in reports {
        out.write_record([
            r.prompt_id.to_string(),
            r.k.to_string(),
            r.successes.to_string(),
            r.pass_rate.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
