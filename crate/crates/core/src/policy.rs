//! Tabular softmax policy, clipped surrogate loss with exact gradients, and
//! the weighted two-channel objective.
//!
//! A context is `(state_code, turn)`; each context owns `K + 1` logits (the
//! `K` answers followed by the tool action). The loss is the step-mean of the
//! clipped surrogate over every policy-authored step in the batch, with each
//! trajectory's scalar advantage broadcast to all of its steps. There is no
//! KL term.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::advantage::Mode;
use crate::error::{Error, Result};
use crate::trajectory::{ActionSpace, AdvantageBundle, HyperParams, Trajectory};

/// Anything that can propose action probabilities for a context.
pub trait Policy: Sync {
    fn space(&self) -> ActionSpace;

    /// Writes the action distribution for `(state, turn)` into `out`, which has
    /// length `K + 1`. With the tool disabled its probability is zero and the
    /// answers are renormalized.
    fn fill_probabilities(&self, state: usize, turn: usize, tool_enabled: bool, out: &mut [f64]);
}

/// Dense `(turn, state) -> [f64; K + 1]` table. Used for both the logits and
/// their gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitTable {
    pub space: ActionSpace,
    pub values: Vec<f64>,
}

impl LogitTable {
    pub fn zeros(space: ActionSpace) -> Self {
        let len = space.max_turns * space.num_states() * space.num_actions();
        LogitTable { space, values: vec![0.0; len] }
    }

    pub fn num_contexts(&self) -> usize {
        self.space.max_turns * self.space.num_states()
    }

    fn context_offset(&self, state: usize, turn: usize) -> Option<usize> {
        (state < self.space.num_states() && turn < self.space.max_turns)
            .then(|| (turn * self.space.num_states() + state) * self.space.num_actions())
    }

    pub fn context(&self, state: usize, turn: usize) -> Option<&[f64]> {
        let off = self.context_offset(state, turn)?;
        Some(&self.values[off..off + self.space.num_actions()])
    }

    pub fn context_mut(&mut self, state: usize, turn: usize) -> Option<&mut [f64]> {
        let off = self.context_offset(state, turn)?;
        let n = self.space.num_actions();
        Some(&mut self.values[off..off + n])
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_shape(&self, other: &LogitTable) -> Result<()> {
        if self.space != other.space || self.values.len() != other.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} ({} values) vs {:?} ({} values)",
                self.space,
                self.values.len(),
                other.space,
                other.values.len()
            )));
        }
        Ok(())
    }

    /// `self = a * self + b * other`, elementwise.
    pub(crate) fn combine(&mut self, a: f64, b: f64, other: &LogitTable) -> Result<()> {
        self.check_shape(other)?;
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x = a * *x + b * y;
        }
        Ok(())
    }
}

/// Gradient of a loss with respect to every logit.
pub type Gradient = LogitTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub logits: LogitTable,
    /// Number of updates applied so far.
    pub version: u64,
}

impl PolicyParams {
    /// All-zero logits: the uniform policy in every context.
    pub fn uniform(space: ActionSpace) -> Self {
        PolicyParams { logits: LogitTable::zeros(space), version: 0 }
    }

    /// Hand-set starting policy; see [`ColdStart`].
    pub fn cold_start(space: ActionSpace, init: &ColdStart) -> Self {
        let mut p = PolicyParams::uniform(space);
        let k = space.num_answers;
        for turn in 0..space.max_turns {
            for state in 0..space.num_states() {
                let ctx = p.logits.context_mut(state, turn).expect("in range");
                ctx[k] = if turn == 0 { init.init_tool_logit_first_turn } else { init.init_tool_logit_later_turns };
                if state < k {
                    ctx[state] += init.init_evidence_logit;
                }
            }
        }
        p
    }
}

/// Initial logits standing in for a supervised warm start. The tool action
/// gets one logit on the first turn and another afterwards; the answer named
/// by the current evidence gets a bonus. Answers otherwise start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ColdStart {
    pub init_tool_logit_first_turn: f64,
    pub init_tool_logit_later_turns: f64,
    pub init_evidence_logit: f64,
}

impl ColdStart {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.init_tool_logit_first_turn,
            self.init_tool_logit_later_turns,
            self.init_evidence_logit,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("run.init_* logits must be finite"));
        }
        Ok(())
    }
}

/// Numerically stable softmax of `logits` into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_at(logits: &[f64], action: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[action] - lse
}

impl Policy for PolicyParams {
    fn space(&self) -> ActionSpace {
        self.logits.space
    }

    fn fill_probabilities(&self, state: usize, turn: usize, tool_enabled: bool, out: &mut [f64]) {
        let n = self.logits.space.num_actions();
        let Some(ctx) = self.logits.context(state, turn) else {
            // Contexts outside the table have never been trained: uniform.
            let live = if tool_enabled { n } else { n - 1 };
            out.iter_mut().for_each(|o| *o = 1.0 / live as f64);
            if !tool_enabled {
                out[n - 1] = 0.0;
            }
            return;
        };
        if tool_enabled {
            softmax_into(ctx, out);
        } else {
            softmax_into(&ctx[..n - 1], &mut out[..n - 1]);
            out[n - 1] = 0.0;
        }
    }
}

/// Picks the most likely action in every context.
pub struct Greedy<'a, P: Policy>(pub &'a P);

impl<P: Policy> Policy for Greedy<'_, P> {
    fn space(&self) -> ActionSpace {
        self.0.space()
    }

    fn fill_probabilities(&self, state: usize, turn: usize, tool_enabled: bool, out: &mut [f64]) {
        self.0.fill_probabilities(state, turn, tool_enabled, out);
        let best = out
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc })
            .0;
        out.iter_mut().enumerate().for_each(|(i, o)| *o = if i == best { 1.0 } else { 0.0 });
    }
}

/// Softmax over the context's logits. Unknown contexts are uniform.
pub fn action_distribution(params: &PolicyParams, state_code: usize, turn: usize) -> Vec<f64> {
    let mut out = vec![0.0; params.logits.space.num_actions()];
    params.fill_probabilities(state_code, turn, true, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub learning_rate: f64,
    pub clip_ratio: f64,
    pub epochs_per_batch: usize,
    /// Rescale the gradient to this global L2 norm when it is larger.
    pub max_grad_norm: Option<f64>,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            learning_rate: 0.5,
            clip_ratio: 0.2,
            epochs_per_batch: 1,
            max_grad_norm: None,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("update.learning_rate must be finite and >= 0"));
        }
        if !(self.clip_ratio > 0.0) {
            return Err(Error::config("update.clip_ratio must be > 0"));
        }
        if self.epochs_per_batch == 0 {
            return Err(Error::config("update.epochs_per_batch must be >= 1"));
        }
        if matches!(self.max_grad_norm, Some(m) if !(m > 0.0)) {
            return Err(Error::config("update.max_grad_norm must be > 0 when set"));
        }
        Ok(())
    }
}

/// Clipped surrogate `-mean_steps min(rho * A, clip(rho, 1-c, 1+c) * A)` and
/// its exact gradient. `rho` is the ratio of the current policy to the
/// behavior log-probability stored on each step.
pub fn clipped_surrogate_loss(
    trajectories: &[Trajectory],
    advantages: &[f64],
    params: &PolicyParams,
    cfg: &UpdateConfig,
) -> Result<(f64, Gradient)> {
    if trajectories.len() != advantages.len() {
        return Err(Error::AdvantageLength {
            trajectories: trajectories.len(),
            advantages: advantages.len(),
        });
    }
    let table = &params.logits;
    let mut grad = LogitTable::zeros(table.space);
    let n_steps: usize = trajectories.iter().map(|t| t.steps.len()).sum();
    if n_steps == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / n_steps as f64;
    let (lo, hi) = (1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let mut probs = vec![0.0; table.space.num_actions()];
    let mut objective = 0.0;

    for (ti, (traj, &adv)) in trajectories.iter().zip(advantages).enumerate() {
        for (turn, step) in traj.steps.iter().enumerate() {
            if !step.log_prob_behavior.is_finite() {
                return Err(Error::MissingLogProb { trajectory: ti, step: turn });
            }
            let ctx = table.context(step.state_code, turn).ok_or(Error::InvalidContext {
                step: turn,
                state: step.state_code,
                turn,
            })?;
            if step.action_index >= ctx.len() {
                return Err(Error::InvalidAction {
                    action: step.action_index,
                    num_actions: ctx.len(),
                });
            }
            let ratio = (log_softmax_at(ctx, step.action_index) - step.log_prob_behavior).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(lo, hi) * adv;
            objective += unclipped.min(clipped);
            if adv == 0.0 || unclipped > clipped {
                continue;
            }
            softmax_into(ctx, &mut probs);
            let g = grad.context_mut(step.state_code, turn).expect("checked above");
            let coeff = scale * adv * ratio;
            for (a, (gi, p)) in g.iter_mut().zip(&probs).enumerate() {
                let onehot = if a == step.action_index { 1.0 } else { 0.0 };
                *gi -= coeff * (onehot - p);
            }
        }
    }
    Ok((-objective * scale, grad))
}

/// The trained objective for each mode:
/// decoupled `w_acc * L(A_acc) + w_tool * L(A_tool)`, accuracy-only
/// `w_acc * L(A_acc)`, coupled `L(A_mix)`.
pub fn hdpo_loss(
    trajectories: &[Trajectory],
    adv_bundles: &[AdvantageBundle<f64>],
    params: &PolicyParams,
    hp: &HyperParams<f64>,
    cfg: &UpdateConfig,
    mode: Mode,
) -> Result<(f64, Gradient)> {
    let channel = |f: fn(&AdvantageBundle<f64>) -> f64| -> Result<(f64, Gradient)> {
        let adv: Vec<f64> = adv_bundles.iter().map(f).collect();
        clipped_surrogate_loss(trajectories, &adv, params, cfg)
    };
    match mode {
        Mode::Coupled => channel(|b| b.a_mix),
        Mode::AccuracyOnly => {
            let (loss, mut grad) = channel(|b| b.a_acc)?;
            grad.values.iter_mut().for_each(|g| *g *= hp.w_acc);
            Ok((hp.w_acc * loss, grad))
        }
        Mode::Decoupled => {
            let (acc_loss, mut grad) = channel(|b| b.a_acc)?;
            let (tool_loss, tool_grad) = channel(|b| b.a_tool)?;
            grad.combine(hp.w_acc, hp.w_tool, &tool_grad)?;
            Ok((hp.w_acc * acc_loss + hp.w_tool * tool_loss, grad))
        }
    }
}

/// One gradient-descent step with optional global-norm clipping.
pub fn apply_update(
    params: &PolicyParams,
    gradient: &Gradient,
    cfg: &UpdateConfig,
) -> Result<PolicyParams> {
    params.logits.check_shape(gradient)?;
    let mut step = cfg.learning_rate;
    if let Some(max) = cfg.max_grad_norm {
        let norm = gradient.norm();
        if norm > max {
            step *= max / norm;
        }
    }
    let mut next = params.clone();
    for (x, g) in next.logits.values.iter_mut().zip(&gradient.values) {
        *x -= step * g;
    }
    next.version += 1;
    Ok(next)
}

const CHECKPOINT_FORMAT: &str = "hdpo-policy";
const CHECKPOINT_VERSION: u32 = 1;

/// Logit table plus enough metadata to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    /// Hash of the run configuration that produced the parameters.
    pub config_hash: String,
    /// Index of the next training iteration.
    pub next_iteration: usize,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(params: PolicyParams, config_hash: String, next_iteration: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            config_hash,
            next_iteration,
            params,
        }
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    /// Reads a checkpoint, rejecting foreign formats and any action space
    /// other than `expected`.
    pub fn read<R: Read>(r: R, expected: ActionSpace) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(r)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint format {} v{}",
                ckpt.format, ckpt.format_version
            )));
        }
        let table = &ckpt.params.logits;
        if table.space != expected {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint action space {:?}, environment expects {:?}",
                table.space, expected
            )));
        }
        if table.values.len() != LogitTable::zeros(expected).values.len() {
            return Err(Error::ShapeMismatch("checkpoint logit table has the wrong length".into()));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Step;

    const SPACE: ActionSpace = ActionSpace { num_answers: 3, max_turns: 2 };

    fn one_step(state: usize, action: usize, logp: f64) -> Trajectory {
        Trajectory {
            prompt_id: 0,
            steps: vec![Step { state_code: state, action_index: action, log_prob_behavior: logp }],
            tool_calls: 0,
            final_answer: Some(action),
            truncated: false,
        }
    }

    #[test]
    fn uniform_distribution() {
        let p = PolicyParams::uniform(SPACE);
        assert_eq!(action_distribution(&p, 1, 0), vec![0.25; 4]);
    }

    #[test]
    fn closed_form_softmax() {
        let mut p = PolicyParams::uniform(SPACE);
        p.logits.context_mut(2, 1).unwrap()[0] = 3f64.ln();
        let d = action_distribution(&p, 2, 1);
        assert!((d[0] - 0.5).abs() < 1e-15);
        for x in &d[1..] {
            assert!((x - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut p = PolicyParams::uniform(SPACE);
        p.logits.context_mut(0, 0).unwrap().copy_from_slice(&[0.3, -1.0, 2.0, 0.1]);
        let before = action_distribution(&p, 0, 0);
        p.logits.context_mut(0, 0).unwrap().iter_mut().for_each(|z| *z += 17.0);
        let after = action_distribution(&p, 0, 0);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((after.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tool_masking_renormalizes_answers() {
        let p = PolicyParams::uniform(SPACE);
        let mut out = [0.0; 4];
        p.fill_probabilities(0, 0, false, &mut out);
        assert_eq!(out, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn ratio_one_is_vanilla_policy_gradient() {
        let p = PolicyParams::uniform(SPACE);
        let logp = 0.25f64.ln();
        let trajs = vec![one_step(0, 1, logp), one_step(0, 3, logp)];
        let (loss, g) =
            clipped_surrogate_loss(&trajs, &[1.0, -0.5], &p, &UpdateConfig::default()).unwrap();
        assert!((loss - (-(1.0 - 0.5) / 2.0)).abs() < 1e-15);
        // d/dz of -(1/N) sum A * log pi(a).
        let ctx = g.context(0, 0).unwrap();
        let expect = |a: usize| {
            let d1 = if a == 1 { 1.0 } else { 0.0 } - 0.25;
            let d3 = if a == 3 { 1.0 } else { 0.0 } - 0.25;
            -(1.0 * d1 - 0.5 * d3) / 2.0
        };
        for a in 0..4 {
            assert!((ctx[a] - expect(a)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_advantage_zero_loss() {
        let p = PolicyParams::uniform(SPACE);
        let trajs = vec![one_step(0, 1, -1.0), one_step(1, 2, -0.3)];
        let (loss, g) =
            clipped_surrogate_loss(&trajs, &[0.0, 0.0], &p, &UpdateConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn active_clip_zeroes_gradient() {
        let p = PolicyParams::uniform(SPACE);
        // Behavior probability 0.1 vs current 0.25: ratio 2.5 > 1.2.
        let trajs = vec![one_step(0, 1, 0.1f64.ln())];
        let (loss, g) = clipped_surrogate_loss(&trajs, &[1.0], &p, &UpdateConfig::default()).unwrap();
        assert!((loss + 1.2).abs() < 1e-12);
        assert!(g.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_errors() {
        let p = PolicyParams::uniform(SPACE);
        let cfg = UpdateConfig::default();
        let t = one_step(0, 1, -1.0);
        assert!(matches!(
            clipped_surrogate_loss(&[t.clone()], &[], &p, &cfg),
            Err(Error::AdvantageLength { .. })
        ));
        let missing = one_step(0, 1, f64::NAN);
        assert!(matches!(
            clipped_surrogate_loss(&[missing], &[1.0], &p, &cfg),
            Err(Error::MissingLogProb { trajectory: 0, step: 0 })
        ));
        let off_table = one_step(9, 1, -1.0);
        assert!(matches!(
            clipped_surrogate_loss(&[off_table], &[1.0], &p, &cfg),
            Err(Error::InvalidContext { .. })
        ));
    }

    #[test]
    fn zero_gradient_only_bumps_version() {
        let p = PolicyParams::uniform(SPACE);
        let next = apply_update(&p, &LogitTable::zeros(SPACE), &UpdateConfig::default()).unwrap();
        assert_eq!(next.logits, p.logits);
        assert_eq!(next.version, 1);
    }

    #[test]
    fn single_coordinate_descent() {
        let p = PolicyParams::uniform(SPACE);
        let mut g = LogitTable::zeros(SPACE);
        g.context_mut(1, 1).unwrap()[2] = 0.8;
        let cfg = UpdateConfig { learning_rate: 0.25, ..UpdateConfig::default() };
        let next = apply_update(&p, &g, &cfg).unwrap();
        assert_eq!(next.logits.context(1, 1).unwrap()[2], -0.2);
    }

    #[test]
    fn gradient_norm_clipping() {
        let p = PolicyParams::uniform(SPACE);
        let mut g = LogitTable::zeros(SPACE);
        g.values[0] = 6.0;
        g.values[5] = 8.0;
        let cfg = UpdateConfig { learning_rate: 1.0, max_grad_norm: Some(1.0), ..UpdateConfig::default() };
        let next = apply_update(&p, &g, &cfg).unwrap();
        let applied: Vec<f64> = next.logits.values.iter().map(|x| -x).collect();
        let norm = applied.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((applied[0] - 0.6).abs() < 1e-12 && (applied[5] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn update_shape_mismatch() {
        let p = PolicyParams::uniform(SPACE);
        let g = LogitTable::zeros(ActionSpace { num_answers: 4, max_turns: 2 });
        assert!(matches!(apply_update(&p, &g, &UpdateConfig::default()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_space_check() {
        let mut p = PolicyParams::uniform(SPACE);
        p.logits.values[3] = 0.1 + 0.2;
        p.version = 9;
        let ckpt = Checkpoint::new(p, "abc".into(), 4);
        let mut buf = Vec::new();
        ckpt.write(&mut buf).unwrap();
        assert_eq!(Checkpoint::read(&buf[..], SPACE).unwrap(), ckpt);
        let other = ActionSpace { num_answers: 5, max_turns: 2 };
        assert!(matches!(Checkpoint::read(&buf[..], other), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn greedy_wrapper_is_deterministic() {
        let mut p = PolicyParams::uniform(SPACE);
        p.logits.context_mut(0, 0).unwrap()[2] = 1.0;
        let mut out = [0.0; 4];
        Greedy(&p).fill_probabilities(0, 0, true, &mut out);
        assert_eq!(out, [0.0, 0.0, 1.0, 0.0]);
    }
}
