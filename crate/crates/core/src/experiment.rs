//! Training loop, parameter sweeps, and variance diagnostics.
//!
//! Each iteration: sample `G` rollouts for every prompt in the batch, score
//! them, compute advantages for the configured mode, and take
//! `epochs_per_batch` gradient steps on the resulting loss. Every random draw
//! comes from a stream keyed by the seeds, the iteration, the prompt, and the
//! rollout index, so a run is bit-for-bit reproducible and can be resumed
//! from a checkpoint.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advantage::{
    advantages_for_group, conditional_tool_advantage, grpo_advantage, variance_diagnostics, Mode,
};
use crate::error::{Error, Result};
use crate::policy::{apply_update, hdpo_loss, Checkpoint, ColdStart, PolicyParams, UpdateConfig};
use crate::reward::score_group;
use crate::rng;
use crate::toolworld::{
    evaluate, generate_prompt_range, rollout_group_salted, EnvConfig, EvalReport,
};
use crate::trajectory::{
    read_jsonl, write_jsonl, AdvantageBundle, HyperParams, Prompt, RewardBundle, Trajectory,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub mode: Mode,
    pub iterations: usize,
    pub prompts_per_batch: usize,
    pub seed: u64,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    /// Also checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Train on a fixed prompt set (JSONL) instead of fresh prompts.
    pub prompt_set: Option<PathBuf>,
    /// Held-out episodes played after training; 0 skips evaluation.
    pub eval_episodes: usize,
    /// Starting policy; all zeros is uniform.
    #[serde(flatten)]
    pub init: ColdStart,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            mode: Mode::Decoupled,
            iterations: 2000,
            prompts_per_batch: 32,
            seed: 0,
            metrics_path: None,
            checkpoint_path: None,
            checkpoint_every: 0,
            prompt_set: None,
            eval_episodes: 4000,
            init: ColdStart::default(),
        }
    }
}

/// Everything a training run needs. Serialized as TOML with sections
/// `[env]`, `[hp]`, `[update]`, `[run]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub hp: HyperParams<f64>,
    pub update: UpdateConfig,
    pub run: RunSettings,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.update.validate()?;
        if self.hp.group_size < 2 {
            return Err(Error::config("hp.group_size must be >= 2"));
        }
        if !(self.hp.epsilon > 0.0) {
            return Err(Error::config("hp.epsilon must be > 0"));
        }
        if !(self.hp.alpha >= 0.0) {
            return Err(Error::config("hp.alpha must be >= 0"));
        }
        if self.run.iterations < 1 {
            return Err(Error::config("run.iterations must be >= 1"));
        }
        if self.run.prompts_per_batch < 1 {
            return Err(Error::config("run.prompts_per_batch must be >= 1"));
        }
        self.run.init.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Reads a config file (or defaults when `path` is `None`) and applies
    /// `section.key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
                toml::from_str(&text)?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Ok(toml::Value::Table(value).try_into()?)
    }

    /// Stable digest of everything that affects the trained parameters.
    pub fn hash(&self) -> String {
        let key = serde_json::json!({
            "env": self.env,
            "hp": self.hp,
            "update": self.update,
            "mode": self.run.mode,
            "prompts_per_batch": self.run.prompts_per_batch,
            "seed": self.run.seed,
            "prompt_set": self.run.prompt_set,
            "init": self.run.init,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::config(format!("override key {path:?} is not section.key")))?;
    if !["env", "hp", "update", "run"].contains(&section) {
        return Err(Error::config(format!("unknown config section {section:?}")));
    }
    let raw = raw.trim();
    // Parse as a TOML value; bare words fall back to strings.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(section_table) = entry else {
        return Err(Error::config(format!("config section {section:?} is not a table")));
    };
    section_table.insert(key.trim().to_string(), value);
    Ok(())
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub accuracy: f64,
    /// Mean tool calls per episode.
    pub tool_rate: f64,
    /// Fraction of episodes with at least one tool call.
    pub tool_invocation_fraction: f64,
    pub mean_qualifying_size: f64,
    /// Mean |GRPO accuracy advantage| over the batch.
    pub mean_a_acc_magnitude: f64,
    /// Mean |conditional tool advantage| over the batch. Both magnitudes are
    /// computed from the rewards in every mode, whether or not the mode
    /// trains on that channel.
    pub mean_a_tool_magnitude: f64,
    pub loss: f64,
}

enum PromptSource {
    Fresh,
    Fixed(Vec<Prompt>),
}

/// Stepwise trainer. [`train`] drives it to completion.
pub struct Trainer {
    cfg: RunConfig,
    params: PolicyParams,
    next_iteration: usize,
    source: PromptSource,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let source = match &cfg.run.prompt_set {
            Some(path) => {
                let file = File::open(path).map_err(|e| Error::file(path, e))?;
                let prompts: Vec<Prompt> = read_jsonl(BufReader::new(file))?;
                if prompts.is_empty() {
                    return Err(Error::config(format!("prompt set {} is empty", path.display())));
                }
                PromptSource::Fixed(prompts)
            }
            None => PromptSource::Fresh,
        };
        let params = PolicyParams::cold_start(cfg.env.space(), &cfg.run.init);
        Ok(Trainer { cfg, params, next_iteration: 0, source })
    }

    /// Continues from a checkpoint written by a run with the same config.
    pub fn resume(cfg: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        if ckpt.config_hash != t.cfg.hash() {
            return Err(Error::config(format!(
                "checkpoint config hash {} does not match run config {}",
                ckpt.config_hash,
                t.cfg.hash()
            )));
        }
        if ckpt.params.logits.space != t.cfg.env.space() {
            return Err(Error::ShapeMismatch("checkpoint action space differs from env".into()));
        }
        t.params = ckpt.params;
        t.next_iteration = ckpt.next_iteration;
        Ok(t)
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn next_iteration(&self) -> usize {
        self.next_iteration
    }

    pub fn finished(&self) -> bool {
        self.next_iteration >= self.cfg.run.iterations
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone(), self.cfg.hash(), self.next_iteration)
    }

    fn batch(&self, iteration: usize) -> Vec<Prompt> {
        let n = self.cfg.run.prompts_per_batch;
        match &self.source {
            PromptSource::Fresh => generate_prompt_range(&self.cfg.env, (iteration * n) as u64, n),
            PromptSource::Fixed(set) => {
                (0..n).map(|j| set[(iteration * n + j) % set.len()].clone()).collect()
            }
        }
    }

    /// Runs one iteration. Sampled trajectories are handed to `dump` when set.
    pub fn step(
        &mut self,
        dump: Option<&mut dyn FnMut(&[Trajectory]) -> Result<()>>,
    ) -> Result<IterationMetrics> {
        let iteration = self.next_iteration;
        let cfg = &self.cfg;
        let hp = &cfg.hp;
        let g = hp.group_size;
        let prompts = self.batch(iteration);
        let salt = rng::derive_key(cfg.run.seed, &[rng::TRAIN, iteration as u64]);

        struct Scored {
            trajectories: Vec<Trajectory>,
            rewards: Vec<RewardBundle<f64>>,
            advantages: Vec<AdvantageBundle<f64>>,
            acc_diag: Vec<f64>,
            tool_diag: Vec<f64>,
        }
        let params = &self.params;
        let scored: Vec<Scored> = prompts
            .par_iter()
            .map(|p| -> Result<Scored> {
                let group = rollout_group_salted(params, p, &cfg.env, g, salt)?;
                let rewards = score_group(&group, p, hp)?;
                let advantages = advantages_for_group(&rewards, hp, cfg.run.mode)?;
                let acc: Vec<f64> = rewards.iter().map(|b| b.r_acc).collect();
                Ok(Scored {
                    acc_diag: grpo_advantage(&acc, hp.epsilon)?,
                    tool_diag: conditional_tool_advantage(&rewards, hp.epsilon)?,
                    trajectories: group.trajectories,
                    rewards,
                    advantages,
                })
            })
            .collect::<Result<_>>()?;

        let trajectories: Vec<Trajectory> =
            scored.iter().flat_map(|s| s.trajectories.iter().cloned()).collect();
        let advantages: Vec<AdvantageBundle<f64>> =
            scored.iter().flat_map(|s| s.advantages.iter().copied()).collect();
        if let Some(dump) = dump {
            dump(&trajectories)?;
        }

        let mut first_loss = None;
        for _ in 0..cfg.update.epochs_per_batch {
            let (loss, grad) =
                hdpo_loss(&trajectories, &advantages, &self.params, hp, &cfg.update, cfg.run.mode)?;
            first_loss.get_or_insert(loss);
            self.params = apply_update(&self.params, &grad, &cfg.update)?;
        }

        let n = trajectories.len() as f64;
        let rewards = scored.iter().flat_map(|s| s.rewards.iter());
        let metrics = IterationMetrics {
            iteration,
            accuracy: rewards.map(|b| b.r_ans).sum::<f64>() / n,
            tool_rate: trajectories.iter().map(|t| f64::from(t.tool_calls)).sum::<f64>() / n,
            tool_invocation_fraction: trajectories.iter().filter(|t| t.tool_calls > 0).count()
                as f64
                / n,
            mean_qualifying_size: advantages.iter().filter(|a| a.in_qualifying_set).count() as f64
                / scored.len() as f64,
            mean_a_acc_magnitude: scored
                .iter()
                .flat_map(|s| s.acc_diag.iter())
                .map(|a| a.abs())
                .sum::<f64>()
                / n,
            mean_a_tool_magnitude: scored
                .iter()
                .flat_map(|s| s.tool_diag.iter())
                .map(|a| a.abs())
                .sum::<f64>()
                / n,
            loss: first_loss.expect("at least one epoch"),
        };
        self.next_iteration += 1;
        Ok(metrics)
    }
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<IterationMetrics>,
    pub eval: Option<EvalReport>,
}

/// Optional side outputs of [`train_with`].
#[derive(Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<Checkpoint>,
    pub dump_trajectories: Option<PathBuf>,
}

/// Runs every iteration of `cfg` in memory and on disk: metrics CSV and
/// checkpoints go to the configured paths when set.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(cfg, TrainOptions::default())
}

fn write_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    trainer.checkpoint().write(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn train_with(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    let resuming = opts.resume.is_some();
    let mut trainer = match opts.resume {
        Some(ckpt) => Trainer::resume(cfg.clone(), ckpt)?,
        None => Trainer::new(cfg.clone())?,
    };

    let mut metrics_writer = match &cfg.run.metrics_path {
        Some(path) => {
            let append = resuming && path.exists();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(path)
                .map_err(|e| Error::file(path, e))?;
            Some(csv::WriterBuilder::new().has_headers(!append).from_writer(file))
        }
        None => None,
    };
    let mut dump_writer = match &opts.dump_trajectories {
        Some(path) => Some(BufWriter::new(File::create(path).map_err(|e| Error::file(path, e))?)),
        None => None,
    };

    let mut metrics = Vec::new();
    while !trainer.finished() {
        let m = match dump_writer.as_mut() {
            Some(w) => {
                let mut sink = |ts: &[Trajectory]| write_jsonl(&mut *w, ts);
                trainer.step(Some(&mut sink))?
            }
            None => trainer.step(None)?,
        };
        if let Some(w) = metrics_writer.as_mut() {
            w.serialize(m)?;
        }
        metrics.push(m);
        if let Some(path) = &cfg.run.checkpoint_path {
            let every = cfg.run.checkpoint_every;
            if every > 0 && trainer.next_iteration() % every == 0 && !trainer.finished() {
                write_checkpoint(&trainer, path)?;
            }
        }
    }
    if let Some(w) = metrics_writer.as_mut() {
        w.flush()?;
    }
    if let Some(w) = dump_writer.as_mut() {
        w.flush()?;
    }
    if let Some(path) = &cfg.run.checkpoint_path {
        write_checkpoint(&trainer, path)?;
    }
    let eval = (cfg.run.eval_episodes > 0)
        .then(|| evaluate(trainer.params(), &cfg.env, cfg.run.eval_episodes, cfg.run.seed));
    Ok(TrainOutcome { params: trainer.params, metrics, eval })
}

/// Hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Alpha,
    WTool,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParameter::Alpha),
            "w_tool" => Ok(SweepParameter::WTool),
            other => Err(Error::config(format!("cannot sweep {other:?}; use alpha or w_tool"))),
        }
    }
}

/// Final evaluation of one (value, seed) run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub tool_rate: f64,
    pub tool_invocation_fraction: f64,
    pub easy_accuracy: f64,
    pub easy_tool_fraction: f64,
    pub hard_accuracy: f64,
    pub hard_tool_fraction: f64,
}

/// Config for replicate `r` of a sweep: run and env seeds both shift by `r`,
/// and nothing is written to disk.
pub fn replicate_config(base: &RunConfig, r: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.run.seed = base.run.seed.wrapping_add(r);
    cfg.env.seed = base.env.seed.wrapping_add(r);
    cfg.run.metrics_path = None;
    cfg.run.checkpoint_path = None;
    if cfg.run.eval_episodes == 0 {
        cfg.run.eval_episodes = RunSettings::default().eval_episodes;
    }
    cfg
}

/// Trains once per (value, replicate). Replicate `r` of every value shares
/// the same seeds.
pub fn sweep(
    base: &RunConfig,
    parameter: SweepParameter,
    values: &[f64],
    replicates: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    if replicates == 0 {
        return Err(Error::config("sweep needs at least one replicate"));
    }
    base.validate()?;
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| (0..replicates as u64).map(move |r| (v, r)))
        .collect();
    jobs.par_iter()
        .map(|&(value, r)| {
            let mut cfg = replicate_config(base, r);
            match parameter {
                SweepParameter::Alpha => cfg.hp.alpha = value,
                SweepParameter::WTool => cfg.hp.w_tool = value,
            }
            let out = train(&cfg)?;
            let e = out.eval.expect("replicates always evaluate");
            Ok(SweepRow {
                parameter,
                value,
                seed: cfg.run.seed,
                accuracy: e.accuracy,
                tool_rate: e.tool_rate,
                tool_invocation_fraction: e.tool_invocation_fraction,
                easy_accuracy: e.easy_accuracy,
                easy_tool_fraction: e.easy_tool_fraction,
                hard_accuracy: e.hard_accuracy,
                hard_tool_fraction: e.hard_tool_fraction,
            })
        })
        .collect()
}

/// One `(group, alpha)` row of the diagnostics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRow {
    pub group_id: u64,
    pub alpha: f64,
    pub sigma_acc_sq: f64,
    pub sigma_tool_sq: f64,
    pub cov: f64,
    pub taylor_residual_max: Option<f64>,
}

const DIAGNOSE_ID_BASE: u64 = 1 << 52;

/// Samples `groups` rollout groups under `params` and decomposes the coupled
/// reward variance of each at every `alpha`.
pub fn diagnose(
    cfg: &RunConfig,
    params: &PolicyParams,
    alphas: &[f64],
    groups: usize,
) -> Result<Vec<DiagnosticRow>> {
    cfg.validate()?;
    let prompts = generate_prompt_range(&cfg.env, DIAGNOSE_ID_BASE, groups);
    let salt = rng::derive_key(cfg.run.seed, &[rng::DIAGNOSE]);
    let per_group: Vec<Vec<DiagnosticRow>> = prompts
        .par_iter()
        .map(|p| -> Result<Vec<DiagnosticRow>> {
            let group = rollout_group_salted(params, p, &cfg.env, cfg.hp.group_size, salt)?;
            let rewards = score_group(&group, p, &cfg.hp)?;
            alphas
                .iter()
                .map(|&alpha| {
                    let r = variance_diagnostics(&rewards, alpha, cfg.hp.epsilon)?;
                    Ok(DiagnosticRow {
                        group_id: p.id - DIAGNOSE_ID_BASE,
                        alpha,
                        sigma_acc_sq: r.sigma_acc_sq,
                        sigma_tool_sq: r.sigma_tool_sq,
                        cov: r.covariance,
                        taylor_residual_max: r.taylor_residual_max,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_group.into_iter().flatten().collect())
}

/// Writes diagnostics with a fixed header; a missing residual is `NA`.
pub fn write_diagnostics_csv<W: Write>(w: W, rows: &[DiagnosticRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "group_id",
        "alpha",
        "sigma_acc_sq",
        "sigma_tool_sq",
        "cov",
        "taylor_residual_max",
    ])?;
    for r in rows {
        out.write_record([
            r.group_id.to_string(),
            r.alpha.to_string(),
            r.sigma_acc_sq.to_string(),
            r.sigma_tool_sq.to_string(),
            r.cov.to_string(),
            r.taylor_residual_max.map_or_else(|| "NA".to_string(), |v| v.to_string()),
        ])?;
    }
    out.flush()?;
    Ok(())
}

const METRICS_HEADER: [&str; 8] = [
    "iteration",
    "accuracy",
    "tool_rate",
    "tool_invocation_fraction",
    "mean_qualifying_size",
    "mean_a_acc_magnitude",
    "mean_a_tool_magnitude",
    "loss",
];

const SWEEP_HEADER: [&str; 10] = [
    "parameter",
    "value",
    "seed",
    "accuracy",
    "tool_rate",
    "tool_invocation_fraction",
    "easy_accuracy",
    "easy_tool_fraction",
    "hard_accuracy",
    "hard_tool_fraction",
];

/// The header is written even when `rows` is empty.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[IterationMetrics]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(SWEEP_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.run.iterations = 3;
        cfg.run.prompts_per_batch = 4;
        cfg.run.eval_episodes = 0;
        cfg
    }

    #[test]
    fn csv_headers_match_serialized_fields() {
        let mut empty = Vec::new();
        write_metrics_csv(&mut empty, &[]).unwrap();
        let m = train(&small()).unwrap().metrics;
        let mut full = Vec::new();
        write_metrics_csv(&mut full, &m).unwrap();
        let mut derived = csv::Writer::from_writer(Vec::new());
        derived.serialize(m[0]).unwrap();
        let derived = String::from_utf8(derived.into_inner().unwrap()).unwrap();
        let header = derived.lines().next().unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim_end(), header);
        let full = String::from_utf8(full).unwrap();
        assert_eq!(full.lines().next().unwrap(), header);
        assert_eq!(full.lines().count(), m.len() + 1);

        let row = SweepRow {
            parameter: SweepParameter::Alpha,
            value: 0.0,
            seed: 0,
            accuracy: 0.0,
            tool_rate: 0.0,
            tool_invocation_fraction: 0.0,
            easy_accuracy: 0.0,
            easy_tool_fraction: 0.0,
            hard_accuracy: 0.0,
            hard_tool_fraction: 0.0,
        };
        let mut derived = csv::Writer::from_writer(Vec::new());
        derived.serialize(row).unwrap();
        let derived = String::from_utf8(derived.into_inner().unwrap()).unwrap();
        let mut empty = Vec::new();
        write_sweep_csv(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().lines().next(), derived.lines().next());
    }

    #[test]
    fn overrides_apply_by_section() {
        let cfg = RunConfig::load(
            None,
            &[
                "env.p_hard=0.3".into(),
                "run.mode=accuracy_only".into(),
                "update.max_grad_norm=2.5".into(),
                "hp.group_size = 8".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.env.p_hard, 0.3);
        assert_eq!(cfg.run.mode, Mode::AccuracyOnly);
        assert_eq!(cfg.update.max_grad_norm, Some(2.5));
        assert_eq!(cfg.hp.group_size, 8);
        assert!(RunConfig::load(None, &["nosection=1".into()]).is_err());
        assert!(RunConfig::load(None, &["bogus.key=1".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = small();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_rejected_before_work() {
        let mut cfg = small();
        cfg.run.iterations = 0;
        assert!(matches!(train(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = small();
        cfg.env.p_reveal = 0.0;
        assert!(matches!(train(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn one_iteration_one_update_per_epoch() {
        let mut cfg = small();
        cfg.run.iterations = 1;
        cfg.update.epochs_per_batch = 3;
        let out = train(&cfg).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.params.version, 3);
    }

    #[test]
    fn metrics_are_in_range() {
        let out = train(&small()).unwrap();
        for m in &out.metrics {
            assert!((0.0..=1.0).contains(&m.accuracy));
            assert!((0.0..=1.0).contains(&m.tool_invocation_fraction));
            assert!(m.mean_qualifying_size <= 16.0);
            assert!(m.tool_rate >= 0.0);
        }
    }

    #[test]
    fn hash_tracks_training_inputs_only() {
        let a = small();
        let mut b = a.clone();
        b.run.metrics_path = Some("elsewhere.csv".into());
        b.run.iterations = 99;
        assert_eq!(a.hash(), b.hash());
        b.hp.w_tool = 0.3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn diagnostics_csv_header_and_na() {
        let rows = [DiagnosticRow {
            group_id: 0,
            alpha: 0.1,
            sigma_acc_sq: 0.0,
            sigma_tool_sq: 0.0,
            cov: 0.0,
            taylor_residual_max: None,
        }];
        let mut buf = Vec::new();
        write_diagnostics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "group_id,alpha,sigma_acc_sq,sigma_tool_sq,cov,taylor_residual_max"
        );
        assert!(text.lines().nth(1).unwrap().ends_with(",NA"));
    }
}
