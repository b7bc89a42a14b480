//! Decoupled accuracy/efficiency policy optimization for tool-using agents,
//! studied in a synthetic environment.
//!
//! The reward and advantage math ([`reward`], [`advantage`]) is generic over
//! the scalar type; the aliases below fix it to `f64`, which is what the
//! optimizer and the experiment driver use. `*F32` aliases are provided for
//! callers that want single precision.

pub mod advantage;
pub mod curation;
pub mod error;
pub mod experiment;
pub mod policy;
pub mod reward;
mod rng;
pub mod scalar;
pub mod stats;
pub mod toolworld;
pub mod trajectory;

pub use advantage::{
    advantages_for_group, conditional_tool_advantage, grpo_advantage, mixed_advantage,
    qualifying_set, variance_diagnostics, Mode,
};
pub use curation::{
    calibration_keeps, difficulty_calibration_filter, pass_at_k, solvability_filter,
    solvability_keeps, FilterOutcome, PassAtKReport,
};
pub use error::{Error, Result};
pub use experiment::{
    diagnose, sweep, train, train_with, DiagnosticRow, IterationMetrics, RunConfig, RunSettings,
    SweepParameter, SweepRow, TrainOptions, TrainOutcome, Trainer,
};
pub use policy::{
    action_distribution, apply_update, clipped_surrogate_loss, hdpo_loss, Checkpoint, Gradient,
    ColdStart, Greedy, LogitTable, Policy, PolicyParams, UpdateConfig,
};
pub use reward::{
    accuracy_reward, coupled_reward, judge, score_group, tool_reward, JudgeVerdict, PromptLookup,
};
pub use scalar::{RewardScalar, Scalar};
pub use toolworld::{
    evaluate, generate_prompts, oracle_policy_metrics, rollout_group, step, EnvConfig, EnvState,
    EvalReport, Transition,
};
pub use trajectory::{
    validate_group, ActionSpace, Difficulty, Prompt, RolloutGroup, Step, Trajectory, Violation,
};

pub type RewardBundle = trajectory::RewardBundle<f64>;
pub type AdvantageBundle = trajectory::AdvantageBundle<f64>;
pub type HyperParams = trajectory::HyperParams<f64>;
pub type VarianceReport = advantage::VarianceReport<f64>;

pub type RewardBundleF32 = trajectory::RewardBundle<f32>;
pub type AdvantageBundleF32 = trajectory::AdvantageBundle<f32>;
pub type HyperParamsF32 = trajectory::HyperParams<f32>;
pub type VarianceReportF32 = advantage::VarianceReport<f32>;
