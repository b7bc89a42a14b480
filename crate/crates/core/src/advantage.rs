//! Group-relative advantage estimators and the coupled-reward variance
//! diagnostics.
//!
//! All normalizations use the population standard deviation with `epsilon`
//! added to the std (never to the variance). A group whose rewards are all
//! equal gets all-zero advantages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trajectory::{AdvantageBundle, HyperParams, RewardBundle};

/// How the two reward channels are turned into a learning signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Single advantage from `r_acc + alpha * r_tool`.
    Coupled,
    /// Accuracy advantage over the group plus tool advantage over correct rollouts.
    Decoupled,
    /// Accuracy advantage only.
    AccuracyOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coupled" => Ok(Mode::Coupled),
            "decoupled" => Ok(Mode::Decoupled),
            "accuracy_only" => Ok(Mode::AccuracyOnly),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Coupled => "coupled",
            Mode::Decoupled => "decoupled",
            Mode::AccuracyOnly => "accuracy_only",
        })
    }
}

pub(crate) fn mean<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::count(xs.len())
}

/// Population variance.
pub(crate) fn variance<T: Scalar>(xs: &[T]) -> T {
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::count(xs.len())
}

/// Population covariance.
pub(crate) fn covariance<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    let (mx, my) = (mean(xs), mean(ys));
    xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum::<T>() / T::count(xs.len())
}

fn normalize<T: Scalar>(xs: &[T], epsilon: T) -> Vec<T> {
    let first = xs[0];
    if xs.iter().all(|&x| x == first) {
        return vec![T::zero(); xs.len()];
    }
    let m = mean(xs);
    let denom = variance(xs).sqrt() + epsilon;
    xs.iter().map(|&x| (x - m) / denom).collect()
}

/// `(r_i - mean) / (std + epsilon)` over the whole list.
pub fn grpo_advantage<T: Scalar>(rewards: &[T], epsilon: T) -> Result<Vec<T>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    Ok(normalize(rewards, epsilon))
}

/// GRPO advantage of the coupled reward. `r_mix` is recomputed from
/// `r_acc`, `r_tool`, and `alpha` so a stale field cannot leak in.
pub fn mixed_advantage<T: Scalar>(
    bundles: &[RewardBundle<T>],
    alpha: T,
    epsilon: T,
) -> Result<Vec<T>> {
    let mix: Vec<T> = bundles.iter().map(|b| b.r_acc + alpha * b.r_tool).collect();
    grpo_advantage(&mix, epsilon)
}

/// Indices of correct rollouts, ascending.
pub fn qualifying_set<T: Scalar>(bundles: &[RewardBundle<T>]) -> Vec<usize> {
    bundles
        .iter()
        .enumerate()
        .filter(|(_, b)| b.r_ans > T::zero())
        .map(|(i, _)| i)
        .collect()
}

/// Tool advantage normalized only against other correct rollouts. Rollouts
/// outside the qualifying set, and every rollout when fewer than two qualify,
/// get zero.
pub fn conditional_tool_advantage<T: Scalar>(
    bundles: &[RewardBundle<T>],
    epsilon: T,
) -> Result<Vec<T>> {
    if bundles.len() < 2 {
        return Err(Error::GroupTooSmall(bundles.len()));
    }
    let q = qualifying_set(bundles);
    let mut out = vec![T::zero(); bundles.len()];
    if q.len() < 2 {
        return Ok(out);
    }
    let tool: Vec<T> = q.iter().map(|&i| bundles[i].r_tool).collect();
    for (&i, a) in q.iter().zip(normalize(&tool, epsilon)) {
        out[i] = a;
    }
    Ok(out)
}

/// Variance decomposition of the coupled reward for one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport<T> {
    pub alpha: T,
    pub sigma_acc_sq: T,
    pub sigma_tool_sq: T,
    pub covariance: T,
    pub var_mix_direct: T,
    pub var_mix_decomposed: T,
    /// `max_i |A_mix_i - (r_acc_i - mean) / (sigma_acc + epsilon)|`; `None`
    /// when the accuracy rewards have zero variance.
    pub taylor_residual_max: Option<T>,
}

pub fn variance_diagnostics<T: Scalar>(
    bundles: &[RewardBundle<T>],
    alpha: T,
    epsilon: T,
) -> Result<VarianceReport<T>> {
    if bundles.len() < 2 {
        return Err(Error::GroupTooSmall(bundles.len()));
    }
    let acc: Vec<T> = bundles.iter().map(|b| b.r_acc).collect();
    let tool: Vec<T> = bundles.iter().map(|b| b.r_tool).collect();
    let mix: Vec<T> = acc.iter().zip(&tool).map(|(&a, &t)| a + alpha * t).collect();

    let sigma_acc_sq = variance(&acc);
    let sigma_tool_sq = variance(&tool);
    let cov = covariance(&acc, &tool);
    let two = T::lit(2.0);
    let var_mix_decomposed = sigma_acc_sq + alpha * alpha * sigma_tool_sq + two * alpha * cov;

    // Same zero-variance test as the advantages: rounding in the mean can make
    // an all-equal group's variance a tiny positive number.
    let taylor_residual_max = if acc.iter().any(|&a| a != acc[0]) {
        let a_mix = grpo_advantage(&mix, epsilon)?;
        let m = mean(&acc);
        let denom = sigma_acc_sq.sqrt() + epsilon;
        let worst = a_mix
            .iter()
            .zip(&acc)
            .map(|(&am, &a)| (am - (a - m) / denom).abs())
            .fold(T::zero(), T::max);
        Some(worst)
    } else {
        None
    };

    Ok(VarianceReport {
        alpha,
        sigma_acc_sq,
        sigma_tool_sq,
        covariance: cov,
        var_mix_direct: variance(&mix),
        var_mix_decomposed,
        taylor_residual_max,
    })
}

/// Per-rollout advantages for one group under the given mode. Only the
/// channels the mode trains on are filled; the rest are zero.
pub fn advantages_for_group<T: Scalar>(
    bundles: &[RewardBundle<T>],
    hp: &HyperParams<T>,
    mode: Mode,
) -> Result<Vec<AdvantageBundle<T>>> {
    if bundles.len() != hp.group_size {
        return Err(Error::GroupSizeMismatch { expected: hp.group_size, got: bundles.len() });
    }
    let mut out: Vec<AdvantageBundle<T>> =
        bundles.iter().map(|b| AdvantageBundle::zero(b.r_ans > T::zero())).collect();
    match mode {
        Mode::Coupled => {
            for (o, a) in out.iter_mut().zip(mixed_advantage(bundles, hp.alpha, hp.epsilon)?) {
                o.a_mix = a;
            }
        }
        Mode::AccuracyOnly | Mode::Decoupled => {
            let acc: Vec<T> = bundles.iter().map(|b| b.r_acc).collect();
            for (o, a) in out.iter_mut().zip(grpo_advantage(&acc, hp.epsilon)?) {
                o.a_acc = a;
            }
            if mode == Mode::Decoupled {
                let tool = conditional_tool_advantage(bundles, hp.epsilon)?;
                for (o, a) in out.iter_mut().zip(tool) {
                    o.a_tool = a;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{accuracy_reward, tool_reward, JudgeVerdict};
    use proptest::prelude::*;

    const EPS: f64 = 1e-8;

    fn bundle(correct: bool, format_ok: bool, tools: u32, alpha: f64) -> RewardBundle<f64> {
        let hp = HyperParams::<f64>::default();
        let v = JudgeVerdict { correct, format_ok };
        let r_acc = accuracy_reward(v, &hp);
        let r_tool = tool_reward(v, tools);
        RewardBundle {
            r_ans: if correct { 1.0 } else { 0.0 },
            r_fmt: if format_ok { 1.0 } else { 0.0 },
            r_acc,
            r_tool,
            r_mix: r_acc + alpha * r_tool,
        }
    }

    fn four_example() -> Vec<RewardBundle<f64>> {
        vec![
            bundle(true, true, 0, 0.0),
            bundle(true, true, 2, 0.0),
            bundle(false, true, 1, 0.0),
            bundle(false, true, 5, 0.0),
        ]
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn grpo_zero_variance() {
        assert_eq!(grpo_advantage(&[1.0, 1.0, 1.0, 1.0], EPS).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn grpo_alternating() {
        let a = grpo_advantage(&[1.0, 0.0, 1.0, 0.0], EPS).unwrap();
        assert!(close(&a, &[1.0, -1.0, 1.0, -1.0], 1e-6));
    }

    #[test]
    fn grpo_rejects_singletons() {
        assert!(matches!(grpo_advantage(&[1.0], EPS), Err(Error::GroupTooSmall(1))));
        assert!(matches!(grpo_advantage::<f64>(&[], EPS), Err(Error::GroupTooSmall(0))));
    }

    #[test]
    fn grpo_in_f32() {
        let a = grpo_advantage(&[1.0f32, 0.0, 1.0, 0.0], 1e-6).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mixed_collapses_at_zero_alpha() {
        let b = four_example();
        let acc: Vec<f64> = b.iter().map(|b| b.r_acc).collect();
        assert_eq!(mixed_advantage(&b, 0.0, EPS).unwrap(), grpo_advantage(&acc, EPS).unwrap());
    }

    #[test]
    fn mixed_two_element_closed_form() {
        // r_mix = [1.1, 0.1]: half-range 0.5, population std 0.5.
        let b = vec![bundle(true, true, 0, 0.1), bundle(false, true, 0, 0.1)];
        let a = mixed_advantage(&b, 0.1, EPS).unwrap();
        let expect = 0.5 / (0.5 + EPS);
        assert!(close(&a, &[expect, -expect], 1e-12));
    }

    #[test]
    fn mixed_constant_is_zero() {
        let b = vec![bundle(true, true, 1, 0.3); 3];
        assert_eq!(mixed_advantage(&b, 0.3, EPS).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn qualifying_set_cases() {
        assert_eq!(qualifying_set(&four_example()), vec![0, 1]);
        assert!(qualifying_set(&[bundle(false, true, 0, 0.0); 3]).is_empty());
        assert_eq!(qualifying_set(&[bundle(true, true, 0, 0.0); 3]), vec![0, 1, 2]);
    }

    #[test]
    fn conditional_tool_four_example() {
        let a = conditional_tool_advantage(&four_example(), EPS).unwrap();
        assert!(close(&a, &[1.0, -1.0, 0.0, 0.0], 1e-6));
        assert_eq!(&a[2..], &[0.0, 0.0]);
    }

    #[test]
    fn conditional_tool_single_correct() {
        let b = vec![bundle(true, true, 0, 0.0), bundle(false, true, 0, 0.0), bundle(false, false, 2, 0.0)];
        assert_eq!(conditional_tool_advantage(&b, EPS).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn conditional_tool_identical_counts() {
        let b = vec![bundle(true, true, 1, 0.0); 4];
        assert_eq!(conditional_tool_advantage(&b, EPS).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn diagnostics_without_tool_signal() {
        let b = vec![bundle(false, true, 0, 0.0), bundle(false, false, 0, 0.0), bundle(false, true, 1, 0.0)];
        for alpha in [0.0, 0.01, 0.5, 3.0] {
            let r = variance_diagnostics(&b, alpha, EPS).unwrap();
            assert_eq!(r.covariance, 0.0);
            assert!((r.var_mix_direct - r.sigma_acc_sq).abs() < 1e-15);
            assert!(r.taylor_residual_max.unwrap() < 1e-12);
        }
    }

    #[test]
    fn diagnostics_zero_accuracy_variance() {
        let b = vec![bundle(true, true, 0, 0.0), bundle(true, true, 2, 0.0)];
        let r = variance_diagnostics(&b, 0.1, EPS).unwrap();
        assert_eq!(r.sigma_acc_sq, 0.0);
        assert!(r.taylor_residual_max.is_none());
    }

    #[test]
    fn decoupled_mode_example() {
        let hp = HyperParams { group_size: 4, ..HyperParams::<f64>::default() };
        let b = four_example();
        let dec = advantages_for_group(&b, &hp, Mode::Decoupled).unwrap();
        let acc = grpo_advantage(&[1.0, 1.0, 0.1, 0.1], EPS).unwrap();
        for i in 0..4 {
            assert!((dec[i].a_acc - acc[i]).abs() < 1e-12);
            assert_eq!(dec[i].a_mix, 0.0);
        }
        assert!((dec[0].a_tool - 1.0).abs() < 1e-6 && (dec[1].a_tool + 1.0).abs() < 1e-6);
        assert_eq!(
            dec.iter().map(|d| d.in_qualifying_set).collect::<Vec<_>>(),
            vec![true, true, false, false]
        );

        let only = advantages_for_group(&b, &hp, Mode::AccuracyOnly).unwrap();
        for i in 0..4 {
            assert_eq!(only[i].a_acc, dec[i].a_acc);
            assert_eq!(only[i].a_tool, 0.0);
        }

        let coupled = advantages_for_group(&b, &hp, Mode::Coupled).unwrap();
        for i in 0..4 {
            assert_eq!(coupled[i].a_mix, only[i].a_acc);
            assert_eq!(coupled[i].a_acc, 0.0);
        }
    }

    #[test]
    fn group_size_enforced() {
        let hp = HyperParams { group_size: 16, ..HyperParams::<f64>::default() };
        assert!(matches!(
            advantages_for_group(&four_example(), &hp, Mode::Decoupled),
            Err(Error::GroupSizeMismatch { expected: 16, got: 4 })
        ));
    }

    fn arb_bundles() -> impl Strategy<Value = Vec<RewardBundle<f64>>> {
        prop::collection::vec((any::<bool>(), any::<bool>(), 0u32..5), 2..20).prop_map(|v| {
            v.into_iter().map(|(c, f, t)| bundle(c && f, f, t, 0.0)).collect()
        })
    }

    proptest! {
        #[test]
        fn grpo_is_centered_and_whitened(xs in prop::collection::vec(-10.0f64..10.0, 2..40)) {
            let a = grpo_advantage(&xs, EPS).unwrap();
            prop_assert!(mean(&a).abs() <= 1e-9);
            let sd = variance(&xs).sqrt();
            if sd > 1e-6 {
                let out_sd = variance(&a).sqrt();
                let eps_rel = EPS / sd;
                prop_assert!(out_sd <= 1.0 + 1e-12 && out_sd >= 1.0 - 10.0 * eps_rel - 1e-12);
            }
        }

        #[test]
        fn grpo_shift_invariant(xs in prop::collection::vec(-10.0f64..10.0, 2..40), c in -100.0f64..100.0) {
            let a = grpo_advantage(&xs, EPS).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = grpo_advantage(&shifted, EPS).unwrap();
            prop_assert!(close(&a, &b, 1e-9));
        }

        #[test]
        fn grpo_permutation_equivariant(xs in prop::collection::vec(-10.0f64..10.0, 2..20), rot in 0usize..20) {
            let r = rot % xs.len();
            let mut rotated = xs.clone();
            rotated.rotate_left(r);
            let mut a = grpo_advantage(&xs, EPS).unwrap();
            a.rotate_left(r);
            prop_assert!(close(&a, &grpo_advantage(&rotated, EPS).unwrap(), 1e-12));
        }

        #[test]
        fn grpo_scale_preserves_ranking(xs in prop::collection::vec(-10.0f64..10.0, 2..20), c in 0.01f64..100.0) {
            let a = grpo_advantage(&xs, EPS).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            let b = grpo_advantage(&scaled, EPS).unwrap();
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] < xs[j] {
                        prop_assert!(a[i] < a[j] && b[i] < b[j]);
                    }
                }
            }
        }

        #[test]
        fn conditional_tool_respects_qualifying_set(b in arb_bundles()) {
            let a = conditional_tool_advantage(&b, EPS).unwrap();
            let q = qualifying_set(&b);
            for (i, ai) in a.iter().enumerate() {
                if !q.contains(&i) {
                    prop_assert_eq!(*ai, 0.0);
                }
            }
            if q.len() >= 2 {
                let inside: Vec<f64> = q.iter().map(|&i| a[i]).collect();
                prop_assert!(mean(&inside).abs() < 1e-9);
            }
        }

        #[test]
        fn variance_identity(b in arb_bundles(), alpha in 0.0f64..2.0) {
            let r = variance_diagnostics(&b, alpha, EPS).unwrap();
            prop_assert!((r.var_mix_direct - r.var_mix_decomposed).abs() <= 1e-9);
        }

        #[test]
        fn tool_perturbation_leaves_accuracy_channel(b in arb_bundles(), bump in 0.0f64..1.0) {
            let hp = HyperParams { group_size: b.len(), ..HyperParams::<f64>::default() };
            let before = advantages_for_group(&b, &hp, Mode::Decoupled).unwrap();
            let perturbed: Vec<_> = b.iter().map(|x| RewardBundle { r_tool: x.r_tool * bump, ..*x }).collect();
            let after = advantages_for_group(&perturbed, &hp, Mode::Decoupled).unwrap();
            for (x, y) in before.iter().zip(&after) {
                prop_assert_eq!(x.a_acc, y.a_acc);
            }
        }

        #[test]
        fn wrong_rollout_accuracy_leaves_tool_channel(b in arb_bundles(), new_fmt in any::<bool>()) {
            let hp = HyperParams { group_size: b.len(), ..HyperParams::<f64>::default() };
            let before = advantages_for_group(&b, &hp, Mode::Decoupled).unwrap();
            let perturbed: Vec<_> = b
                .iter()
                .map(|x| if x.r_ans > 0.0 { *x } else { bundle(false, new_fmt, 0, 0.0) })
                .collect();
            let after = advantages_for_group(&perturbed, &hp, Mode::Decoupled).unwrap();
            for (x, y) in before.iter().zip(&after) {
                if x.in_qualifying_set {
                    prop_assert_eq!(x.a_tool, y.a_tool);
                }
            }
        }
    }
}
