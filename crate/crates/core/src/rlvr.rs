//! The GRPO core: group-relative advantages, per-token KL against the frozen
//! reference, the KL-regularized group loss with optional per-sample
//! coefficients, and the AdamW step with warm-up + cosine schedule.
//!
//! The likelihood ratio is identically 1 at evaluation (the old policy is the
//! current policy and ratio clipping is omitted), so the policy-gradient term
//! reduces to the advantage-weighted log-likelihood with a stop-gradient on
//! the advantage.

use crate::error::{CoreError, Result};
use crate::numerics::ensure_finite;
use serde::{Deserialize, Serialize};

pub const ADVANTAGE_STD_FLOOR: f64 = 1e-6;

/// Group-relative advantages: (r_i - mean) / max(population std, eps),
/// broadcast over every token of trajectory i. A zero-variance group yields
/// exactly zero advantages.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(CoreError::InvalidArgument(
            "group_advantages needs G >= 2 rewards".into(),
        ));
    }
    ensure_finite(rewards, "group rewards")?;
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let denom = var.sqrt().max(eps);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Nonnegative per-token KL estimator: rho - log rho - 1 with
/// rho = exp(logp_ref - logp_cur). Zero iff the log-probs agree.
#[inline]
pub fn kl_per_token(logp_cur: f64, logp_ref: f64) -> f64 {
    let delta = logp_ref - logp_cur;
    delta.exp() - delta - 1.0
}

/// One rollout group's contribution to the loss.
#[derive(Debug, Clone)]
pub struct GroupEval {
    pub loss: f64,
    /// per trajectory, per token: the coefficient on grad log pi_theta such
    /// that the loss gradient is sum_{i,t} pg_weights[i][t] * grad logp_{i,t}
    pub pg_weights: Vec<Vec<f64>>,
    /// mean of kl_per_token over all tokens in the group
    pub mean_kl: f64,
    pub n_tokens: usize,
    /// empty trajectories contribute nothing and are counted here
    pub n_empty: usize,
}

/// KL-regularized group loss for one sample:
///
///   loss = -(1/G) sum_i (1/|o_i|) sum_t [ A_i * logp_cur - beta * kl ]
///
/// with gradient -(1/G) sum_i (1/|o_i|) sum_t [ A_i - beta*(1 - rho) ] * grad logp.
pub fn grpo_loss(
    advantages: &[f64],
    cur_logprobs: &[Vec<f64>],
    ref_logprobs: &[Vec<f64>],
    beta: f64,
) -> Result<GroupEval> {
    let g = advantages.len();
    if g == 0 || cur_logprobs.len() != g || ref_logprobs.len() != g {
        return Err(CoreError::DimMismatch {
            context: "grpo_loss group arrays".into(),
            expected: g,
            got: cur_logprobs.len().min(ref_logprobs.len()),
        });
    }
    if beta < 0.0 {
        return Err(CoreError::InvalidArgument("beta must be >= 0".into()));
    }
    let inv_g = 1.0 / g as f64;
    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut n_tokens = 0usize;
    let mut n_empty = 0usize;
    let mut pg_weights = Vec::with_capacity(g);
    for i in 0..g {
        let cur = &cur_logprobs[i];
        let refp = &ref_logprobs[i];
        if cur.len() != refp.len() {
            return Err(CoreError::DimMismatch {
                context: format!("trajectory {i} logprob lengths"),
                expected: cur.len(),
                got: refp.len(),
            });
        }
        if cur.is_empty() {
            n_empty += 1;
            pg_weights.push(Vec::new());
            continue;
        }
        let inv_len = 1.0 / cur.len() as f64;
        let mut w = Vec::with_capacity(cur.len());
        for (&lc, &lr) in cur.iter().zip(refp.iter()) {
            let rho = (lr - lc).exp();
            let kl = rho - (lr - lc) - 1.0;
            loss -= inv_g * inv_len * (advantages[i] * lc - beta * kl);
            // d kl / d logp_cur = 1 - rho
            w.push(-inv_g * inv_len * (advantages[i] - beta * (1.0 - rho)));
            kl_sum += kl;
            n_tokens += 1;
        }
        pg_weights.push(w);
    }
    Ok(GroupEval {
        loss,
        pg_weights,
        mean_kl: if n_tokens > 0 { kl_sum / n_tokens as f64 } else { 0.0 },
        n_tokens,
        n_empty,
    })
}

#[derive(Debug, Clone)]
pub struct BatchEval {
    /// mean over samples of the per-group losses
    pub loss: f64,
    /// per-group evaluations; pg_weights already include the 1/n_samples
    /// batch factor, so they feed the backward pass unscaled
    pub groups: Vec<GroupEval>,
    pub mean_kl: f64,
}

/// Batch objective with per-sample KL coefficients; identical to the static
/// GRPO batch loss when every beta equals beta0.
pub fn rdbcl_loss(
    groups: &[(&[f64], &[Vec<f64>], &[Vec<f64>])],
    betas: &[f64],
) -> Result<BatchEval> {
    if groups.len() != betas.len() {
        return Err(CoreError::DimMismatch {
            context: "rdbcl_loss betas per group".into(),
            expected: groups.len(),
            got: betas.len(),
        });
    }
    if groups.is_empty() {
        return Err(CoreError::InvalidArgument("rdbcl_loss needs >= 1 group".into()));
    }
    let inv_s = 1.0 / groups.len() as f64;
    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut kl_tokens = 0usize;
    let mut evals = Vec::with_capacity(groups.len());
    for ((adv, cur, refp), &beta) in groups.iter().zip(betas.iter()) {
        let mut e = grpo_loss(adv, cur, refp, beta)?;
        loss += inv_s * e.loss;
        kl_sum += e.mean_kl * e.n_tokens as f64;
        kl_tokens += e.n_tokens;
        for w in e.pg_weights.iter_mut().flat_map(|t| t.iter_mut()) {
            *w *= inv_s;
        }
        evals.push(e);
    }
    Ok(BatchEval {
        loss,
        groups: evals,
        mean_kl: if kl_tokens > 0 { kl_sum / kl_tokens as f64 } else { 0.0 },
    })
}

// ---------------------------------------------------------------------------
// AdamW with linear warm-up and cosine decay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_max: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_max: 2e-2,
            warmup_ratio: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub cfg: OptimizerConfig,
    pub total_steps: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl OptimizerState {
    pub fn new(cfg: OptimizerConfig, total_steps: usize, n_params: usize) -> Self {
        OptimizerState {
            cfg,
            total_steps: total_steps.max(1),
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate for a 1-based step index: linear warm-up to lr_max over
    /// round(warmup_ratio * total_steps) steps, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = ((self.cfg.warmup_ratio * self.total_steps as f64).round() as usize).max(1);
        if step <= warmup {
            return self.cfg.lr_max * step as f64 / warmup as f64;
        }
        let span = (self.total_steps.saturating_sub(warmup)).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        self.cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// One AdamW update. A non-finite gradient is an error and applies no
    /// update and no state change.
    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != theta.len() || grad.len() != self.m.len() {
            return Err(CoreError::DimMismatch {
                context: "optimizer_step gradient".into(),
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        ensure_finite(grad, "optimizer gradient")?;
        self.step += 1;
        let t = self.step;
        let lr = self.lr_at(t);
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for i in 0..theta.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_rel_err, Rng, FD_STEP};
    use crate::policy::{PolicyDims, PolicyParams};
    use proptest::prelude::*;

    #[test]
    fn advantages_zero_variance() {
        let a = group_advantages(&[1.7, 1.7, 1.7, 1.7], ADVANTAGE_STD_FLOOR).unwrap();
        assert!(a.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn advantages_two_point() {
        let a = group_advantages(&[1.0, 0.0], ADVANTAGE_STD_FLOOR).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12);
        assert!((a[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn advantages_four_point() {
        let a = group_advantages(&[1.0, 1.0, 0.0, 0.0], ADVANTAGE_STD_FLOOR).unwrap();
        for (x, e) in a.iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn advantages_need_two() {
        assert!(group_advantages(&[1.0], ADVANTAGE_STD_FLOOR).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_per_token(-1.3, -1.3), 0.0);
        // rho = 2: logp_ref - logp_cur = ln 2
        let k2 = kl_per_token(0.0, 2.0f64.ln());
        assert!((k2 - (2.0 - 2.0f64.ln() - 1.0)).abs() < 1e-12);
        assert!((k2 - 0.3068528194400547).abs() < 1e-10);
        // rho = 0.5
        let kh = kl_per_token(0.0, 0.5f64.ln());
        assert!((kh - (0.5 + 2.0f64.ln() - 1.0)).abs() < 1e-12);
        assert!((kh - 0.19314718055994531).abs() < 1e-10);
    }

    #[test]
    fn grpo_zero_advantage_at_reference_is_zero() {
        let adv = [0.0, 0.0];
        let lp = vec![vec![-1.0, -2.0], vec![-0.5]];
        let e = grpo_loss(&adv, &lp, &lp, 0.15).unwrap();
        assert_eq!(e.loss, 0.0);
        assert!(e.pg_weights.iter().flatten().all(|w| *w == 0.0));
        assert_eq!(e.mean_kl, 0.0);
    }

    #[test]
    fn grpo_beta_zero_is_pure_policy_gradient() {
        let adv = [1.0, -1.0];
        let cur = vec![vec![-1.0, -2.0], vec![-0.5, -0.25]];
        let refp = vec![vec![-1.5, -1.0], vec![-0.75, -0.5]];
        let e = grpo_loss(&adv, &cur, &refp, 0.0).unwrap();
        let expect = -0.5 * ((1.0) * (-1.0 + -2.0) / 2.0 + (-1.0) * (-0.5 + -0.25) / 2.0);
        assert!((e.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_trajectory_is_flagged_and_contributes_zero() {
        let adv = [1.0, -1.0];
        let cur = vec![vec![], vec![-0.5]];
        let refp = vec![vec![], vec![-0.5]];
        let e = grpo_loss(&adv, &cur, &refp, 0.1).unwrap();
        assert_eq!(e.n_empty, 1);
        // only trajectory 1 contributes: -(1/2) * (-1.0 * -0.5 - 0.1 * 0)
        assert!((e.loss - (-0.25)).abs() < 1e-12);
        assert!(e.pg_weights[0].is_empty());
    }

    #[test]
    fn rdbcl_constant_betas_equal_static_mean() {
        let adv_a = [1.0, -1.0];
        let adv_b = [0.5, -0.5];
        let cur_a = vec![vec![-1.0, -0.7], vec![-2.0]];
        let ref_a = vec![vec![-1.2, -0.6], vec![-1.8]];
        let cur_b = vec![vec![-0.4], vec![-0.9, -1.1]];
        let ref_b = vec![vec![-0.5], vec![-1.0, -1.0]];
        let beta0 = 0.15;
        let batch = rdbcl_loss(
            &[(&adv_a, &cur_a, &ref_a), (&adv_b, &cur_b, &ref_b)],
            &[beta0, beta0],
        )
        .unwrap();
        let sa = grpo_loss(&adv_a, &cur_a, &ref_a, beta0).unwrap();
        let sb = grpo_loss(&adv_b, &cur_b, &ref_b, beta0).unwrap();
        assert!((batch.loss - 0.5 * (sa.loss + sb.loss)).abs() < 1e-12);
    }

    #[test]
    fn rdbcl_two_sample_hand_fixture() {
        // one token per trajectory keeps the hand evaluation short
        let adv = [1.0, -1.0];
        let cur = vec![vec![-1.0], vec![-2.0]];
        let refp = vec![vec![-1.5], vec![-1.5]];
        let betas = [0.15, 0.03];
        let kl = |lc: f64, lr: f64| {
            let rho = (lr - lc) as f64;
            rho.exp() - rho - 1.0
        };
        // group 0 (beta 0.15)
        let g0 = -0.5 * ((1.0 * -1.0 - 0.15 * kl(-1.0, -1.5)) + (-1.0 * -2.0 - 0.15 * kl(-2.0, -1.5)));
        // group 1 (beta 0.03), same trajectories
        let g1 = -0.5 * ((1.0 * -1.0 - 0.03 * kl(-1.0, -1.5)) + (-1.0 * -2.0 - 0.03 * kl(-2.0, -1.5)));
        let batch = rdbcl_loss(
            &[(&adv, &cur, &refp), (&adv, &cur, &refp)],
            &betas,
        )
        .unwrap();
        assert!((batch.loss - 0.5 * (g0 + g1)).abs() < 1e-12);
    }

    #[test]
    fn rdbcl_length_mismatch_errors() {
        let adv = [1.0, -1.0];
        let cur = vec![vec![-1.0], vec![-2.0]];
        assert!(rdbcl_loss(&[(&adv[..], &cur[..], &cur[..])], &[0.1, 0.2]).is_err());
    }

    /// Full-loss gradient check against finite differences on a random
    /// desk-scale policy fixture.
    #[test]
    fn rdbcl_gradient_matches_finite_differences() {
        let dims = PolicyDims {
            vocab: 14,
            embed: 6,
            hidden: 10,
            max_context: 16,
        };
        let mut rng = Rng::new(1717);
        let params = PolicyParams::init(dims, &mut rng);
        let mut ref_params = params.clone();
        for v in ref_params.w2.data.iter_mut() {
            *v += 0.05 * rng.next_gaussian();
        }
        let question = vec![1usize, 3];
        let trajs: Vec<Vec<usize>> = (0..3)
            .map(|_| (0..4).map(|_| rng.below(dims.vocab)).collect())
            .collect();
        let advantages = group_advantages(&[1.7, 0.7, -0.7], ADVANTAGE_STD_FLOOR).unwrap();
        let ref_lp: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| ref_params.logprobs_under(&question, t).unwrap())
            .collect();
        let beta = 0.15;

        let loss_of = |theta: &[f64]| -> f64 {
            let p = PolicyParams::unflatten(dims, theta).unwrap();
            let cur: Vec<Vec<f64>> = trajs
                .iter()
                .map(|t| p.logprobs_under(&question, t).unwrap())
                .collect();
            rdbcl_loss(&[(&advantages, &cur, &ref_lp)], &[beta]).unwrap().loss
        };

        let cur: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| params.logprobs_under(&question, t).unwrap())
            .collect();
        let batch = rdbcl_loss(&[(&advantages, &cur, &ref_lp)], &[beta]).unwrap();
        let mut grad = vec![0.0; params.n_params()];
        for (traj, w) in trajs.iter().zip(batch.groups[0].pg_weights.iter()) {
            params
                .backprop_weighted(&question, traj, w, &mut grad)
                .unwrap();
        }
        let numeric = finite_diff_grad(loss_of, &params.flatten(), FD_STEP).unwrap();
        assert!(grad_rel_err(&grad, &numeric) < 1e-4);
    }

    #[test]
    fn optimizer_zero_gradient_no_decay_is_identity() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, 100, 3);
        let mut theta = vec![1.0, -2.0, 0.5];
        st.apply(&mut theta, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(theta, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn optimizer_descends_quadratic() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            lr_max: 0.1,
            warmup_ratio: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, 50, 1);
        let mut theta = vec![1.0];
        let f = |t: &[f64]| 0.5 * t[0] * t[0];
        let before = f(&theta);
        let grad = vec![theta[0]];
        st.apply(&mut theta, &grad).unwrap();
        assert!(f(&theta) < before);
    }

    #[test]
    fn warmup_schedule_hand_value() {
        let cfg = OptimizerConfig {
            lr_max: 1.0,
            warmup_ratio: 0.01,
            ..Default::default()
        };
        let st = OptimizerState::new(cfg, 1000, 1);
        assert!((st.lr_at(5) - 0.5).abs() < 1e-12);
        assert!((st.lr_at(10) - 1.0).abs() < 1e-12);
        // cosine endpoint
        assert!(st.lr_at(1000) < 1e-12);
    }

    #[test]
    fn optimizer_rejects_nonfinite_gradient() {
        let mut st = OptimizerState::new(OptimizerConfig::default(), 10, 2);
        let mut theta = vec![1.0, 2.0];
        let before = theta.clone();
        assert!(st.apply(&mut theta, &[f64::NAN, 0.0]).is_err());
        assert_eq!(theta, before);
        assert_eq!(st.steps_taken(), 0);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(lc in -8.0f64..0.0, lr in -8.0f64..0.0) {
            let k = kl_per_token(lc, lr);
            prop_assert!(k >= 0.0);
            if (lc - lr).abs() > 1e-9 {
                prop_assert!(k > 0.0);
            }
        }

        #[test]
        fn advantages_are_centered(rewards in proptest::collection::vec(-2.0f64..2.0, 2..9)) {
            let a = group_advantages(&rewards, ADVANTAGE_STD_FLOOR).unwrap();
            let mean: f64 = a.iter().sum::<f64>() / a.len() as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }
}
