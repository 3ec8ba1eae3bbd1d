//! Per-sample reasoning-portability scoring: the previous policy's confidence
//! in its own trajectory on a new-task sample, thresholded into PRP/NRP and
//! mapped to a per-sample KL coefficient.

use crate::error::{CoreError, Result};
use crate::numerics::{log_sum_exp, Rng};
use crate::policy::{DecodeParams, PolicySnapshot, Trajectory};
use crate::tasks::{Sample, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// geometric-mean reference probability over the scored span
    Likelihood,
    /// TRUE-token probability after a probe token, renormalized over
    /// {TRUE, FALSE}; meaningful only with probe-supervised warm start
    BinaryToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSpan {
    Reasoning,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RpClass {
    Prp,
    Nrp,
}

impl RpClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            RpClass::Prp => "PRP",
            RpClass::Nrp => "NRP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub tau: f64,
    pub beta0: f64,
    pub clip_min: f64,
    pub probe_kind: ProbeKind,
    pub confidence_span: ConfidenceSpan,
    /// N: reference rollouts per sample
    pub n_ref_rollouts: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            tau: 0.7,
            beta0: 0.15,
            clip_min: 0.2,
            probe_kind: ProbeKind::Likelihood,
            confidence_span: ConfidenceSpan::Reasoning,
            n_ref_rollouts: 1,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(CoreError::Config("gate.tau must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.clip_min) {
            return Err(CoreError::Config("gate.clip_min must be in [0, 1]".into()));
        }
        if self.beta0 <= 0.0 {
            return Err(CoreError::Config("gate.beta0 must be > 0".into()));
        }
        if self.n_ref_rollouts == 0 {
            return Err(CoreError::Config("gate.n_ref_rollouts must be >= 1".into()));
        }
        Ok(())
    }
}

/// PRP iff C >= tau; the boundary is positive.
pub fn classify(confidence: f64, tau: f64) -> RpClass {
    if confidence >= tau {
        RpClass::Prp
    } else {
        RpClass::Nrp
    }
}

/// Dynamic per-sample KL coefficient:
/// max(clip_min, 1{C >= tau} + C * 1{C < tau}) * beta0.
pub fn beta_lrc(confidence: f64, cfg: &GateConfig) -> f64 {
    let factor = if confidence >= cfg.tau { 1.0 } else { confidence };
    cfg.clip_min.max(factor) * cfg.beta0
}

/// Geometric mean of probabilities given their logs.
pub fn likelihood_confidence(logprobs: &[f64]) -> f64 {
    if logprobs.is_empty() {
        return 0.0;
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    mean.exp()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpScore {
    pub sample_id: u64,
    pub task_id: usize,
    pub confidence: f64,
    pub class: RpClass,
    pub beta_lrc: f64,
    /// per-reference-trajectory scores before averaging
    pub per_trajectory: Vec<f64>,
    /// the scored span was missing or empty, so the full trajectory was used
    pub span_fallback: bool,
    /// oracle portability label carried over from the sample
    pub portable: bool,
}

fn span_logprobs(traj: &Trajectory, span: Option<(usize, usize)>) -> Option<&[f64]> {
    match span {
        Some((s, e)) if e > s => Some(&traj.logprobs[s..e]),
        _ => None,
    }
}

/// Likelihood score for one reference trajectory. Answer spans renormalize
/// over the answer-token class; reasoning spans use the full softmax, which
/// is exactly the generation probability the snapshot assigned to its own
/// tokens. Returns (score, used_fallback).
fn likelihood_score(
    snapshot: &PolicySnapshot,
    vocab: &Vocab,
    question: &[usize],
    traj: &Trajectory,
    span: ConfidenceSpan,
) -> Result<(f64, bool)> {
    match span {
        ConfidenceSpan::Reasoning => match span_logprobs(traj, traj.reasoning_span) {
            Some(lp) => Ok((likelihood_confidence(lp), false)),
            None => Ok((likelihood_confidence(&traj.logprobs), true)),
        },
        ConfidenceSpan::Answer => {
            let (s, e) = match traj.answer_span {
                Some((s, e)) if e > s => (s, e),
                _ => return Ok((likelihood_confidence(&traj.logprobs), true)),
            };
            let rows = snapshot.params().logprob_rows(question, &traj.tokens)?;
            let ans_lo = vocab.answer(0);
            let ans_hi = ans_lo + vocab.modulus as usize;
            let mut lps = Vec::with_capacity(e - s);
            for pos in s..e {
                let row = &rows[pos];
                let log_z = log_sum_exp(&row[ans_lo..ans_hi]);
                lps.push(row[traj.tokens[pos]] - log_z);
            }
            Ok((likelihood_confidence(&lps), false))
        }
    }
}

/// TRUE-token probability after (question, trajectory, PROBE), renormalized
/// over the {TRUE, FALSE} pair.
fn binary_token_score(
    snapshot: &PolicySnapshot,
    vocab: &Vocab,
    question: &[usize],
    traj: &Trajectory,
) -> Result<f64> {
    let mut ctx = question.to_vec();
    ctx.extend_from_slice(&traj.tokens);
    ctx.push(vocab.probe());
    let lp = snapshot.params().next_logprobs(&ctx)?;
    let lt = lp[vocab.true_token()];
    let lf = lp[vocab.false_token()];
    Ok(1.0 / (1.0 + (lf - lt).exp()))
}

/// Confidence of the snapshot in the given reference trajectories, averaged
/// over trajectories and clamped to [0, 1].
pub fn probe_confidence(
    snapshot: &PolicySnapshot,
    vocab: &Vocab,
    question: &[usize],
    ref_trajectories: &[Trajectory],
    kind: ProbeKind,
    span: ConfidenceSpan,
) -> Result<(f64, Vec<f64>, bool)> {
    if ref_trajectories.is_empty() {
        return Err(CoreError::InvalidArgument(
            "probe_confidence needs >= 1 reference trajectory".into(),
        ));
    }
    let mut per_traj = Vec::with_capacity(ref_trajectories.len());
    let mut fallback = false;
    for traj in ref_trajectories {
        let score = match kind {
            ProbeKind::Likelihood => {
                let (s, fb) = likelihood_score(snapshot, vocab, question, traj, span)?;
                fallback |= fb;
                s
            }
            ProbeKind::BinaryToken => binary_token_score(snapshot, vocab, question, traj)?,
        };
        per_traj.push(score);
    }
    let mean = per_traj.iter().sum::<f64>() / per_traj.len() as f64;
    Ok((mean.clamp(0.0, 1.0), per_traj, fallback))
}

/// Sample N reference trajectories from the snapshot and score one sample.
/// Called once per sample when its task begins; results are cached for the
/// whole task.
pub fn score_sample(
    snapshot: &PolicySnapshot,
    vocab: &Vocab,
    sample: &Sample,
    gate: &GateConfig,
    decode: &DecodeParams,
    rng: &mut Rng,
) -> Result<(RpScore, Vec<Trajectory>)> {
    gate.validate()?;
    let refs = snapshot.params().sample_trajectories(
        vocab,
        &sample.question,
        gate.n_ref_rollouts,
        decode,
        rng,
    )?;
    let (confidence, per_trajectory, span_fallback) = probe_confidence(
        snapshot,
        vocab,
        &sample.question,
        &refs,
        gate.probe_kind,
        gate.confidence_span,
    )?;
    let score = RpScore {
        sample_id: sample.sample_id,
        task_id: sample.task_id,
        confidence,
        class: classify(confidence, gate.tau),
        beta_lrc: beta_lrc(confidence, gate),
        per_trajectory,
        span_fallback,
        portable: sample.portable,
    };
    Ok((score, refs))
}
