//! Sequential-task driver: warm start, per-task training with the selected
//! method, per-task snapshots serving as the KL reference, and evaluation of
//! every checkpoint on every task.
//!
//! All randomness flows through purpose-labeled streams derived from the run
//! seed only, never from the method. Rollouts, portability probes, Fisher
//! estimation, distillation references and pass@k evaluation each own a
//! stream, so methods that skip one of these leave the others untouched and
//! method-equivalence reductions hold bit for bit.

use crate::config::{ExperimentConfig, MethodKind};
use crate::error::{CoreError, Result};
use crate::metrics::{
    compute_cl_metrics, dataset_pass_at_k, rank_auc, AccuracyMatrix, ClMetrics, PassKRecord,
    representation_drift,
};
use crate::numerics::Rng;
use crate::policy::{DecodeParams, PolicyDims, PolicyParams, PolicySnapshot, Trajectory};
use crate::portability::{score_sample, RpScore};
use crate::rlvr::{group_advantages, rdbcl_loss, OptimizerState, ADVANTAGE_STD_FLOOR};
use crate::tasks::{reasoning_correct, verify, Sample, Stream, TaskData, Token};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Run artifacts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    /// global optimizer step across the whole run
    pub step: usize,
    pub task: usize,
    pub mean_reward: f64,
    pub mean_abs_adv: f64,
    pub mean_kl: f64,
    pub mean_beta: f64,
    pub loss: f64,
}

/// One scored sample plus its interpreter-derived reasoning label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpRecord {
    pub score: RpScore,
    /// the first reference trajectory's reasoning executes to the ground truth
    pub reasoning_correct: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub matrix: AccuracyMatrix,
    pub cl: ClMetrics,
    pub train_log: Vec<TrainLogRow>,
    pub rp_records: Vec<RpRecord>,
    /// (k, dataset pass@k) on the first task's test set at the final checkpoint
    pub passk: Vec<(usize, f64)>,
    /// AUC of confidence as a predictor of the oracle portable flag (tasks >= 2)
    pub auc_portable: Option<f64>,
    /// mean hidden drift between consecutive checkpoints
    pub drift: Vec<f64>,
    pub warm_start: PolicyParams,
    pub checkpoints: Vec<PolicyParams>,
    /// optimizer steps actually taken per task (early stop shortens them)
    pub steps_per_task: Vec<usize>,
}

/// Divergence abort carrying everything logged up to the failure.
#[derive(Debug)]
pub struct RunAbort {
    pub error: CoreError,
    pub partial_log: Vec<TrainLogRow>,
}

// ---------------------------------------------------------------------------
// EWC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct EwcAnchor {
    fisher: Vec<f64>,
    theta_star: Vec<f64>,
}

/// Diagonal-Fisher anchors accumulated per completed task.
#[derive(Debug, Clone, Default)]
pub struct EwcState {
    anchors: Vec<EwcAnchor>,
}

impl EwcState {
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// (lambda/2) * sum_k F_k (theta_k - theta*_k)^2 over stored anchors.
    pub fn penalty(&self, theta: &[f64], lambda: f64) -> Result<f64> {
        let mut total = 0.0;
        for a in &self.anchors {
            if a.fisher.len() != theta.len() {
                return Err(CoreError::DimMismatch {
                    context: "ewc_penalty".into(),
                    expected: a.fisher.len(),
                    got: theta.len(),
                });
            }
            for k in 0..theta.len() {
                let d = theta[k] - a.theta_star[k];
                total += a.fisher[k] * d * d;
            }
        }
        Ok(0.5 * lambda * total)
    }

    /// Accumulate lambda * F (theta - theta*) into the gradient.
    pub fn add_gradient(&self, theta: &[f64], lambda: f64, grad: &mut [f64]) -> Result<()> {
        for a in &self.anchors {
            if a.fisher.len() != grad.len() {
                return Err(CoreError::DimMismatch {
                    context: "ewc gradient".into(),
                    expected: a.fisher.len(),
                    got: grad.len(),
                });
            }
            for k in 0..grad.len() {
                grad[k] += lambda * a.fisher[k] * (theta[k] - a.theta_star[k]);
            }
        }
        Ok(())
    }

    /// Empirical diagonal Fisher from squared log-likelihood gradients of the
    /// policy's own sampled trajectories on the just-finished task.
    pub fn estimate_and_store(
        &mut self,
        params: &PolicyParams,
        task: &TaskData,
        vocab: &crate::tasks::Vocab,
        n_samples: usize,
        decode: &DecodeParams,
        rng: &mut Rng,
    ) -> Result<()> {
        let n = params.n_params();
        let mut fisher = vec![0.0; n];
        let mut per_traj = vec![0.0; n];
        for _ in 0..n_samples {
            let sample = &task.train[rng.below(task.train.len())];
            let traj = params.sample_trajectory(vocab, &sample.question, decode, rng)?;
            per_traj.iter_mut().for_each(|g| *g = 0.0);
            let weights = vec![1.0; traj.tokens.len()];
            params.backprop_weighted(&sample.question, &traj.tokens, &weights, &mut per_traj)?;
            for k in 0..n {
                fisher[k] += per_traj[k] * per_traj[k];
            }
        }
        let inv = 1.0 / n_samples as f64;
        fisher.iter_mut().for_each(|f| *f *= inv);
        self.anchors.push(EwcAnchor {
            fisher,
            theta_star: params.flatten(),
        });
        Ok(())
    }
}

/// Standalone anchor builder used by tests with hand-set Fisher values.
impl EwcState {
    pub fn with_anchor(fisher: Vec<f64>, theta_star: Vec<f64>) -> Self {
        EwcState {
            anchors: vec![EwcAnchor { fisher, theta_star }],
        }
    }
}

// ---------------------------------------------------------------------------
// LwF
// ---------------------------------------------------------------------------

/// Reference trajectories (sampled from the snapshot at task start) together
/// with the snapshot's full log-distribution at every teacher-forced
/// position.
pub struct LwfRefs {
    items: Vec<(Vec<Token>, Vec<Token>, Vec<Vec<f64>>)>, // question, tokens, ref rows
    n_positions: usize,
}

impl LwfRefs {
    pub fn sample(
        snapshot: &PolicySnapshot,
        task: &TaskData,
        vocab: &crate::tasks::Vocab,
        count: usize,
        decode: &DecodeParams,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut items = Vec::with_capacity(count);
        let mut n_positions = 0;
        for _ in 0..count {
            let sample = &task.train[rng.below(task.train.len())];
            let traj = snapshot
                .params()
                .sample_trajectory(vocab, &sample.question, decode, rng)?;
            let rows = snapshot.params().logprob_rows(&sample.question, &traj.tokens)?;
            n_positions += traj.tokens.len();
            items.push((sample.question.clone(), traj.tokens, rows));
        }
        Ok(LwfRefs { items, n_positions })
    }

    /// lambda * mean over positions of KL(pi_snapshot || pi_theta), plus its
    /// gradient accumulated into `grad`. The distillation direction matches
    /// the old teacher.
    pub fn penalty_and_grad(
        &self,
        params: &PolicyParams,
        lambda: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        if self.n_positions == 0 {
            return Ok(0.0);
        }
        let scale = lambda / self.n_positions as f64;
        let mut total = 0.0;
        for (question, tokens, ref_rows) in &self.items {
            let cur_rows = params.logprob_rows(question, tokens)?;
            let mut dlogits = Vec::with_capacity(tokens.len());
            for (cur, refr) in cur_rows.iter().zip(ref_rows.iter()) {
                let mut dl = vec![0.0; cur.len()];
                for v in 0..cur.len() {
                    let p_ref = refr[v].exp();
                    total += p_ref * (refr[v] - cur[v]);
                    dl[v] = scale * (cur[v].exp() - p_ref);
                }
                dlogits.push(dl);
            }
            params.backprop_with_dlogits(question, tokens, &dlogits, grad)?;
        }
        Ok(scale * total)
    }
}

/// Closed-form distillation penalty for a single teacher-forced position,
/// exposed for unit tests.
pub fn kl_full_distribution(ref_logprobs: &[f64], cur_logprobs: &[f64]) -> f64 {
    ref_logprobs
        .iter()
        .zip(cur_logprobs.iter())
        .map(|(r, c)| r.exp() * (r - c))
        .sum()
}

// ---------------------------------------------------------------------------
// Teacher-forced MLE (warm start and the SFT baseline)
// ---------------------------------------------------------------------------

/// One MLE step on (question, target) pairs: minimizes the mean per-token
/// negative log-likelihood. Returns the loss.
fn mle_step(
    params: &mut PolicyParams,
    opt: &mut OptimizerState,
    batch: &[(Vec<Token>, Vec<Token>)],
) -> Result<f64> {
    let total_tokens: usize = batch.iter().map(|(_, t)| t.len()).sum();
    if total_tokens == 0 {
        return Ok(0.0);
    }
    let inv = 1.0 / total_tokens as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.n_params()];
    for (question, target) in batch {
        let lp = params.logprobs_under(question, target)?;
        loss -= inv * lp.iter().sum::<f64>();
        let weights = vec![-inv; target.len()];
        params.backprop_weighted(question, target, &weights, &mut grad)?;
    }
    let mut flat = params.flatten();
    opt.apply(&mut flat, &grad)?;
    *params = PolicyParams::unflatten(params.dims, &flat)?;
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Greedy single-rollout accuracy (percent) on a task's test split.
pub fn evaluate_accuracy(
    params: &PolicyParams,
    data: &TaskData,
    vocab: &crate::tasks::Vocab,
    greedy: &DecodeParams,
) -> Result<f64> {
    let mut rng = Rng::new(0); // greedy decoding draws nothing
    let mut correct = 0usize;
    for s in &data.test {
        let t = params.sample_trajectory(vocab, &s.question, greedy, &mut rng)?;
        if verify(&t.tokens, s.ground_truth, vocab).accuracy == 1.0 {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / data.test.len() as f64)
}

fn evaluate_row(
    params: &PolicyParams,
    stream: &Stream,
    greedy: &DecodeParams,
) -> Result<Vec<f64>> {
    stream
        .tasks
        .iter()
        .map(|t| evaluate_accuracy(params, t, &stream.vocab, greedy))
        .collect()
}

// ---------------------------------------------------------------------------
// Portability scoring over a task
// ---------------------------------------------------------------------------

/// Score every train sample of a task against a snapshot; the per-sample
/// betas feed the training loop, the records feed the RP dump.
pub fn probe_task(
    snapshot: &PolicySnapshot,
    task: &TaskData,
    stream: &Stream,
    gate: &crate::portability::GateConfig,
    decode: &DecodeParams,
    rng: &mut Rng,
) -> Result<Vec<(RpRecord, Vec<Trajectory>)>> {
    let mut out = Vec::with_capacity(task.train.len());
    for sample in &task.train {
        let (score, refs) = score_sample(snapshot, &stream.vocab, sample, gate, decode, rng)?;
        let correct = reasoning_correct(
            &refs[0].tokens,
            &task.spec,
            sample,
            &stream.op_pool,
            &stream.vocab,
        );
        out.push((
            RpRecord {
                score,
                reasoning_correct: correct,
            },
            refs,
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Warm start
// ---------------------------------------------------------------------------

/// Policy dimensions implied by a config and stream: room for the question,
/// the longest emission, and the probe suffix.
pub fn policy_dims(cfg: &ExperimentConfig, stream: &Stream) -> PolicyDims {
    PolicyDims {
        vocab: stream.vocab.size(),
        embed: cfg.policy.embed_dim,
        hidden: cfg.policy.hidden_dim,
        max_context: stream.question_len + cfg.decode.max_len + 2,
    }
}

/// Supervised warm start on the held-out pretraining task. Depends only on
/// the run seed (never the method), so every method starts from the same
/// policy under a given seed.
///
/// Targets use a fresh random rule per example (executed on the sample's
/// state) rather than the task's fixed rule: the format becomes
/// deterministic while ops and answers stay high-entropy, which keeps
/// group-relative exploration alive on later tasks.
pub fn warm_start_policy(cfg: &ExperimentConfig, stream: &Stream, seed: u64) -> Result<PolicyParams> {
    let dims = policy_dims(cfg, stream);
    let base = Rng::new(seed).derive_named("warmstart");
    let mut params = PolicyParams::init(dims, &mut base.derive_named("init"));
    let mut data_rng = base.derive_named("data");
    let mut probe_rng = base.derive_named("probe");
    let mut opt = OptimizerState::new(cfg.optim, cfg.train.pretrain_steps.max(1), dims.n_params());
    let task = &stream.pretrain;
    let vocab = &stream.vocab;
    for _ in 0..cfg.train.pretrain_steps {
        let mut batch: Vec<(Vec<Token>, Vec<Token>)> = Vec::new();
        for _ in 0..cfg.train.samples_per_step {
            let sample = &task.train[data_rng.below(task.train.len())];
            let rule: Vec<usize> = (0..task.spec.rule.len())
                .map(|_| data_rng.below(vocab.n_ops))
                .collect();
            let state = task.spec.decode_state(&sample.question, vocab)?;
            let answer = crate::tasks::run_rule(&rule, &stream.op_pool, state, task.spec.modulus);
            let mut target = Vec::with_capacity(rule.len() + 5);
            target.push(vocab.reason_open());
            target.extend(rule.iter().map(|&op| vocab.op(op)));
            target.push(vocab.reason_close());
            target.push(vocab.answer_open());
            target.push(vocab.answer(answer));
            target.push(vocab.answer_close());
            batch.push((sample.question.clone(), target));
            if cfg.train.probe_supervision {
                batch.push(probe_example(stream, task, sample, &mut probe_rng));
            }
        }
        mle_step(&mut params, &mut opt, &batch)?;
    }
    params.check_finite()?;
    Ok(params)
}

/// A probe-head training pair: judge whether a (possibly corrupted)
/// trajectory's reasoning is correct for the question.
fn probe_example(
    stream: &Stream,
    task: &TaskData,
    sample: &Sample,
    rng: &mut Rng,
) -> (Vec<Token>, Vec<Token>) {
    let vocab = &stream.vocab;
    let corrupt = rng.next_f64() < 0.5;
    let rule: Vec<usize> = if corrupt {
        (0..task.spec.rule.len()).map(|_| rng.below(vocab.n_ops)).collect()
    } else {
        task.spec.rule.clone()
    };
    let state = task.spec.decode_state(&sample.question, vocab).unwrap_or(0);
    let executed = crate::tasks::run_rule(&rule, &stream.op_pool, state, task.spec.modulus);
    let mut traj = Vec::with_capacity(rule.len() + 5);
    traj.push(vocab.reason_open());
    traj.extend(rule.iter().map(|&op| vocab.op(op)));
    traj.push(vocab.reason_close());
    traj.push(vocab.answer_open());
    traj.push(vocab.answer(executed));
    traj.push(vocab.answer_close());
    let label = if vocab.answer(executed) == sample.ground_truth {
        vocab.true_token()
    } else {
        vocab.false_token()
    };
    let mut context = sample.question.clone();
    context.extend_from_slice(&traj);
    context.push(vocab.probe());
    (context, vec![label])
}

// ---------------------------------------------------------------------------
// The task-sequence runner
// ---------------------------------------------------------------------------

struct StepStats {
    mean_reward: f64,
    mean_abs_adv: f64,
    mean_kl: f64,
    mean_beta: f64,
    loss: f64,
}

pub fn run_task_sequence(
    cfg: &ExperimentConfig,
    stream: &Stream,
    seed: u64,
) -> std::result::Result<RunOutput, RunAbort> {
    let mut log: Vec<TrainLogRow> = Vec::new();
    match run_inner(cfg, stream, seed, &mut log) {
        Ok(mut out) => {
            out.train_log = std::mem::take(&mut log);
            Ok(out)
        }
        Err(error) => Err(RunAbort {
            error,
            partial_log: log,
        }),
    }
}

fn run_inner(
    cfg: &ExperimentConfig,
    stream: &Stream,
    seed: u64,
    log: &mut Vec<TrainLogRow>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let vocab = &stream.vocab;
    let sampling = cfg.decode.sampling_params();
    let greedy = cfg.decode.greedy_params();
    let group_size = cfg.decode.group_size;
    let method = &cfg.method;
    let beta0 = method.gate.beta0;

    let warm = warm_start_policy(cfg, stream, seed)?;
    let mut params = warm.clone();
    let zero_shot = evaluate_row(&warm, stream, &greedy)?;

    let t_total = stream.tasks.len();
    let mut matrix_rows: Vec<Vec<f64>> = Vec::with_capacity(t_total);
    let mut checkpoints: Vec<PolicyParams> = Vec::with_capacity(t_total);
    let mut rp_records: Vec<RpRecord> = Vec::new();
    let mut steps_per_task: Vec<usize> = Vec::with_capacity(t_total);
    let mut ewc = EwcState::default();
    let mut global_step = 0usize;

    for (t_idx, task) in stream.tasks.iter().enumerate() {
        let task_id = task.spec.task_id;
        let snapshot = params.snapshot(task_id - 1);
        let run_rng = Rng::new(seed);
        let mut rollout_rng = run_rng.derive_named(&format!("task{task_id}/rollouts"));
        let mut data_rng = run_rng.derive_named(&format!("task{task_id}/data"));

        // per-sample KL coefficients for this task
        let betas_by_sample: Vec<f64> = match method.kind {
            MethodKind::Rdbcl => {
                let mut probe_rng = run_rng.derive_named(&format!("task{task_id}/probe"));
                let scored = probe_task(&snapshot, task, stream, &method.gate, &sampling, &mut probe_rng)?;
                let betas = scored.iter().map(|(r, _)| r.score.beta_lrc).collect();
                rp_records.extend(scored.into_iter().map(|(r, _)| r));
                betas
            }
            MethodKind::GrpoStatic => vec![method.static_k * beta0; task.train.len()],
            MethodKind::Ewc | MethodKind::Lwf => vec![beta0; task.train.len()],
            MethodKind::Sft => Vec::new(),
        };

        let lwf_refs = if method.kind == MethodKind::Lwf && method.lambda_lwf > 0.0 {
            let mut lwf_rng = run_rng.derive_named(&format!("task{task_id}/lwf"));
            Some(LwfRefs::sample(
                &snapshot,
                task,
                vocab,
                cfg.train.lwf_trajectories,
                &sampling,
                &mut lwf_rng,
            )?)
        } else {
            None
        };

        let mut opt = OptimizerState::new(cfg.optim, cfg.train.max_steps.max(1), params.n_params());
        let mut above_streak = 0usize;
        let mut steps_taken = 0usize;

        for _step in 0..cfg.train.max_steps {
            let stats = if method.kind == MethodKind::Sft {
                sft_step(cfg, stream, task, &mut params, &mut opt, &mut data_rng, &greedy)?
            } else {
                grpo_step(
                    cfg,
                    stream,
                    task,
                    &mut params,
                    &snapshot,
                    &betas_by_sample,
                    &ewc,
                    lwf_refs.as_ref(),
                    &mut opt,
                    &mut data_rng,
                    &mut rollout_rng,
                    &sampling,
                    group_size,
                )?
            };
            global_step += 1;
            steps_taken += 1;
            if !stats.loss.is_finite() {
                return Err(CoreError::Diverged {
                    task: task_id,
                    step: steps_taken,
                    what: format!("loss = {}", stats.loss),
                });
            }
            log.push(TrainLogRow {
                step: global_step,
                task: task_id,
                mean_reward: stats.mean_reward,
                mean_abs_adv: stats.mean_abs_adv,
                mean_kl: stats.mean_kl,
                mean_beta: stats.mean_beta,
                loss: stats.loss,
            });
            if stats.mean_reward > cfg.train.early_stop_reward {
                above_streak += 1;
                if above_streak >= cfg.train.early_stop_patience {
                    break;
                }
            } else {
                above_streak = 0;
            }
        }
        params.check_finite().map_err(|e| CoreError::Diverged {
            task: task_id,
            step: steps_taken,
            what: e.to_string(),
        })?;
        steps_per_task.push(steps_taken);

        if method.kind == MethodKind::Ewc && method.lambda_ewc > 0.0 {
            let mut fisher_rng = run_rng.derive_named(&format!("task{task_id}/fisher"));
            ewc.estimate_and_store(
                &params,
                task,
                vocab,
                cfg.train.fisher_samples,
                &sampling,
                &mut fisher_rng,
            )?;
        }

        checkpoints.push(params.clone());
        matrix_rows.push(evaluate_row(&params, stream, &greedy)?);
        let _ = t_idx;
    }

    let mut matrix = AccuracyMatrix::new(matrix_rows)?;
    matrix.zero_shot = Some(zero_shot);
    let cl = compute_cl_metrics(&matrix)?;

    // pass@k on the first task at the final checkpoint
    let final_params = checkpoints.last().unwrap_or(&warm);
    let mut passk_rng = Rng::new(seed).derive_named("passk");
    let passk = passk_eval(cfg, stream, final_params, &sampling, &mut passk_rng)?;

    // consecutive-checkpoint hidden drift over first-task probe questions
    let probes: Vec<Vec<Token>> = stream.tasks[0]
        .test
        .iter()
        .take(cfg.eval.drift_probes)
        .map(|s| s.question.clone())
        .collect();
    let mut drift = Vec::new();
    for pair in checkpoints.windows(2) {
        drift.push(representation_drift(&pair[0], &pair[1], &probes)?.mean);
    }

    let auc_portable = {
        let pos: Vec<f64> = rp_records
            .iter()
            .filter(|r| r.score.task_id >= 2 && r.score.portable)
            .map(|r| r.score.confidence)
            .collect();
        let neg: Vec<f64> = rp_records
            .iter()
            .filter(|r| r.score.task_id >= 2 && !r.score.portable)
            .map(|r| r.score.confidence)
            .collect();
        rank_auc(&pos, &neg)
    };

    Ok(RunOutput {
        matrix,
        cl,
        train_log: Vec::new(), // filled by the caller
        rp_records,
        passk,
        auc_portable,
        drift,
        warm_start: warm,
        checkpoints,
        steps_per_task,
    })
}

#[allow(clippy::too_many_arguments)]
fn grpo_step(
    cfg: &ExperimentConfig,
    stream: &Stream,
    task: &TaskData,
    params: &mut PolicyParams,
    snapshot: &PolicySnapshot,
    betas_by_sample: &[f64],
    ewc: &EwcState,
    lwf_refs: Option<&LwfRefs>,
    opt: &mut OptimizerState,
    data_rng: &mut Rng,
    rollout_rng: &mut Rng,
    sampling: &DecodeParams,
    group_size: usize,
) -> Result<StepStats> {
    let vocab = &stream.vocab;
    let method = &cfg.method;

    struct GroupBuf {
        question: Vec<Token>,
        trajs: Vec<Trajectory>,
        advantages: Vec<f64>,
        cur_lp: Vec<Vec<f64>>,
        ref_lp: Vec<Vec<f64>>,
        beta: f64,
    }

    let mut groups: Vec<GroupBuf> = Vec::with_capacity(cfg.train.samples_per_step);
    let mut reward_sum = 0.0;
    let mut reward_count = 0usize;
    for _ in 0..cfg.train.samples_per_step {
        let idx = data_rng.below(task.train.len());
        let sample = &task.train[idx];
        let trajs = params.sample_trajectories(vocab, &sample.question, group_size, sampling, rollout_rng)?;
        let rewards: Vec<f64> = trajs
            .iter()
            .map(|t| verify(&t.tokens, sample.ground_truth, vocab).total)
            .collect();
        reward_sum += rewards.iter().sum::<f64>();
        reward_count += rewards.len();
        let advantages = group_advantages(&rewards, ADVANTAGE_STD_FLOOR)?;
        let cur_lp: Vec<Vec<f64>> = trajs.iter().map(|t| t.logprobs.clone()).collect();
        let ref_lp: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| snapshot.params().logprobs_under(&sample.question, &t.tokens))
            .collect::<Result<_>>()?;
        groups.push(GroupBuf {
            question: sample.question.clone(),
            trajs,
            advantages,
            cur_lp,
            ref_lp,
            beta: betas_by_sample[idx],
        });
    }

    let inputs: Vec<(&[f64], &[Vec<f64>], &[Vec<f64>])> = groups
        .iter()
        .map(|g| (g.advantages.as_slice(), g.cur_lp.as_slice(), g.ref_lp.as_slice()))
        .collect();
    let betas: Vec<f64> = groups.iter().map(|g| g.beta).collect();
    let batch = rdbcl_loss(&inputs, &betas)?;

    let mut grad = vec![0.0; params.n_params()];
    for (g, eval) in groups.iter().zip(batch.groups.iter()) {
        for (traj, w) in g.trajs.iter().zip(eval.pg_weights.iter()) {
            if !traj.tokens.is_empty() {
                params.backprop_weighted(&g.question, &traj.tokens, w, &mut grad)?;
            }
        }
    }

    let mut loss = batch.loss;
    let theta = params.flatten();
    if method.kind == MethodKind::Ewc && method.lambda_ewc > 0.0 && !ewc.is_empty() {
        loss += ewc.penalty(&theta, method.lambda_ewc)?;
        ewc.add_gradient(&theta, method.lambda_ewc, &mut grad)?;
    }
    if let Some(refs) = lwf_refs {
        loss += refs.penalty_and_grad(params, method.lambda_lwf, &mut grad)?;
    }

    let mut flat = theta;
    opt.apply(&mut flat, &grad)?;
    *params = PolicyParams::unflatten(params.dims, &flat)?;

    let mean_abs_adv = {
        let total: f64 = groups
            .iter()
            .flat_map(|g| g.advantages.iter())
            .map(|a| a.abs())
            .sum();
        total / reward_count as f64
    };
    Ok(StepStats {
        mean_reward: reward_sum / reward_count as f64,
        mean_abs_adv,
        mean_kl: batch.mean_kl,
        mean_beta: betas.iter().sum::<f64>() / betas.len() as f64,
        loss,
    })
}

/// Teacher-forced MLE on oracle trajectories; the logged reward comes from a
/// greedy rollout per batch sample so the early-stop rule matches the RL
/// methods.
fn sft_step(
    cfg: &ExperimentConfig,
    stream: &Stream,
    task: &TaskData,
    params: &mut PolicyParams,
    opt: &mut OptimizerState,
    data_rng: &mut Rng,
    greedy: &DecodeParams,
) -> Result<StepStats> {
    let vocab = &stream.vocab;
    let mut batch: Vec<(Vec<Token>, Vec<Token>)> = Vec::new();
    let mut picked: Vec<usize> = Vec::new();
    for _ in 0..cfg.train.samples_per_step {
        let idx = data_rng.below(task.train.len());
        picked.push(idx);
        let sample = &task.train[idx];
        batch.push((
            sample.question.clone(),
            stream.oracle_trajectory(&task.spec, sample),
        ));
    }
    let loss = mle_step(params, opt, &batch)?;
    let mut rng = Rng::new(0);
    let mut reward_sum = 0.0;
    for &idx in &picked {
        let sample = &task.train[idx];
        let t = params.sample_trajectory(vocab, &sample.question, greedy, &mut rng)?;
        reward_sum += verify(&t.tokens, sample.ground_truth, vocab).total;
    }
    Ok(StepStats {
        mean_reward: reward_sum / picked.len() as f64,
        mean_abs_adv: 0.0,
        mean_kl: 0.0,
        mean_beta: 0.0,
        loss,
    })
}

fn passk_eval(
    cfg: &ExperimentConfig,
    stream: &Stream,
    params: &PolicyParams,
    sampling: &DecodeParams,
    rng: &mut Rng,
) -> Result<Vec<(usize, f64)>> {
    let vocab = &stream.vocab;
    let task = &stream.tasks[0];
    let n = cfg.eval.passk_n;
    let mut records = Vec::with_capacity(task.test.len());
    for s in &task.test {
        let trajs = params.sample_trajectories(vocab, &s.question, n, sampling, rng)?;
        let c = trajs
            .iter()
            .filter(|t| verify(&t.tokens, s.ground_truth, vocab).accuracy == 1.0)
            .count();
        records.push(PassKRecord { n, c });
    }
    let mut out = Vec::new();
    for &k in &cfg.eval.passk_ks {
        if k <= n {
            out.push((k, dataset_pass_at_k(&records, k)?));
        }
    }
    Ok(out)
}
