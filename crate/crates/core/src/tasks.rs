//! Synthetic verifiable-reasoning tasks: a modular-arithmetic rule is applied
//! to a state encoded in the question, the policy must emit the reasoning ops
//! and the final answer, and a programmatic verifier scores the output.
//!
//! A question is one state digit plus context filler symbols; digits and
//! fillers live in disjoint token ranges so the state stays recoverable from
//! an order-blind (pooled) view of the question. Portability across
//! consecutive tasks is controlled at generation time: portable samples are
//! the ones on which the previous task's rule still produces the correct
//! answer and whose filler symbols match the previous task's question
//! distribution; non-portable samples carry a changed rule tail and a shifted
//! filler distribution.

use crate::error::{CoreError, Result};
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub type Token = usize;

pub const N_DIGITS: usize = 10;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Disjoint token ranges: state digits, question fillers, reasoning ops,
/// answers, the four format delimiters, a probe token and the two probe
/// answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub modulus: u32,
    pub n_ops: usize,
    pub n_fillers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Digit(u8),
    Filler(usize),
    Op(usize),
    Answer(u32),
    ReasonOpen,
    ReasonClose,
    AnswerOpen,
    AnswerClose,
    Probe,
    True,
    False,
}

impl Vocab {
    pub fn new(modulus: u32, n_ops: usize, n_fillers: usize) -> Self {
        Vocab {
            modulus,
            n_ops,
            n_fillers,
        }
    }

    pub fn size(&self) -> usize {
        N_DIGITS + self.n_fillers + self.n_ops + self.modulus as usize + 4 + 1 + 2
    }

    pub fn digit(&self, d: u8) -> Token {
        debug_assert!((d as usize) < N_DIGITS);
        d as Token
    }

    pub fn filler(&self, f: usize) -> Token {
        debug_assert!(f < self.n_fillers);
        N_DIGITS + f
    }

    pub fn op(&self, id: usize) -> Token {
        debug_assert!(id < self.n_ops);
        N_DIGITS + self.n_fillers + id
    }

    pub fn answer(&self, v: u32) -> Token {
        debug_assert!(v < self.modulus);
        N_DIGITS + self.n_fillers + self.n_ops + v as usize
    }

    pub fn reason_open(&self) -> Token {
        N_DIGITS + self.n_fillers + self.n_ops + self.modulus as usize
    }
    pub fn reason_close(&self) -> Token {
        self.reason_open() + 1
    }
    pub fn answer_open(&self) -> Token {
        self.reason_open() + 2
    }
    pub fn answer_close(&self) -> Token {
        self.reason_open() + 3
    }
    pub fn probe(&self) -> Token {
        self.reason_open() + 4
    }
    pub fn true_token(&self) -> Token {
        self.reason_open() + 5
    }
    pub fn false_token(&self) -> Token {
        self.reason_open() + 6
    }

    pub fn kind(&self, t: Token) -> Option<TokenKind> {
        if t < N_DIGITS {
            return Some(TokenKind::Digit(t as u8));
        }
        let t1 = t - N_DIGITS;
        if t1 < self.n_fillers {
            return Some(TokenKind::Filler(t1));
        }
        let t2 = t1 - self.n_fillers;
        if t2 < self.n_ops {
            return Some(TokenKind::Op(t2));
        }
        let t3 = t2 - self.n_ops;
        if t3 < self.modulus as usize {
            return Some(TokenKind::Answer(t3 as u32));
        }
        match t3 - self.modulus as usize {
            0 => Some(TokenKind::ReasonOpen),
            1 => Some(TokenKind::ReasonClose),
            2 => Some(TokenKind::AnswerOpen),
            3 => Some(TokenKind::AnswerClose),
            4 => Some(TokenKind::Probe),
            5 => Some(TokenKind::True),
            6 => Some(TokenKind::False),
            _ => None,
        }
    }

    pub fn is_digit(&self, t: Token) -> bool {
        t < N_DIGITS
    }

    pub fn is_filler(&self, t: Token) -> bool {
        (N_DIGITS..N_DIGITS + self.n_fillers).contains(&t)
    }

    pub fn is_op(&self, t: Token) -> bool {
        let lo = N_DIGITS + self.n_fillers;
        (lo..lo + self.n_ops).contains(&t)
    }

    pub fn is_answer(&self, t: Token) -> bool {
        let lo = N_DIGITS + self.n_fillers + self.n_ops;
        (lo..lo + self.modulus as usize).contains(&t)
    }

    pub fn is_delimiter(&self, t: Token) -> bool {
        t == self.reason_open()
            || t == self.reason_close()
            || t == self.answer_open()
            || t == self.answer_close()
    }

    pub fn op_id(&self, t: Token) -> Option<usize> {
        self.is_op(t).then(|| t - N_DIGITS - self.n_fillers)
    }

    pub fn answer_value(&self, t: Token) -> Option<u32> {
        self.is_answer(t)
            .then(|| (t - N_DIGITS - self.n_fillers - self.n_ops) as u32)
    }
}

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

/// One reasoning step: a bijective map on Z_M. Bijectivity keeps the
/// agree/disagree state analysis between consecutive rules clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    Add(u32),
    Mul(u32),
    Negate,
}

impl OpKind {
    pub fn apply(&self, state: u32, modulus: u32) -> u32 {
        match self {
            OpKind::Add(k) => (state + k) % modulus,
            OpKind::Mul(k) => (state * k) % modulus,
            OpKind::Negate => (modulus - state % modulus) % modulus,
        }
    }

    pub fn name(&self) -> String {
        match self {
            OpKind::Add(k) => format!("add{k}"),
            OpKind::Mul(k) => format!("mul{k}"),
            OpKind::Negate => "neg".to_string(),
        }
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Deterministic op pool for a modulus: adds interleaved with unit
/// multipliers, plus negation. Op id i in a rule refers to `pool[i]`.
pub fn build_op_pool(modulus: u32, n_ops: usize) -> Result<Vec<OpKind>> {
    let mut candidates = Vec::new();
    let mut adds: Vec<OpKind> = (1..modulus).map(OpKind::Add).collect();
    let mut muls: Vec<OpKind> = (2..modulus)
        .filter(|k| gcd(*k, modulus) == 1)
        .map(OpKind::Mul)
        .collect();
    candidates.push(OpKind::Negate);
    // interleave for variety in small pools
    while !adds.is_empty() || !muls.is_empty() {
        if !adds.is_empty() {
            candidates.push(adds.remove(0));
        }
        if !muls.is_empty() {
            candidates.push(muls.remove(0));
        }
    }
    if n_ops > candidates.len() {
        return Err(CoreError::InvalidArgument(format!(
            "op pool for modulus {modulus} has only {} distinct ops, {n_ops} requested",
            candidates.len()
        )));
    }
    Ok(candidates.into_iter().take(n_ops).collect())
}

/// Execute a rule (list of op-pool indices) on a state.
pub fn run_rule(rule: &[usize], pool: &[OpKind], state: u32, modulus: u32) -> u32 {
    rule.iter().fold(state, |s, &i| pool[i].apply(s, modulus))
}

// ---------------------------------------------------------------------------
// Encodings (the domain-shift knob)
// ---------------------------------------------------------------------------

/// Surface form of a question: a position permutation plus value relabelings
/// of the digit and filler alphabets, applied to the canonical sequence
/// `[state_digit, filler_1, ..., filler_{Q-1}]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoding {
    /// rendered position i holds canonical position `position_perm[i]`
    pub position_perm: Vec<usize>,
    /// canonical digit d renders as digit `digit_relabel[d]`
    pub digit_relabel: Vec<u8>,
    /// canonical filler f renders as filler `filler_relabel[f]`
    pub filler_relabel: Vec<usize>,
}

impl Encoding {
    pub fn identity(question_len: usize, n_fillers: usize) -> Self {
        Encoding {
            position_perm: (0..question_len).collect(),
            digit_relabel: (0..N_DIGITS as u8).collect(),
            filler_relabel: (0..n_fillers).collect(),
        }
    }

    pub fn random(
        question_len: usize,
        n_fillers: usize,
        permute: bool,
        relabel: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut enc = Encoding::identity(question_len, n_fillers);
        if permute {
            rng.shuffle(&mut enc.position_perm);
        }
        if relabel {
            rng.shuffle(&mut enc.digit_relabel);
            rng.shuffle(&mut enc.filler_relabel);
        }
        enc
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen_p = vec![false; self.position_perm.len()];
        for &p in &self.position_perm {
            if p >= seen_p.len() || seen_p[p] {
                return false;
            }
            seen_p[p] = true;
        }
        let mut seen_d = [false; N_DIGITS];
        for &d in &self.digit_relabel {
            if d as usize >= N_DIGITS || seen_d[d as usize] {
                return false;
            }
            seen_d[d as usize] = true;
        }
        let mut seen_f = vec![false; self.filler_relabel.len()];
        for &f in &self.filler_relabel {
            if f >= seen_f.len() || seen_f[f] {
                return false;
            }
            seen_f[f] = true;
        }
        self.digit_relabel.len() == N_DIGITS && seen_d.iter().all(|x| *x) && seen_f.iter().all(|x| *x)
    }

    /// (state, canonical fillers) -> rendered question tokens
    pub fn render(&self, state: u32, fillers: &[usize], vocab: &Vocab) -> Vec<Token> {
        let q = self.position_perm.len();
        debug_assert_eq!(fillers.len() + 1, q);
        (0..q)
            .map(|i| match self.position_perm[i] {
                0 => vocab.digit(self.digit_relabel[state as usize]),
                c => vocab.filler(self.filler_relabel[fillers[c - 1]]),
            })
            .collect()
    }

    /// rendered question tokens -> (state, canonical fillers)
    pub fn decode(&self, question: &[Token], vocab: &Vocab) -> Result<(u32, Vec<usize>)> {
        if question.len() != self.position_perm.len() {
            return Err(CoreError::DimMismatch {
                context: "encoding decode".into(),
                expected: self.position_perm.len(),
                got: question.len(),
            });
        }
        let mut inv_digit = [0u8; N_DIGITS];
        for (d, &r) in self.digit_relabel.iter().enumerate() {
            inv_digit[r as usize] = d as u8;
        }
        let mut inv_filler = vec![0usize; self.filler_relabel.len()];
        for (f, &r) in self.filler_relabel.iter().enumerate() {
            inv_filler[r] = f;
        }
        let mut state: Option<u32> = None;
        let mut fillers = vec![0usize; question.len() - 1];
        for (i, &tok) in question.iter().enumerate() {
            let canonical_pos = self.position_perm[i];
            if canonical_pos == 0 {
                if !vocab.is_digit(tok) {
                    return Err(CoreError::InvalidArgument(
                        "state position does not hold a digit token".into(),
                    ));
                }
                state = Some(inv_digit[tok] as u32);
            } else {
                if !vocab.is_filler(tok) {
                    return Err(CoreError::InvalidArgument(
                        "filler position does not hold a filler token".into(),
                    ));
                }
                fillers[canonical_pos - 1] = inv_filler[tok - N_DIGITS];
            }
        }
        Ok((
            state.ok_or_else(|| CoreError::InvalidArgument("question has no state digit".into()))?,
            fillers,
        ))
    }
}

// ---------------------------------------------------------------------------
// Task specs and samples
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub modulus: u32,
    /// op-pool indices, applied left to right
    pub rule: Vec<usize>,
    pub encoding: Encoding,
    /// fraction of rule ops shared with the designated predecessor task
    pub portable_overlap: f64,
}

impl TaskSpec {
    /// Decode a question and return the initial state, ignoring fillers.
    pub fn decode_state(&self, question: &[Token], vocab: &Vocab) -> Result<u32> {
        let (state, _) = self.encoding.decode(question, vocab)?;
        if state >= self.modulus {
            return Err(CoreError::InvalidArgument(format!(
                "decoded state digit {state} outside modulus {}",
                self.modulus
            )));
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: u64,
    pub task_id: usize,
    pub question: Vec<Token>,
    pub ground_truth: Token,
    /// oracle label: the predecessor task's rule produces this sample's
    /// ground-truth answer (false for the first task)
    pub portable: bool,
}

/// One task's worth of data in a generated stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stream {
    pub vocab: Vocab,
    pub op_pool: Vec<OpKind>,
    pub question_len: usize,
    pub tasks: Vec<TaskData>,
    /// held-out warm-start task, not part of the evaluated sequence
    pub pretrain: TaskData,
}

// ---------------------------------------------------------------------------
// Stream configuration & generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingShift {
    Identity,
    Permute,
    Relabel,
    PermuteRelabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// number of tasks T in the sequence
    pub tasks: usize,
    pub modulus: u32,
    pub n_ops: usize,
    pub n_fillers: usize,
    pub rule_len: usize,
    /// question length: one state digit plus fillers
    pub question_len: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// per-transition portable sample fraction; a single value broadcasts
    pub portable_fraction: Vec<f64>,
    /// encoding change applied at each task transition
    pub encoding_shift: EncodingShift,
    /// filler symbols used by the first task and by portable samples
    pub portable_fillers: Vec<usize>,
    /// filler symbols used by non-portable samples (the surface shift)
    pub novel_fillers: Vec<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            tasks: 2,
            modulus: 10,
            n_ops: 8,
            n_fillers: 10,
            rule_len: 2,
            question_len: 3,
            train_per_task: 64,
            test_per_task: 40,
            portable_fraction: vec![0.5],
            encoding_shift: EncodingShift::Identity,
            portable_fillers: vec![0, 1, 2, 3, 4],
            novel_fillers: vec![5, 6, 7, 8, 9],
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks < 1 {
            return Err(CoreError::Config("stream.tasks must be >= 1".into()));
        }
        if self.modulus < 2 || self.modulus as usize > N_DIGITS {
            return Err(CoreError::Config("stream.modulus must be in 2..=10".into()));
        }
        if !(1..=4).contains(&self.rule_len) {
            return Err(CoreError::Config("stream.rule_len must be in 1..=4".into()));
        }
        if self.question_len < 2 {
            return Err(CoreError::Config(
                "stream.question_len must be >= 2 (state digit plus fillers)".into(),
            ));
        }
        if self.train_per_task < 1 || self.test_per_task < 1 {
            return Err(CoreError::Config("per-task sample counts must be >= 1".into()));
        }
        for &p in &self.portable_fraction {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!(
                    "portable_fraction {p} outside [0, 1]"
                )));
            }
        }
        if self.portable_fraction.is_empty() {
            return Err(CoreError::Config("portable_fraction must not be empty".into()));
        }
        for pool in [&self.portable_fillers, &self.novel_fillers] {
            if pool.is_empty() || pool.iter().any(|f| *f >= self.n_fillers) {
                return Err(CoreError::Config(
                    "filler pools must be non-empty subsets of the filler alphabet".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn fraction_for_transition(&self, t: usize) -> f64 {
        if self.portable_fraction.len() == 1 {
            self.portable_fraction[0]
        } else {
            self.portable_fraction[t.min(self.portable_fraction.len() - 1)]
        }
    }
}

/// States on which two rules produce the same answer.
fn agree_states(a: &[usize], b: &[usize], pool: &[OpKind], modulus: u32) -> Vec<u32> {
    (0..modulus)
        .filter(|&s| run_rule(a, pool, s, modulus) == run_rule(b, pool, s, modulus))
        .collect()
}

fn draw_rule(len: usize, n_ops: usize, rng: &mut Rng) -> Vec<usize> {
    (0..len).map(|_| rng.below(n_ops)).collect()
}

/// Successor rule sharing a prefix of the predecessor, constrained so the
/// agree/disagree state pools can realize the requested sample fractions.
/// Some op tails have no partial-agreement partner at the requested prefix
/// length, so the share length falls back toward zero until the state pools
/// work out.
fn draw_successor_rule(
    prev: &[usize],
    fraction: f64,
    cfg: &StreamConfig,
    pool: &[OpKind],
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let len = prev.len();
    if fraction >= 1.0 {
        return Ok(prev.to_vec());
    }
    let requested = (((fraction * len as f64) + 0.5).floor() as usize).min(len - 1);
    for share in (0..=requested).rev() {
        for _attempt in 0..500 {
            let mut rule = prev[..share].to_vec();
            rule.extend(draw_rule(len - share, cfg.n_ops, rng));
            if rule == prev {
                continue;
            }
            let agree = agree_states(prev, &rule, pool, cfg.modulus);
            let n_agree = agree.len() as u32;
            let ok = if fraction <= 0.0 {
                n_agree == 0
            } else {
                n_agree > 0 && n_agree < cfg.modulus
            };
            if ok {
                return Ok(rule);
            }
        }
    }
    Err(CoreError::InvalidArgument(format!(
        "could not construct a successor rule with portable fraction {fraction} \
         (op pool too small or modulus too tight)"
    )))
}

/// All (state, fillers) question tuples for a stratum, in deterministic order.
fn question_grid(states: &[u32], fillers: &[usize], question_len: usize) -> Vec<(u32, Vec<usize>)> {
    let n_fill = question_len - 1;
    let mut grid = Vec::new();
    let combos = fillers.len().pow(n_fill as u32);
    for &s in states {
        for mut c in 0..combos {
            let mut fs = Vec::with_capacity(n_fill);
            for _ in 0..n_fill {
                fs.push(fillers[c % fillers.len()]);
                c /= fillers.len();
            }
            grid.push((s, fs));
        }
    }
    grid
}

struct StratumPools {
    train: Vec<(u32, Vec<usize>)>,
    test: Vec<(u32, Vec<usize>)>,
}

/// Split a stratum's question grid into disjoint train/test tuple pools.
/// Every state value stays represented on both sides whenever the grid allows
/// it, so the rule itself remains learnable from the train split while
/// verbatim question memorization cannot solve the test split.
fn split_stratum(
    states: &[u32],
    fillers: &[usize],
    question_len: usize,
    rng: &mut Rng,
) -> StratumPools {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &s in states {
        let mut g = question_grid(&[s], fillers, question_len);
        rng.shuffle(&mut g);
        if g.len() == 1 {
            // single tuple: it must serve both splits
            train.push(g[0].clone());
            test.push(g[0].clone());
            continue;
        }
        let n_test = ((g.len() as f64 * 0.3).ceil() as usize).clamp(1, g.len() - 1);
        test.extend(g[..n_test].iter().cloned());
        train.extend(g[n_test..].iter().cloned());
    }
    StratumPools { train, test }
}

/// Draw samples round-robin across state values (shuffled filler combos
/// within each state) so every state gets balanced coverage.
#[allow(clippy::too_many_arguments)]
fn draw_samples(
    pool: &[(u32, Vec<usize>)],
    count: usize,
    spec: &TaskSpec,
    op_pool: &[OpKind],
    vocab: &Vocab,
    portable: bool,
    next_id: &mut u64,
    rng: &mut Rng,
) -> Vec<Sample> {
    let mut states: Vec<u32> = Vec::new();
    for (s, _) in pool {
        if !states.contains(s) {
            states.push(*s);
        }
    }
    let mut per_state: Vec<Vec<usize>> = states
        .iter()
        .map(|s| {
            let mut idx: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].0 == *s).collect();
            rng.shuffle(&mut idx);
            idx
        })
        .collect();
    let mut cursors = vec![0usize; states.len()];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let s = i % states.len();
        let group = &mut per_state[s];
        if cursors[s] == group.len() {
            rng.shuffle(group);
            cursors[s] = 0;
        }
        let (state, fillers) = &pool[group[cursors[s]]];
        cursors[s] += 1;
        let question = spec.encoding.render(*state, fillers, vocab);
        let answer_value = run_rule(&spec.rule, op_pool, *state, spec.modulus);
        let sample = Sample {
            sample_id: *next_id,
            task_id: spec.task_id,
            question,
            ground_truth: vocab.answer(answer_value),
            portable,
        };
        *next_id += 1;
        out.push(sample);
    }
    out
}

/// Generate a full task stream. Pure function of `(config, rng seed/stream)`.
pub fn generate_stream(config: &StreamConfig, rng: &Rng) -> Result<Stream> {
    config.validate()?;
    let vocab = Vocab::new(config.modulus, config.n_ops, config.n_fillers);
    let op_pool = build_op_pool(config.modulus, config.n_ops)?;
    let mut rule_rng = rng.derive_named("stream/rules");
    let mut enc_rng = rng.derive_named("stream/encodings");
    let mut next_id: u64 = 0;
    let identity = Encoding::identity(config.question_len, config.n_fillers);

    // held-out warm-start task (task_id 0), fillers from the portable pool
    let pretrain_spec = TaskSpec {
        task_id: 0,
        modulus: config.modulus,
        rule: draw_rule(config.rule_len, config.n_ops, &mut rule_rng),
        encoding: identity.clone(),
        portable_overlap: 0.0,
    };
    let all_states: Vec<u32> = (0..config.modulus).collect();
    let mut sample_rng = rng.derive_named("stream/samples/pretrain");
    let pools = split_stratum(
        &all_states,
        &config.portable_fillers,
        config.question_len,
        &mut sample_rng,
    );
    let pretrain = TaskData {
        train: draw_samples(
            &pools.train,
            config.train_per_task,
            &pretrain_spec,
            &op_pool,
            &vocab,
            false,
            &mut next_id,
            &mut sample_rng,
        ),
        test: draw_samples(
            &pools.test,
            config.test_per_task,
            &pretrain_spec,
            &op_pool,
            &vocab,
            false,
            &mut next_id,
            &mut sample_rng,
        ),
        spec: pretrain_spec,
    };

    let mut tasks: Vec<TaskData> = Vec::with_capacity(config.tasks);
    let mut prev_rule: Option<Vec<usize>> = None;
    for t in 0..config.tasks {
        let task_id = t + 1;
        let mut sample_rng = rng.derive_named(&format!("stream/samples/task{task_id}"));
        let (rule, fraction, overlap) = match &prev_rule {
            None => (
                draw_rule(config.rule_len, config.n_ops, &mut rule_rng),
                0.0,
                0.0,
            ),
            Some(prev) => {
                let fraction = config.fraction_for_transition(t - 1);
                let rule = draw_successor_rule(prev, fraction, config, &op_pool, &mut rule_rng)?;
                let shared = prev
                    .iter()
                    .zip(rule.iter())
                    .take_while(|(a, b)| a == b)
                    .count();
                (rule, fraction, shared as f64 / config.rule_len as f64)
            }
        };
        let encoding = if t == 0 {
            identity.clone()
        } else {
            match config.encoding_shift {
                EncodingShift::Identity => identity.clone(),
                EncodingShift::Permute => {
                    Encoding::random(config.question_len, config.n_fillers, true, false, &mut enc_rng)
                }
                EncodingShift::Relabel => {
                    Encoding::random(config.question_len, config.n_fillers, false, true, &mut enc_rng)
                }
                EncodingShift::PermuteRelabel => {
                    Encoding::random(config.question_len, config.n_fillers, true, true, &mut enc_rng)
                }
            }
        };
        let spec = TaskSpec {
            task_id,
            modulus: config.modulus,
            rule,
            encoding,
            portable_overlap: overlap,
        };

        let (train, test) = match &prev_rule {
            None => {
                let pools = split_stratum(
                    &all_states,
                    &config.portable_fillers,
                    config.question_len,
                    &mut sample_rng,
                );
                (
                    draw_samples(
                        &pools.train,
                        config.train_per_task,
                        &spec,
                        &op_pool,
                        &vocab,
                        false,
                        &mut next_id,
                        &mut sample_rng,
                    ),
                    draw_samples(
                        &pools.test,
                        config.test_per_task,
                        &spec,
                        &op_pool,
                        &vocab,
                        false,
                        &mut next_id,
                        &mut sample_rng,
                    ),
                )
            }
            Some(prev) => {
                let agree = agree_states(prev, &spec.rule, &op_pool, config.modulus);
                let disagree: Vec<u32> = (0..config.modulus)
                    .filter(|s| !agree.contains(s))
                    .collect();
                let n_portable_train =
                    ((fraction * config.train_per_task as f64) + 0.5).floor() as usize;
                let n_portable_test =
                    ((fraction * config.test_per_task as f64) + 0.5).floor() as usize;

                let mut train = Vec::new();
                let mut test = Vec::new();
                if n_portable_train > 0 || n_portable_test > 0 {
                    let pools = split_stratum(
                        &agree,
                        &config.portable_fillers,
                        config.question_len,
                        &mut sample_rng,
                    );
                    train.extend(draw_samples(
                        &pools.train,
                        n_portable_train,
                        &spec,
                        &op_pool,
                        &vocab,
                        true,
                        &mut next_id,
                        &mut sample_rng,
                    ));
                    test.extend(draw_samples(
                        &pools.test,
                        n_portable_test,
                        &spec,
                        &op_pool,
                        &vocab,
                        true,
                        &mut next_id,
                        &mut sample_rng,
                    ));
                }
                let n_novel_train = config.train_per_task - n_portable_train;
                let n_novel_test = config.test_per_task - n_portable_test;
                if n_novel_train > 0 || n_novel_test > 0 {
                    let pools = split_stratum(
                        &disagree,
                        &config.novel_fillers,
                        config.question_len,
                        &mut sample_rng,
                    );
                    train.extend(draw_samples(
                        &pools.train,
                        n_novel_train,
                        &spec,
                        &op_pool,
                        &vocab,
                        false,
                        &mut next_id,
                        &mut sample_rng,
                    ));
                    test.extend(draw_samples(
                        &pools.test,
                        n_novel_test,
                        &spec,
                        &op_pool,
                        &vocab,
                        false,
                        &mut next_id,
                        &mut sample_rng,
                    ));
                }
                (train, test)
            }
        };
        prev_rule = Some(spec.rule.clone());
        tasks.push(TaskData { spec, train, test });
    }

    Ok(Stream {
        vocab,
        op_pool,
        question_len: config.question_len,
        tasks,
        pretrain,
    })
}

impl Stream {
    /// The trajectory a perfect solver would emit for a sample of `spec`.
    pub fn oracle_trajectory(&self, spec: &TaskSpec, sample: &Sample) -> Vec<Token> {
        let mut toks = Vec::with_capacity(spec.rule.len() + 5);
        toks.push(self.vocab.reason_open());
        for &op in &spec.rule {
            toks.push(self.vocab.op(op));
        }
        toks.push(self.vocab.reason_close());
        toks.push(self.vocab.answer_open());
        toks.push(sample.ground_truth);
        toks.push(self.vocab.answer_close());
        toks
    }

    pub fn task(&self, task_id: usize) -> &TaskData {
        if task_id == 0 {
            &self.pretrain
        } else {
            &self.tasks[task_id - 1]
        }
    }

    /// Longest context a policy must handle: question plus emitted tokens.
    pub fn max_context_len(&self, max_gen_len: usize) -> usize {
        self.question_len + max_gen_len
    }
}

// ---------------------------------------------------------------------------
// Reward verifier
// ---------------------------------------------------------------------------

pub const REWARD_ACCURACY: f64 = 1.0;
pub const REWARD_FORMAT_PERFECT: f64 = 0.7;
pub const REWARD_FORMAT_PARTIAL: f64 = 0.0;
pub const REWARD_FORMAT_VIOLATION: f64 = -0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reward {
    pub total: f64,
    pub accuracy: f64,
    pub format: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spans {
    /// token indices strictly between the first reasoning delimiters
    pub reasoning: Option<(usize, usize)>,
    /// token indices strictly between the last well-formed answer delimiters
    pub answer: Option<(usize, usize)>,
}

/// Locate reasoning and answer spans in an emitted sequence.
pub fn find_spans(tokens: &[Token], vocab: &Vocab) -> Spans {
    let reasoning = tokens
        .iter()
        .position(|&t| t == vocab.reason_open())
        .and_then(|open| {
            tokens[open + 1..]
                .iter()
                .position(|&t| t == vocab.reason_close())
                .map(|rel| (open + 1, open + 1 + rel))
        });
    let mut answer = None;
    for (i, &t) in tokens.iter().enumerate() {
        if t == vocab.answer_open() {
            if let Some(rel) = tokens[i + 1..].iter().position(|&t| t == vocab.answer_close()) {
                answer = Some((i + 1, i + 1 + rel));
            }
        }
    }
    Spans { reasoning, answer }
}

fn format_is_perfect(tokens: &[Token], vocab: &Vocab) -> bool {
    // exactly: <r> body... </r> <a> answer-token </a>
    if tokens.len() < 5 {
        return false;
    }
    if tokens[0] != vocab.reason_open() {
        return false;
    }
    let close = match tokens.iter().position(|&t| t == vocab.reason_close()) {
        Some(i) => i,
        None => return false,
    };
    if tokens[1..close].iter().any(|&t| vocab.is_delimiter(t)) {
        return false;
    }
    let rest = &tokens[close + 1..];
    rest.len() == 3
        && rest[0] == vocab.answer_open()
        && vocab.is_answer(rest[1])
        && rest[2] == vocab.answer_close()
}

/// Score an emitted token sequence against a sample's ground truth.
///
/// The format reward checks the delimiter skeleton: 0.7 for the exact
/// structure, 0.0 when both delimiter classes appear but the structure is
/// broken, -0.7 when a delimiter class is missing entirely. The accuracy
/// reward evaluates only the final answer: 1.0 when a single-token answer
/// span matches the ground truth. Totals land in
/// {-0.7, 0.0, 0.3, 0.7, 1.0, 1.7}.
pub fn verify(tokens: &[Token], ground_truth: Token, vocab: &Vocab) -> Reward {
    let has_reason_class = tokens
        .iter()
        .any(|&t| t == vocab.reason_open() || t == vocab.reason_close());
    let has_answer_class = tokens
        .iter()
        .any(|&t| t == vocab.answer_open() || t == vocab.answer_close());
    let format = if !has_reason_class || !has_answer_class {
        REWARD_FORMAT_VIOLATION
    } else if format_is_perfect(tokens, vocab) {
        REWARD_FORMAT_PERFECT
    } else {
        REWARD_FORMAT_PARTIAL
    };
    let spans = find_spans(tokens, vocab);
    let accuracy = match spans.answer {
        Some((s, e)) if e - s == 1 && tokens[s] == ground_truth => REWARD_ACCURACY,
        _ => 0.0,
    };
    // exact table values; a float sum of 1.0 and -0.7 would miss 0.3 by an ulp
    let correct = accuracy > 0.0;
    let total = if format == REWARD_FORMAT_VIOLATION {
        if correct { 0.3 } else { -0.7 }
    } else if format == REWARD_FORMAT_PARTIAL {
        if correct { 1.0 } else { 0.0 }
    } else if correct {
        1.7
    } else {
        0.7
    };
    Reward {
        total,
        accuracy,
        format,
    }
}

// ---------------------------------------------------------------------------
// Reasoning interpreter
// ---------------------------------------------------------------------------

/// Execute the reasoning span of a trajectory as an op program on the
/// sample's decoded initial state. Total: malformed input yields `None`.
pub fn execute_reasoning(
    tokens: &[Token],
    spec: &TaskSpec,
    sample: &Sample,
    op_pool: &[OpKind],
    vocab: &Vocab,
) -> Option<Token> {
    let (start, end) = find_spans(tokens, vocab).reasoning?;
    let mut ops = Vec::with_capacity(end - start);
    for &t in &tokens[start..end] {
        ops.push(vocab.op_id(t)?);
    }
    let state = spec.decode_state(&sample.question, vocab).ok()?;
    let final_state = run_rule(&ops, op_pool, state, spec.modulus);
    Some(vocab.answer(final_state))
}

/// Reasoning-correctness label: the parsed op sequence is valid and executes
/// to the ground-truth answer, independent of the emitted answer token.
pub fn reasoning_correct(
    tokens: &[Token],
    spec: &TaskSpec,
    sample: &Sample,
    op_pool: &[OpKind],
    vocab: &Vocab,
) -> bool {
    execute_reasoning(tokens, spec, sample, op_pool, vocab) == Some(sample.ground_truth)
}

// ---------------------------------------------------------------------------
// Stream dump / load (line-delimited records)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "t")]
enum StreamLine {
    #[serde(rename = "header")]
    Header {
        vocab: Vocab,
        op_pool: Vec<OpKind>,
        question_len: usize,
    },
    #[serde(rename = "task")]
    Task { spec: TaskSpec, pretrain: bool },
    #[serde(rename = "sample")]
    SampleLine {
        split: String,
        task_id: usize,
        sample_id: u64,
        tokens: Vec<Token>,
        ground_truth: Token,
        portable: bool,
    },
}

pub fn dump_stream<W: Write>(stream: &Stream, mut w: W) -> Result<()> {
    let mut write_line = |line: &StreamLine| -> Result<()> {
        let s = serde_json::to_string(line).map_err(|e| CoreError::Serde(e.to_string()))?;
        writeln!(w, "{s}")?;
        Ok(())
    };
    write_line(&StreamLine::Header {
        vocab: stream.vocab.clone(),
        op_pool: stream.op_pool.clone(),
        question_len: stream.question_len,
    })?;
    let dump_task = |data: &TaskData,
                     pretrain: bool,
                     write_line: &mut dyn FnMut(&StreamLine) -> Result<()>|
     -> Result<()> {
        write_line(&StreamLine::Task {
            spec: data.spec.clone(),
            pretrain,
        })?;
        for (split, samples) in [("train", &data.train), ("test", &data.test)] {
            for s in samples {
                write_line(&StreamLine::SampleLine {
                    split: split.to_string(),
                    task_id: s.task_id,
                    sample_id: s.sample_id,
                    tokens: s.question.clone(),
                    ground_truth: s.ground_truth,
                    portable: s.portable,
                })?;
            }
        }
        Ok(())
    };
    dump_task(&stream.pretrain, true, &mut write_line)?;
    for task in &stream.tasks {
        dump_task(task, false, &mut write_line)?;
    }
    Ok(())
}

pub fn load_stream<R: BufRead>(r: R) -> Result<Stream> {
    let mut header: Option<(Vocab, Vec<OpKind>, usize)> = None;
    let mut pretrain: Option<TaskData> = None;
    let mut tasks: Vec<TaskData> = Vec::new();
    let mut current_is_pretrain = false;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StreamLine =
            serde_json::from_str(&line).map_err(|e| CoreError::Serde(e.to_string()))?;
        match parsed {
            StreamLine::Header {
                vocab,
                op_pool,
                question_len,
            } => header = Some((vocab, op_pool, question_len)),
            StreamLine::Task { spec, pretrain: p } => {
                let data = TaskData {
                    spec,
                    train: Vec::new(),
                    test: Vec::new(),
                };
                current_is_pretrain = p;
                if p {
                    pretrain = Some(data);
                } else {
                    tasks.push(data);
                }
            }
            StreamLine::SampleLine {
                split,
                task_id,
                sample_id,
                tokens,
                ground_truth,
                portable,
            } => {
                let sample = Sample {
                    sample_id,
                    task_id,
                    question: tokens,
                    ground_truth,
                    portable,
                };
                let target = if current_is_pretrain {
                    pretrain
                        .as_mut()
                        .ok_or_else(|| CoreError::Serde("sample before task line".into()))?
                } else {
                    tasks
                        .last_mut()
                        .ok_or_else(|| CoreError::Serde("sample before task line".into()))?
                };
                if split == "train" {
                    target.train.push(sample);
                } else {
                    target.test.push(sample);
                }
            }
        }
    }
    let (vocab, op_pool, question_len) =
        header.ok_or_else(|| CoreError::Serde("stream file missing header line".into()))?;
    Ok(Stream {
        vocab,
        op_pool,
        question_len,
        tasks,
        pretrain: pretrain
            .ok_or_else(|| CoreError::Serde("stream file missing pretrain task".into()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert, prop_assume, proptest};

    fn small_stream(fraction: f64, tasks: usize) -> Stream {
        let cfg = StreamConfig {
            tasks,
            portable_fraction: vec![fraction],
            train_per_task: 100,
            test_per_task: 40,
            ..Default::default()
        };
        generate_stream(&cfg, &Rng::new(7)).unwrap()
    }

    #[test]
    fn vocab_ranges_are_disjoint() {
        let v = Vocab::new(10, 8, 10);
        for t in 0..v.size() {
            let kinds = [
                v.is_digit(t),
                v.is_filler(t),
                v.is_op(t),
                v.is_answer(t),
                v.is_delimiter(t),
                t == v.probe(),
                t == v.true_token(),
                t == v.false_token(),
            ];
            assert_eq!(kinds.iter().filter(|k| **k).count(), 1, "token {t}");
            assert!(v.kind(t).is_some());
        }
        assert!(v.is_digit(v.digit(3)));
        assert!(v.is_filler(v.filler(9)));
        assert!(v.is_op(v.op(2)));
        assert!(v.is_answer(v.answer(9)));
        assert_eq!(v.op_id(v.op(5)), Some(5));
        assert_eq!(v.answer_value(v.answer(4)), Some(4));
        assert_eq!(v.false_token(), v.size() - 1);
        assert_eq!(v.kind(v.size()), None);
    }

    #[test]
    fn ops_are_deterministic_and_bijective() {
        let pool = build_op_pool(10, 10).unwrap();
        for op in &pool {
            let mut seen = [false; 10];
            for s in 0..10 {
                let out = op.apply(s, 10);
                assert_eq!(out, op.apply(s, 10));
                assert!(!seen[out as usize], "{} not bijective", op.name());
                seen[out as usize] = true;
            }
        }
    }

    #[test]
    fn op_pool_too_small_errors() {
        assert!(build_op_pool(3, 50).is_err());
    }

    #[test]
    fn encoding_roundtrip() {
        let v = Vocab::new(10, 8, 10);
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let enc = Encoding::random(4, 10, true, true, &mut rng);
            assert!(enc.is_bijection());
            let rendered = enc.render(7, &[2, 9, 0], &v);
            let (state, fillers) = enc.decode(&rendered, &v).unwrap();
            assert_eq!(state, 7);
            assert_eq!(fillers, vec![2, 9, 0]);
        }
    }

    #[test]
    fn decode_rejects_malformed_questions() {
        let v = Vocab::new(10, 8, 10);
        let enc = Encoding::identity(3, 10);
        // two digit tokens where one digit and two fillers are expected
        assert!(enc.decode(&[v.digit(1), v.digit(2), v.filler(0)], &v).is_err());
        assert!(enc.decode(&[v.filler(1), v.filler(2), v.filler(0)], &v).is_err());
        assert!(enc.decode(&[v.digit(1), v.filler(2)], &v).is_err());
    }

    #[test]
    fn overlap_zero_has_no_portable_samples() {
        let s = small_stream(0.0, 2);
        assert!(s.tasks[1].train.iter().all(|x| !x.portable));
        assert!(s.tasks[1].test.iter().all(|x| !x.portable));
        // and the predecessor rule really fails on every task-2 sample
        let prev = &s.tasks[0].spec;
        for sample in &s.tasks[1].train {
            let state = s.tasks[1].spec.decode_state(&sample.question, &s.vocab).unwrap();
            let old = run_rule(&prev.rule, &s.op_pool, state, 10);
            assert_ne!(s.vocab.answer(old), sample.ground_truth);
        }
    }

    #[test]
    fn overlap_one_is_fully_portable() {
        let s = small_stream(1.0, 2);
        assert_eq!(s.tasks[1].spec.rule, s.tasks[0].spec.rule);
        assert!(s.tasks[1].train.iter().all(|x| x.portable));
        // task-1 rule trajectory scores 1.7 on every task-2 sample
        for sample in &s.tasks[1].train {
            let traj = s.oracle_trajectory(&s.tasks[0].spec, sample);
            let r = verify(&traj, sample.ground_truth, &s.vocab);
            assert_eq!(r.total, 1.7);
        }
    }

    #[test]
    fn overlap_half_exact_count() {
        let s = small_stream(0.5, 3);
        for t in [1, 2] {
            let n = s.tasks[t].train.iter().filter(|x| x.portable).count();
            assert_eq!(n, 50, "task {} portable train count", t + 1);
        }
    }

    #[test]
    fn portable_flag_matches_predecessor_rule_agreement() {
        let s = small_stream(0.5, 2);
        let prev = &s.tasks[0].spec;
        let cur = &s.tasks[1].spec;
        for sample in s.tasks[1].train.iter().chain(s.tasks[1].test.iter()) {
            let state = cur.decode_state(&sample.question, &s.vocab).unwrap();
            let old = s.vocab.answer(run_rule(&prev.rule, &s.op_pool, state, 10));
            assert_eq!(sample.portable, old == sample.ground_truth);
        }
    }

    #[test]
    fn sample_invariant_rule_reproduces_ground_truth() {
        let s = small_stream(0.5, 3);
        for task in &s.tasks {
            for sample in task.train.iter().chain(task.test.iter()) {
                let state = task.spec.decode_state(&sample.question, &s.vocab).unwrap();
                let ans = run_rule(&task.spec.rule, &s.op_pool, state, 10);
                assert_eq!(s.vocab.answer(ans), sample.ground_truth);
                let traj = s.oracle_trajectory(&task.spec, sample);
                assert_eq!(verify(&traj, sample.ground_truth, &s.vocab).total, 1.7);
            }
        }
    }

    #[test]
    fn filler_pools_separate_strata() {
        let s = small_stream(0.5, 2);
        let v = &s.vocab;
        let portable_set: Vec<Token> = [0usize, 1, 2, 3, 4].iter().map(|&f| v.filler(f)).collect();
        let novel_set: Vec<Token> = [5usize, 6, 7, 8, 9].iter().map(|&f| v.filler(f)).collect();
        for sample in &s.tasks[1].train {
            let fillers: Vec<Token> = sample
                .question
                .iter()
                .copied()
                .filter(|&t| v.is_filler(t))
                .collect();
            if sample.portable {
                assert!(fillers.iter().all(|f| portable_set.contains(f)));
            } else {
                assert!(fillers.iter().all(|f| novel_set.contains(f)));
            }
        }
    }

    #[test]
    fn stream_is_deterministic_in_seed() {
        let cfg = StreamConfig::default();
        let a = generate_stream(&cfg, &Rng::new(11)).unwrap();
        let b = generate_stream(&cfg, &Rng::new(11)).unwrap();
        let c = generate_stream(&cfg, &Rng::new(12)).unwrap();
        assert_eq!(
            serde_json::to_string(&a.tasks).unwrap(),
            serde_json::to_string(&b.tasks).unwrap()
        );
        assert_ne!(
            serde_json::to_string(&a.tasks).unwrap(),
            serde_json::to_string(&c.tasks).unwrap()
        );
    }

    #[test]
    fn train_test_tuples_disjoint() {
        let s = small_stream(0.5, 2);
        for task in &s.tasks {
            let train: std::collections::HashSet<_> =
                task.train.iter().map(|x| x.question.clone()).collect();
            for test in &task.test {
                assert!(!train.contains(&test.question));
            }
        }
    }

    #[test]
    fn invalid_fraction_rejected() {
        let cfg = StreamConfig {
            portable_fraction: vec![1.5],
            ..Default::default()
        };
        assert!(generate_stream(&cfg, &Rng::new(1)).is_err());
    }

    #[test]
    fn verifier_reward_table() {
        let v = Vocab::new(10, 8, 10);
        let gt = v.answer(3);
        let wrong = v.answer(4);
        let op = v.op(0);
        // perfect format, correct answer -> 1.7
        let t_perfect = vec![v.reason_open(), op, v.reason_close(), v.answer_open(), gt, v.answer_close()];
        assert_eq!(verify(&t_perfect, gt, &v).total, 1.7);
        // perfect format, wrong answer -> 0.7
        let t_wrong = vec![v.reason_open(), op, v.reason_close(), v.answer_open(), wrong, v.answer_close()];
        assert_eq!(verify(&t_wrong, gt, &v).total, 0.7);
        // no delimiters at all -> -0.7
        assert_eq!(verify(&[op, gt], gt, &v).total, -0.7);
        // reasoning delimiters only -> -0.7 (answer class absent)
        let t_r_only = vec![v.reason_open(), op, v.reason_close(), gt];
        assert_eq!(verify(&t_r_only, gt, &v).total, -0.7);
        // answer delimiters only, correct answer -> 0.3
        let t_a_only = vec![v.answer_open(), gt, v.answer_close()];
        assert_eq!(verify(&t_a_only, gt, &v).total, 0.3);
        // broken structure (trailing junk), correct answer -> 1.0
        let t_partial = vec![v.reason_open(), op, v.reason_close(), v.answer_open(), gt, v.answer_close(), op];
        assert_eq!(verify(&t_partial, gt, &v).total, 1.0);
        // broken structure, wrong answer -> 0.0
        let t_partial_wrong = vec![v.reason_open(), v.answer_open(), wrong, v.answer_close()];
        assert_eq!(verify(&t_partial_wrong, gt, &v).total, 0.0);
    }

    #[test]
    fn interpreter_hand_case() {
        // 3 add2 -> 5, then doubling: 5*2 = 10 = 0 mod 10
        let pool2 = vec![OpKind::Add(2), OpKind::Mul(2)];
        assert_eq!(run_rule(&[0, 1], &pool2, 3, 10), 0);
        // and with the mul3 pool: (3+2)*3 = 15 = 5 mod 10
        let pool = vec![OpKind::Add(2), OpKind::Mul(3)];
        assert_eq!(run_rule(&[0, 1], &pool, 3, 10), 5);
    }

    #[test]
    fn interpreter_on_trajectories() {
        let s = small_stream(0.5, 2);
        let task = &s.tasks[0];
        let sample = &task.train[0];
        // oracle trajectory executes to ground truth
        let traj = s.oracle_trajectory(&task.spec, sample);
        assert_eq!(
            execute_reasoning(&traj, &task.spec, sample, &s.op_pool, &s.vocab),
            Some(sample.ground_truth)
        );
        assert!(reasoning_correct(&traj, &task.spec, sample, &s.op_pool, &s.vocab));
        // empty reasoning is the identity program
        let empty = vec![s.vocab.reason_open(), s.vocab.reason_close()];
        let state = task.spec.decode_state(&sample.question, &s.vocab).unwrap();
        assert_eq!(
            execute_reasoning(&empty, &task.spec, sample, &s.op_pool, &s.vocab),
            Some(s.vocab.answer(state))
        );
        // a question token inside the reasoning span is invalid
        let bad = vec![s.vocab.reason_open(), s.vocab.digit(1), s.vocab.reason_close()];
        assert_eq!(
            execute_reasoning(&bad, &task.spec, sample, &s.op_pool, &s.vocab),
            None
        );
        // no reasoning delimiters is invalid
        assert_eq!(
            execute_reasoning(&[s.vocab.op(0)], &task.spec, sample, &s.op_pool, &s.vocab),
            None
        );
    }

    #[test]
    fn dump_load_roundtrip() {
        let s = small_stream(0.5, 2);
        let mut buf = Vec::new();
        dump_stream(&s, &mut buf).unwrap();
        let loaded = load_stream(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(
            serde_json::to_string(&s.tasks).unwrap(),
            serde_json::to_string(&loaded.tasks).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&s.pretrain).unwrap(),
            serde_json::to_string(&loaded.pretrain).unwrap()
        );
    }

    proptest! {
        // Verifier totality: any token sequence yields one of the six values.
        #[test]
        fn verifier_total(tokens in proptest::collection::vec(0usize..45, 0..16)) {
            let v = Vocab::new(10, 8, 10);
            prop_assume!(tokens.iter().all(|t| *t < v.size()));
            let r = verify(&tokens, v.answer(0), &v);
            let allowed = [-0.7, 0.0, 0.3, 0.7, 1.0, 1.7];
            prop_assert!(allowed.iter().any(|a| (r.total - a).abs() < 1e-12));
            prop_assert!((r.total - (r.accuracy + r.format)).abs() < 1e-12);
        }
    }
}
