//! The tiny autoregressive categorical policy: a pooled-context MLP over
//! token + position embeddings. Small enough that backpropagation is written
//! by hand and checked against the finite-difference oracle.

use crate::error::{CoreError, Result};
use crate::numerics::{ensure_finite, hash_f64s, log_softmax_inplace, Matrix, Rng};
use crate::tasks::{find_spans, Token, Vocab};
use std::io::Read;
use std::path::Path;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub max_context: usize,
}

impl PolicyDims {
    pub fn n_params(&self) -> usize {
        self.vocab * self.embed
            + self.max_context * self.embed
            + self.hidden * self.embed
            + self.hidden
            + self.vocab * self.hidden
            + self.vocab
    }
}

/// Next-token model: embeddings are mean-pooled over the context and added to
/// the last token's embedding, then passed through a tanh MLP to logits.
///
/// Flattening order (relied on by the optimizer, EWC and gradient checks):
/// token embeddings (V x d, row-major), position embeddings (L x d), W1
/// (h x d), b1 (h), W2 (V x h), b2 (V).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub token_emb: Matrix,
    pub pos_emb: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

pub const INIT_SCALE: f64 = 0.02;

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        PolicyParams {
            dims,
            token_emb: Matrix::zeros(dims.vocab, dims.embed),
            pos_emb: Matrix::zeros(dims.max_context, dims.embed),
            w1: Matrix::zeros(dims.hidden, dims.embed),
            b1: vec![0.0; dims.hidden],
            w2: Matrix::zeros(dims.vocab, dims.hidden),
            b2: vec![0.0; dims.vocab],
        }
    }

    /// Seeded normal init, scale 0.02; biases start at zero.
    pub fn init(dims: PolicyDims, rng: &mut Rng) -> Self {
        let mut p = PolicyParams::zeros(dims);
        for m in [&mut p.token_emb, &mut p.pos_emb, &mut p.w1, &mut p.w2] {
            for v in m.data.iter_mut() {
                *v = INIT_SCALE * rng.next_gaussian();
            }
        }
        p
    }

    pub fn n_params(&self) -> usize {
        self.dims.n_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(&self.token_emb.data);
        out.extend_from_slice(&self.pos_emb.data);
        out.extend_from_slice(&self.w1.data);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2.data);
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn unflatten(dims: PolicyDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.n_params() {
            return Err(CoreError::DimMismatch {
                context: "PolicyParams::unflatten".into(),
                expected: dims.n_params(),
                got: flat.len(),
            });
        }
        let mut p = PolicyParams::zeros(dims);
        let mut off = 0;
        for seg in [
            &mut p.token_emb.data,
            &mut p.pos_emb.data,
            &mut p.w1.data,
            &mut p.b1,
            &mut p.w2.data,
            &mut p.b2,
        ] {
            let len = seg.len();
            seg.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(p)
    }

    pub fn check_finite(&self) -> Result<()> {
        ensure_finite(&self.token_emb.data, "policy token embeddings")?;
        ensure_finite(&self.pos_emb.data, "policy position embeddings")?;
        ensure_finite(&self.w1.data, "policy W1")?;
        ensure_finite(&self.b1, "policy b1")?;
        ensure_finite(&self.w2.data, "policy W2")?;
        ensure_finite(&self.b2, "policy b2")?;
        Ok(())
    }

    pub fn param_hash(&self) -> u64 {
        hash_f64s(&self.flatten())
    }

    pub fn snapshot(&self, after_task: usize) -> PolicySnapshot {
        PolicySnapshot {
            params: self.clone(),
            after_task,
        }
    }
}

/// Frozen deep copy serving as the reference policy. No mutating access.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: PolicyParams,
    after_task: usize,
}

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn after_task(&self) -> usize {
        self.after_task
    }

    pub fn param_hash(&self) -> u64 {
        self.params.param_hash()
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

pub struct Forward {
    /// pooled context plus last-token embedding (d)
    pub x: Vec<f64>,
    /// post-tanh hidden activation (h); the representation-drift probe layer
    pub hidden: Vec<f64>,
    /// next-token logits (V)
    pub logits: Vec<f64>,
}

impl PolicyParams {
    fn context_ok(&self, ctx: &[Token]) -> Result<()> {
        if ctx.is_empty() {
            return Err(CoreError::InvalidArgument("empty context".into()));
        }
        if ctx.len() > self.dims.max_context {
            return Err(CoreError::DimMismatch {
                context: "context length exceeds position table".into(),
                expected: self.dims.max_context,
                got: ctx.len(),
            });
        }
        for &t in ctx {
            if t >= self.dims.vocab {
                return Err(CoreError::OutOfVocab {
                    token: t,
                    vocab: self.dims.vocab,
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &[Token]) -> Result<Forward> {
        self.context_ok(ctx)?;
        let d = self.dims.embed;
        let n = ctx.len();
        let inv_n = 1.0 / n as f64;
        let mut x = vec![0.0; d];
        for (i, &t) in ctx.iter().enumerate() {
            let te = self.token_emb.row(t);
            let pe = self.pos_emb.row(i);
            let w = inv_n + if i == n - 1 { 1.0 } else { 0.0 };
            for k in 0..d {
                x[k] += w * (te[k] + pe[k]);
            }
        }
        let mut hidden = vec![0.0; self.dims.hidden];
        self.w1.matvec(&x, &mut hidden);
        for (z, b) in hidden.iter_mut().zip(self.b1.iter()) {
            *z = (*z + b).tanh();
        }
        let mut logits = vec![0.0; self.dims.vocab];
        self.w2.matvec(&hidden, &mut logits);
        for (l, b) in logits.iter_mut().zip(self.b2.iter()) {
            *l += b;
        }
        Ok(Forward { x, hidden, logits })
    }

    /// Full next-token log distribution for a context.
    pub fn next_logprobs(&self, ctx: &[Token]) -> Result<Vec<f64>> {
        let mut logits = self.forward(ctx)?.logits;
        log_softmax_inplace(&mut logits);
        Ok(logits)
    }

    /// Hidden activation for the drift probe (context = the question prefix).
    pub fn hidden_activation(&self, ctx: &[Token]) -> Result<Vec<f64>> {
        Ok(self.forward(ctx)?.hidden)
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub max_len: usize,
    pub greedy: bool,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 0.7,
            top_k: 50,
            top_p: 0.9,
            max_len: 10,
            greedy: false,
        }
    }
}

pub const MIN_FORMAT_LEN: usize = 5; // <r> </r> <a> tok </a>

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<Token>,
    /// log-probs of the emitted tokens under the full (untruncated) softmax
    /// of the generating policy, one per emitted position
    pub logprobs: Vec<f64>,
    pub reasoning_span: Option<(usize, usize)>,
    pub answer_span: Option<(usize, usize)>,
    /// true when generation stopped at the answer-close delimiter
    pub finished: bool,
}

impl Trajectory {
    pub fn from_tokens(tokens: Vec<Token>, logprobs: Vec<f64>, finished: bool, vocab: &Vocab) -> Self {
        let spans = find_spans(&tokens, vocab);
        Trajectory {
            tokens,
            logprobs,
            reasoning_span: spans.reasoning,
            answer_span: spans.answer,
            finished,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn argmax_token(logits: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Draw one token with temperature, top-k and top-p truncation. The recorded
/// log-prob is NOT affected by truncation; callers take it from the full
/// softmax separately.
fn sample_token(logits: &[f64], decode: &DecodeParams, rng: &mut Rng) -> Token {
    if decode.greedy {
        return argmax_token(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / decode.temperature).collect();
    let probs = crate::numerics::softmax(&scaled);
    // sort by probability descending, token id ascending for ties
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });
    let k = decode.top_k.max(1).min(order.len());
    order.truncate(k);
    if decode.top_p < 1.0 {
        let mut cum = 0.0;
        let mut keep = order.len();
        for (i, &t) in order.iter().enumerate() {
            cum += probs[t];
            if cum >= decode.top_p {
                keep = i + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    let kept: Vec<f64> = order.iter().map(|&t| probs[t]).collect();
    order[rng.pick_weighted(&kept)]
}

impl PolicyParams {
    /// Ancestral sampling of one trajectory; stops at the answer-close token
    /// or `max_len`.
    pub fn sample_trajectory(
        &self,
        vocab: &Vocab,
        question: &[Token],
        decode: &DecodeParams,
        rng: &mut Rng,
    ) -> Result<Trajectory> {
        if decode.max_len < MIN_FORMAT_LEN {
            return Err(CoreError::InvalidArgument(format!(
                "max_len {} below minimal format length {MIN_FORMAT_LEN}",
                decode.max_len
            )));
        }
        if !decode.greedy && decode.temperature <= 0.0 {
            return Err(CoreError::InvalidArgument(
                "temperature must be > 0 (use greedy for the T->0 limit)".into(),
            ));
        }
        let mut ctx = question.to_vec();
        let mut tokens = Vec::with_capacity(decode.max_len);
        let mut logprobs = Vec::with_capacity(decode.max_len);
        let mut finished = false;
        while tokens.len() < decode.max_len {
            let fwd = self.forward(&ctx)?;
            let tok = sample_token(&fwd.logits, decode, rng);
            let mut lp = fwd.logits;
            log_softmax_inplace(&mut lp);
            logprobs.push(lp[tok]);
            tokens.push(tok);
            ctx.push(tok);
            if tok == vocab.answer_close() {
                finished = true;
                break;
            }
        }
        Ok(Trajectory::from_tokens(tokens, logprobs, finished, vocab))
    }

    pub fn sample_trajectories(
        &self,
        vocab: &Vocab,
        question: &[Token],
        n: usize,
        decode: &DecodeParams,
        rng: &mut Rng,
    ) -> Result<Vec<Trajectory>> {
        if n == 0 {
            return Err(CoreError::InvalidArgument("n must be >= 1".into()));
        }
        (0..n)
            .map(|_| self.sample_trajectory(vocab, question, decode, rng))
            .collect()
    }

    /// Teacher-forced log-probs of every emitted token, from the full softmax.
    pub fn logprobs_under(&self, question: &[Token], emitted: &[Token]) -> Result<Vec<f64>> {
        let mut ctx = question.to_vec();
        let mut out = Vec::with_capacity(emitted.len());
        for &tok in emitted {
            if tok >= self.dims.vocab {
                return Err(CoreError::OutOfVocab {
                    token: tok,
                    vocab: self.dims.vocab,
                });
            }
            let lp = self.next_logprobs(&ctx)?;
            out.push(lp[tok]);
            ctx.push(tok);
        }
        Ok(out)
    }

    /// Full log-distribution at every teacher-forced position (used by the
    /// distillation penalty and the probe heads).
    pub fn logprob_rows(&self, question: &[Token], emitted: &[Token]) -> Result<Vec<Vec<f64>>> {
        let mut ctx = question.to_vec();
        let mut out = Vec::with_capacity(emitted.len());
        for &tok in emitted {
            out.push(self.next_logprobs(&ctx)?);
            ctx.push(tok);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Backpropagation
// ---------------------------------------------------------------------------

impl PolicyParams {
    fn grad_offsets(&self) -> (usize, usize, usize, usize, usize) {
        let d = self.dims.embed;
        let off_pos = self.dims.vocab * d;
        let off_w1 = off_pos + self.dims.max_context * d;
        let off_b1 = off_w1 + self.dims.hidden * d;
        let off_w2 = off_b1 + self.dims.hidden;
        let off_b2 = off_w2 + self.dims.vocab * self.dims.hidden;
        (off_pos, off_w1, off_b1, off_w2, off_b2)
    }

    /// Accumulate d(objective)/d(params) into `grad` (flattened order), given
    /// d(objective)/d(logits) at every teacher-forced position of `emitted`.
    pub fn backprop_with_dlogits(
        &self,
        question: &[Token],
        emitted: &[Token],
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Result<()> {
        if dlogits.len() != emitted.len() {
            return Err(CoreError::DimMismatch {
                context: "backprop dlogits per position".into(),
                expected: emitted.len(),
                got: dlogits.len(),
            });
        }
        if grad.len() != self.n_params() {
            return Err(CoreError::DimMismatch {
                context: "gradient buffer".into(),
                expected: self.n_params(),
                got: grad.len(),
            });
        }
        let d = self.dims.embed;
        let h = self.dims.hidden;
        let (off_pos, off_w1, off_b1, off_w2, off_b2) = self.grad_offsets();

        let mut ctx = question.to_vec();
        let mut ghidden = vec![0.0; h];
        let mut gx = vec![0.0; d];
        for (t, &tok) in emitted.iter().enumerate() {
            let fwd = self.forward(&ctx)?;
            let dl = &dlogits[t];
            if dl.len() != self.dims.vocab {
                return Err(CoreError::DimMismatch {
                    context: format!("dlogits at position {t}"),
                    expected: self.dims.vocab,
                    got: dl.len(),
                });
            }
            // W2, b2
            for v in 0..self.dims.vocab {
                let dv = dl[v];
                if dv != 0.0 {
                    let row = off_w2 + v * h;
                    for j in 0..h {
                        grad[row + j] += dv * fwd.hidden[j];
                    }
                    grad[off_b2 + v] += dv;
                }
            }
            // back through tanh
            self.w2.matvec_t(dl, &mut ghidden);
            for j in 0..h {
                ghidden[j] *= 1.0 - fwd.hidden[j] * fwd.hidden[j];
            }
            // W1, b1
            for j in 0..h {
                let gj = ghidden[j];
                if gj != 0.0 {
                    let row = off_w1 + j * d;
                    for k in 0..d {
                        grad[row + k] += gj * fwd.x[k];
                    }
                    grad[off_b1 + j] += gj;
                }
            }
            // back to pooled input
            self.w1.matvec_t(&ghidden, &mut gx);
            let n = ctx.len();
            let inv_n = 1.0 / n as f64;
            for (i, &c) in ctx.iter().enumerate() {
                let w = inv_n + if i == n - 1 { 1.0 } else { 0.0 };
                let erow = c * d;
                let prow = off_pos + i * d;
                for k in 0..d {
                    let g = w * gx[k];
                    grad[erow + k] += g;
                    grad[prow + k] += g;
                }
            }
            ctx.push(tok);
        }
        Ok(())
    }

    /// Gradient of the weighted log-likelihood sum_t w_t log pi(tok_t | ctx_t),
    /// accumulated into `grad`.
    pub fn backprop_weighted(
        &self,
        question: &[Token],
        emitted: &[Token],
        weights: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if weights.len() != emitted.len() {
            return Err(CoreError::DimMismatch {
                context: "backprop weights per token".into(),
                expected: emitted.len(),
                got: weights.len(),
            });
        }
        ensure_finite(weights, "backprop weights")?;
        let mut ctx = question.to_vec();
        let mut dlogits = Vec::with_capacity(emitted.len());
        for (t, &tok) in emitted.iter().enumerate() {
            let fwd = self.forward(&ctx)?;
            let probs = crate::numerics::softmax(&fwd.logits);
            let w = weights[t];
            let mut dl: Vec<f64> = probs.iter().map(|p| -w * p).collect();
            dl[tok] += w;
            dlogits.push(dl);
            ctx.push(tok);
        }
        self.backprop_with_dlogits(question, emitted, &dlogits, grad)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"RLCKPT01";

pub fn write_checkpoint(path: &Path, params: &PolicyParams, after_task: usize) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    for v in [
        params.dims.vocab as u32,
        params.dims.embed as u32,
        params.dims.hidden as u32,
        params.dims.max_context as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(after_task as u64).to_le_bytes());
    let flat = params.flatten();
    buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for x in &flat {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(PolicyParams, usize)> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(CoreError::Serde(format!(
            "bad checkpoint magic in {}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut dims = [0u32; 4];
    for d in dims.iter_mut() {
        f.read_exact(&mut u32buf)?;
        *d = u32::from_le_bytes(u32buf);
    }
    let mut u64buf = [0u8; 8];
    f.read_exact(&mut u64buf)?;
    let after_task = u64::from_le_bytes(u64buf) as usize;
    f.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    let dims = PolicyDims {
        vocab: dims[0] as usize,
        embed: dims[1] as usize,
        hidden: dims[2] as usize,
        max_context: dims[3] as usize,
    };
    if n != dims.n_params() {
        return Err(CoreError::Serde("checkpoint parameter count mismatch".into()));
    }
    let mut flat = vec![0.0f64; n];
    let mut f64buf = [0u8; 8];
    for x in flat.iter_mut() {
        f.read_exact(&mut f64buf)?;
        *x = f64::from_le_bytes(f64buf);
    }
    Ok((PolicyParams::unflatten(dims, &flat)?, after_task))
}
