//! Deterministic RNG, dense float containers, stable softmax math, and the
//! finite-difference oracle used to validate every hand-derived gradient.

use crate::error::{CoreError, Result};

// ---------------------------------------------------------------------------
// Splittable counter RNG
// ---------------------------------------------------------------------------

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator keyed by `(seed, stream_id)`.
///
/// Identical `(seed, stream_id)` and call sequence produce identical output
/// on every platform. Deriving a stream never touches the parent's state, so
/// rollout sampling, probe sampling, Fisher estimation and so on each own an
/// independent stream and cannot perturb one another's draw sequences.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Rng {
            seed,
            stream_id,
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent stream. The parent is not mutated; the child
    /// starts at counter 0 of a stream id mixed from `(parent stream, tag)`.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng::with_stream(self.seed, mix64(self.stream_id.wrapping_add(GOLDEN_GAMMA) ^ tag))
    }

    /// Derive a stream from a label, for readable call sites.
    pub fn derive_named(&self, label: &str) -> Rng {
        self.derive(fnv1a64(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        let z = self
            .seed
            .wrapping_add(mix64(self.stream_id))
            .wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA));
        mix64(z)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (one value per call; pairs discarded
    /// deterministically to keep the draw count predictable).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = (self.next_f64()).max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Sample an index from unnormalized nonnegative weights via inverse CDF.
    /// Ties and rounding resolve deterministically toward lower indices.
    pub fn pick_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut u = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

/// FNV-1a over bytes; used for stream labels and artifact hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash a parameter vector by its f64 bit patterns. Used for checkpoint
/// identity checks in the method-equivalence tests.
pub fn hash_f64s(xs: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for x in xs {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

// ---------------------------------------------------------------------------
// Dense containers
// ---------------------------------------------------------------------------

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = self * x  (rows x cols) * (cols) -> (rows)
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            y[r] = acc;
        }
    }

    /// y = self^T * x  (cols) accumulated from (rows)
    pub fn matvec_t(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        y.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for (yc, a) in y.iter_mut().zip(row.iter()) {
                *yc += xr * a;
            }
        }
    }
}

/// Error unless every value is finite.
pub fn ensure_finite(xs: &[f64], context: &str) -> Result<()> {
    for &x in xs {
        if !x.is_finite() {
            return Err(CoreError::NonFinite {
                context: context.to_string(),
                value: x,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stable softmax math
// ---------------------------------------------------------------------------

/// log(sum(exp(xs))) with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Elementwise log softmax. Errors on non-finite input.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(CoreError::InvalidArgument("log_softmax of empty slice".into()));
    }
    ensure_finite(logits, "log_softmax input")?;
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|x| x - lse).collect())
}

/// In-place log softmax for hot paths (input already validated upstream).
pub fn log_softmax_inplace(logits: &mut [f64]) {
    let lse = log_sum_exp(logits);
    for x in logits.iter_mut() {
        *x -= lse;
    }
}

/// softmax from raw logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for x in out.iter_mut() {
        *x /= s;
    }
    out
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Central differences (f(x+h e_k) - f(x-h e_k)) / 2h per coordinate.
/// The oracle for every analytic gradient in this crate.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(CoreError::InvalidArgument("finite_diff_grad: h must be > 0".into()));
    }
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for k in 0..theta.len() {
        let orig = work[k];
        work[k] = orig + h;
        let fp = f(&work);
        work[k] = orig - h;
        let fm = f(&work);
        work[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::NonFinite {
                context: format!("finite_diff_grad at coordinate {k}"),
                value: if fp.is_finite() { fm } else { fp },
            });
        }
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error |a - n| / max(1, |a|, |n|), the standard gradient-check metric.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn log_softmax_uniform_pair() {
        let out = log_softmax(&[0.0, 0.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((out[0] + ln2).abs() < 1e-12);
        assert!((out[1] + ln2).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_no_overflow() {
        let out = log_softmax(&[1000.0, 1000.0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((out[0] + ln2).abs() < 1e-12);
        assert!((out[1] + ln2).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_hand_case() {
        // softmax(0, ln 3) = (1/4, 3/4)
        let out = log_softmax(&[0.0, 3.0_f64.ln()]).unwrap();
        assert!((out[0] - (-(4.0_f64.ln()))).abs() < 1e-12);
        assert!((out[1] - (3.0_f64 / 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_rejects_nan() {
        assert!(log_softmax(&[f64::NAN, 0.0]).is_err());
        assert!(log_softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn fd_quadratic() {
        let g = finite_diff_grad(|t| t.iter().map(|x| x * x).sum(), &[3.0], FD_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_constant_is_zero() {
        let g = finite_diff_grad(|_| 7.5, &[1.0, -2.0, 0.3], FD_STEP).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn fd_exponential() {
        let g = finite_diff_grad(|t| t[0].exp(), &[0.0], FD_STEP).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fd_matches_analytic_on_degree_two() {
        // f(x) = 2x0^2 - 3 x0 x1 + x1 + 5
        let f = |t: &[f64]| 2.0 * t[0] * t[0] - 3.0 * t[0] * t[1] + t[1] + 5.0;
        let theta = [0.7, -1.3];
        let g = finite_diff_grad(f, &theta, FD_STEP).unwrap();
        let analytic = [4.0 * theta[0] - 3.0 * theta[1], -3.0 * theta[0] + 1.0];
        assert!(grad_rel_err(&analytic, &g) < 1e-7);
    }

    #[test]
    fn rng_same_stream_reproduces() {
        let mut a = Rng::with_stream(42, 7);
        let mut b = Rng::with_stream(42, 7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_derive_does_not_touch_parent() {
        let mut a = Rng::new(42);
        let first = a.clone().next_u64();
        let _child = a.derive(3);
        assert_eq!(a.next_u64(), first);
    }

    #[test]
    fn rng_streams_differ() {
        let mut a = Rng::with_stream(42, 0);
        let mut b = Rng::with_stream(42, 1);
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn weighted_pick_is_index_of_mass() {
        let mut rng = Rng::new(1);
        let mut counts = [0usize; 3];
        for _ in 0..30_000 {
            counts[rng.pick_weighted(&[0.2, 0.5, 0.3])] += 1;
        }
        assert!((counts[1] as f64 / 30_000.0 - 0.5).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn log_softmax_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let a = log_softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = log_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn log_softmax_normalizes(xs in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let a = log_softmax(&xs).unwrap();
            let total: f64 = a.iter().map(|x| x.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
