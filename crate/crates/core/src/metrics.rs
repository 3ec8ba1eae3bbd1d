//! Post-hoc metrics: Avg/Last/Finetune/BwT from the accuracy matrix, the
//! unbiased pass@k estimator, confidence separability (rank AUC plus
//! histograms) and the hidden-representation drift probe.

use crate::error::{CoreError, Result};
use crate::policy::PolicyParams;
use crate::tasks::Token;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Accuracy matrix and the continual-learning metric suite
// ---------------------------------------------------------------------------

/// a[i][j] = accuracy (percent) on task j+1 evaluated at checkpoint i+1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub data: Vec<Vec<f64>>,
    /// optional warm-start (zero-shot) evaluation row
    pub zero_shot: Option<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(data: Vec<Vec<f64>>) -> Result<Self> {
        let t = data.len();
        if data.iter().any(|row| row.len() != t) {
            return Err(CoreError::InvalidArgument(
                "accuracy matrix must be square".into(),
            ));
        }
        Ok(AccuracyMatrix {
            data,
            zero_shot: None,
        })
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClMetrics {
    /// mean over all checkpoint x task cells
    pub avg: f64,
    /// mean over tasks at the final checkpoint
    pub last: f64,
    /// mean of the on-diagonal (just-trained) accuracies
    pub finetune: f64,
    /// mean change of earlier-task accuracy between the final and the
    /// just-trained checkpoint; absent for a single task
    pub bwt: Option<f64>,
}

pub fn compute_cl_metrics(m: &AccuracyMatrix) -> Result<ClMetrics> {
    let t = m.size();
    if t == 0 {
        return Err(CoreError::InvalidArgument("empty accuracy matrix".into()));
    }
    let avg = m.data.iter().flatten().sum::<f64>() / (t * t) as f64;
    let last = m.data[t - 1].iter().sum::<f64>() / t as f64;
    let finetune = (0..t).map(|j| m.data[j][j]).sum::<f64>() / t as f64;
    let bwt = if t >= 2 {
        Some((0..t - 1).map(|j| m.data[t - 1][j] - m.data[j][j]).sum::<f64>() / (t - 1) as f64)
    } else {
        None
    };
    Ok(ClMetrics {
        avg,
        last,
        finetune,
        bwt,
    })
}

/// Fixed reference matrices used as exact test vectors for the metric
/// formulas (rows: checkpoints, columns: tasks).
pub const FIXTURE_MATRIX_GRPO: [[f64; 3]; 3] = [
    [53.75, 19.76, 31.77],
    [49.93, 62.12, 18.91],
    [49.57, 50.63, 36.01],
];

pub const FIXTURE_MATRIX_RDBCL: [[f64; 3]; 3] = [
    [54.58, 18.81, 32.53],
    [52.40, 63.96, 16.79],
    [50.54, 58.34, 52.50],
];

pub fn fixture_matrix(data: &[[f64; 3]; 3]) -> AccuracyMatrix {
    AccuracyMatrix::new(data.iter().map(|r| r.to_vec()).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// pass@k
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassKRecord {
    /// samples drawn for the item
    pub n: usize,
    /// correct samples among them
    pub c: usize,
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|i| (i as f64).ln()).sum()
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Unbiased estimator 1 - C(n-c, k)/C(n, k), computed in log space.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(CoreError::InvalidArgument(format!(
            "pass_at_k: c={c} exceeds n={n}"
        )));
    }
    if k == 0 || k > n {
        return Err(CoreError::InvalidArgument(format!(
            "pass_at_k: k={k} outside 1..={n}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    Ok(1.0 - (ln_choose(n - c, k) - ln_choose(n, k)).exp())
}

/// Dataset-level pass@k: mean over items.
pub fn dataset_pass_at_k(records: &[PassKRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(CoreError::InvalidArgument("no pass@k records".into()));
    }
    let mut total = 0.0;
    for r in records {
        total += pass_at_k(r.n, r.c, k)?;
    }
    Ok(total / records.len() as f64)
}

/// Monte-Carlo estimate of pass@k by resampling k of n without replacement;
/// the independent check for the closed form.
pub fn pass_at_k_monte_carlo(n: usize, c: usize, k: usize, resamples: usize, rng: &mut crate::numerics::Rng) -> f64 {
    let mut hits = 0usize;
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..resamples {
        rng.shuffle(&mut idx);
        if idx[..k].iter().any(|&i| i < c) {
            hits += 1;
        }
    }
    hits as f64 / resamples as f64
}

// ---------------------------------------------------------------------------
// Confidence separability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Separability {
    /// rank AUC of the score as a predictor of the positive label; absent
    /// when only one class is present
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub hist_pos: Vec<usize>,
    pub hist_neg: Vec<usize>,
    pub n_bins: usize,
}

/// Mann-Whitney AUC with midranks for ties.
pub fn rank_auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; ties share the midrank
        let midrank = ((i + 1) + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = positives.len() as f64;
    let nn = negatives.len() as f64;
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Histogram of scores clamped into [0,1].
pub fn histogram(scores: &[f64], n_bins: usize) -> Vec<usize> {
    let mut bins = vec![0usize; n_bins];
    for &s in scores {
        let b = ((s.clamp(0.0, 1.0)) * n_bins as f64) as usize;
        bins[b.min(n_bins - 1)] += 1;
    }
    bins
}

/// AUC + class histograms for (score, label) pairs.
pub fn confidence_separability(scored: &[(f64, bool)], n_bins: usize) -> Separability {
    let positives: Vec<f64> = scored.iter().filter(|x| x.1).map(|x| x.0).collect();
    let negatives: Vec<f64> = scored.iter().filter(|x| !x.1).map(|x| x.0).collect();
    Separability {
        auc: rank_auc(&positives, &negatives),
        n_pos: positives.len(),
        n_neg: negatives.len(),
        hist_pos: histogram(&positives, n_bins),
        hist_neg: histogram(&negatives, n_bins),
        n_bins,
    }
}

// ---------------------------------------------------------------------------
// Representation drift
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    /// Euclidean distance between hidden activations per probe sample
    pub per_sample: Vec<f64>,
    pub mean: f64,
    /// change in pairwise hidden distances between the two checkpoints
    pub pairwise_change: Vec<Vec<f64>>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Hidden-activation drift between two checkpoints over probe questions.
/// The probe layer is the post-activation hidden vector at the final prefix
/// position (the question context).
pub fn representation_drift(
    ckpt_a: &PolicyParams,
    ckpt_b: &PolicyParams,
    probes: &[Vec<Token>],
) -> Result<DriftReport> {
    if ckpt_a.dims != ckpt_b.dims {
        return Err(CoreError::InvalidArgument(
            "representation_drift: checkpoint architectures differ".into(),
        ));
    }
    let mut ha = Vec::with_capacity(probes.len());
    let mut hb = Vec::with_capacity(probes.len());
    for q in probes {
        ha.push(ckpt_a.hidden_activation(q)?);
        hb.push(ckpt_b.hidden_activation(q)?);
    }
    let per_sample: Vec<f64> = ha.iter().zip(hb.iter()).map(|(a, b)| euclidean(a, b)).collect();
    let mean = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    };
    let n = probes.len();
    let mut pairwise_change = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            pairwise_change[i][j] = euclidean(&hb[i], &hb[j]) - euclidean(&ha[i], &ha[j]);
        }
    }
    Ok(DriftReport {
        per_sample,
        mean,
        pairwise_change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::policy::PolicyDims;
    use proptest::prelude::*;

    #[test]
    fn constant_matrix_metrics() {
        let m = AccuracyMatrix::new(vec![vec![42.0; 3]; 3]).unwrap();
        let r = compute_cl_metrics(&m).unwrap();
        assert_eq!(r.avg, 42.0);
        assert_eq!(r.last, 42.0);
        assert_eq!(r.finetune, 42.0);
        assert_eq!(r.bwt, Some(0.0));
    }

    #[test]
    fn reference_matrix_values() {
        let g = compute_cl_metrics(&fixture_matrix(&FIXTURE_MATRIX_GRPO)).unwrap();
        assert!((g.last - 45.40).abs() <= 0.01, "grpo last {}", g.last);
        assert!((g.bwt.unwrap() - (-7.84)).abs() <= 0.01, "grpo bwt {:?}", g.bwt);
        assert!((g.finetune - 50.63).abs() <= 0.01);
        // the straight nine-cell mean; differs by 0.06 from the published
        // rounded Avg for this table and is asserted at the computed value
        assert!((g.avg - 41.38).abs() <= 0.01, "grpo avg {}", g.avg);

        let r = compute_cl_metrics(&fixture_matrix(&FIXTURE_MATRIX_RDBCL)).unwrap();
        assert!((r.last - 53.79).abs() <= 0.01, "rdbcl last {}", r.last);
        assert!((r.bwt.unwrap() - (-4.83)).abs() <= 0.01, "rdbcl bwt {:?}", r.bwt);
        assert!((r.finetune - 57.01).abs() <= 0.01);
        assert!((r.avg - 44.49).abs() <= 0.01, "rdbcl avg {}", r.avg);
    }

    #[test]
    fn non_square_rejected() {
        assert!(AccuracyMatrix::new(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn bwt_zero_when_final_matches_diagonal() {
        let m = AccuracyMatrix::new(vec![
            vec![60.0, 10.0, 5.0],
            vec![50.0, 70.0, 10.0],
            vec![60.0, 70.0, 80.0],
        ])
        .unwrap();
        assert_eq!(compute_cl_metrics(&m).unwrap().bwt, Some(0.0));
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(8, 8, 1).unwrap(), 1.0);
        for k in [1, 2, 4, 8] {
            assert_eq!(pass_at_k(8, 0, k).unwrap(), 0.0);
        }
        // 1 - C(6,4)/C(8,4) = 1 - 15/70 = 11/14
        let p = pass_at_k(8, 2, 4).unwrap();
        assert!((p - 11.0 / 14.0).abs() < 1e-12);
        assert!(pass_at_k(8, 2, 9).is_err());
        assert!(pass_at_k(4, 5, 1).is_err());
    }

    #[test]
    fn pass_at_k_matches_monte_carlo() {
        let mut rng = Rng::new(99);
        for c in [0usize, 1, 3, 5, 8] {
            for k in [1usize, 2, 4, 8] {
                let exact = pass_at_k(8, c, k).unwrap();
                let mc = pass_at_k_monte_carlo(8, c, k, 20_000, &mut rng);
                assert!(
                    (exact - mc).abs() < 0.02,
                    "n=8 c={c} k={k}: exact {exact} mc {mc}"
                );
            }
        }
    }

    #[test]
    fn auc_perfectly_separated() {
        assert_eq!(rank_auc(&[0.9, 0.8], &[0.3, 0.4]), Some(1.0));
    }

    #[test]
    fn auc_identical_distributions() {
        let a = [0.2, 0.5, 0.9];
        assert_eq!(rank_auc(&a, &a), Some(0.5));
    }

    #[test]
    fn auc_single_class_is_absent() {
        assert_eq!(rank_auc(&[0.5], &[]), None);
        let sep = confidence_separability(&[(0.5, true)], 10);
        assert!(sep.auc.is_none());
    }

    #[test]
    fn drift_identical_checkpoints_is_zero() {
        let dims = PolicyDims {
            vocab: 21,
            embed: 4,
            hidden: 6,
            max_context: 8,
        };
        let mut rng = Rng::new(4);
        let p = crate::policy::PolicyParams::init(dims, &mut rng);
        let probes = vec![vec![0usize, 1], vec![2, 3]];
        let d = representation_drift(&p, &p, &probes).unwrap();
        assert!(d.per_sample.iter().all(|x| *x == 0.0));
        assert_eq!(d.mean, 0.0);
    }

    #[test]
    fn drift_localizes_to_shifted_token() {
        let dims = PolicyDims {
            vocab: 21,
            embed: 4,
            hidden: 6,
            max_context: 8,
        };
        let mut rng = Rng::new(4);
        let a = crate::policy::PolicyParams::init(dims, &mut rng);
        let mut b = a.clone();
        for v in b.token_emb.row_mut(7) {
            *v += 0.5;
        }
        let probes = vec![vec![7usize, 1], vec![2, 3]];
        let d = representation_drift(&a, &b, &probes).unwrap();
        assert!(d.per_sample[0] > 1e-6);
        assert_eq!(d.per_sample[1], 0.0);
    }

    #[test]
    fn drift_architecture_mismatch_errors() {
        let mut rng = Rng::new(4);
        let a = crate::policy::PolicyParams::init(
            PolicyDims { vocab: 10, embed: 4, hidden: 6, max_context: 8 },
            &mut rng,
        );
        let b = crate::policy::PolicyParams::init(
            PolicyDims { vocab: 10, embed: 5, hidden: 6, max_context: 8 },
            &mut rng,
        );
        assert!(representation_drift(&a, &b, &[vec![0]]).is_err());
    }

    proptest! {
        #[test]
        fn pass_at_k_nondecreasing_in_k(n in 2usize..10, c in 0usize..10) {
            let c = c.min(n);
            let mut prev = 0.0;
            for k in 1..=n {
                let p = pass_at_k(n, c, k).unwrap();
                prop_assert!(p + 1e-12 >= prev);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
                prev = p;
            }
        }

        #[test]
        fn avg_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let t = 3 + rng.below(3);
            let data: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..t).map(|_| rng.next_f64() * 100.0).collect())
                .collect();
            let mut perm: Vec<usize> = (0..t).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<Vec<f64>> = (0..t)
                .map(|i| (0..t).map(|j| data[perm[i]][perm[j]]).collect())
                .collect();
            let a = compute_cl_metrics(&AccuracyMatrix::new(data).unwrap()).unwrap();
            let b = compute_cl_metrics(&AccuracyMatrix::new(permuted).unwrap()).unwrap();
            prop_assert!((a.avg - b.avg).abs() < 1e-9);
            prop_assert!((a.finetune - b.finetune).abs() < 1e-9);
        }
    }
}
