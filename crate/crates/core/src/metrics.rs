//! Regression and ranking metrics for similarity predictions.
//!
//! Tie conventions: average ranks for Spearman's ρ, the tie-corrected τ-b for
//! Kendall, and ascending index as the tie-break when selecting a top-k set.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("rank correlation is undefined for constant input")]
    Constant,
    #[error("k = {k} is invalid for {len} values")]
    InvalidK { k: usize, len: usize },
    #[error("no values to evaluate")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check_lengths(pred: &[f64], truth: &[f64], min: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < min {
        return Err(MetricError::TooShort { needed: min, got: pred.len() });
    }
    Ok(())
}

/// Mean squared error (raw; multiply by 1000 for the usual report scale).
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// [`mse`] scaled by 1000.
pub fn mse_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    Ok(mse(pred, truth)? * 1000.0)
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(MetricError::Constant);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman_rho(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, 2)?;
    pearson(&average_ranks(pred), &average_ranks(truth))
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Counts inversions while stably merge-sorting `v`.
fn sort_counting_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], buf) + sort_counting_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's τ-b in O(n log n) (Knight's method).
pub fn kendall_tau(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth, 2)?;
    let n = pred.len() as u64;
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(truth[a].total_cmp(&truth[b])));
    let xs: Vec<f64> = order.iter().map(|&i| pred[i]).collect();
    let mut ys: Vec<f64> = order.iter().map(|&i| truth[i]).collect();

    let n0 = n * (n - 1) / 2;
    let n1 = tied_pairs(&xs);
    let mut joint = 0;
    let mut run = 1u64;
    for k in 1..xs.len() {
        if xs[k] == xs[k - 1] && ys[k] == ys[k - 1] {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    joint += run * (run - 1) / 2;
    let swaps = sort_counting_swaps(&mut ys, &mut Vec::with_capacity(xs.len()));
    let n2 = tied_pairs(&ys);
    if n0 == n1 || n0 == n2 {
        return Err(MetricError::Constant);
    }
    let s = n0 as i64 - n1 as i64 - n2 as i64 + joint as i64 - 2 * swaps as i64;
    let denom = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    Ok((s as f64 / denom).clamp(-1.0, 1.0))
}

/// Indices of the `k` largest values, ties broken by ascending index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// `|top-k(pred) ∩ top-k(truth)| / k`.
pub fn precision_at_k(pred: &[f64], truth: &[f64], k: usize) -> Result<f64> {
    check_lengths(pred, truth, 1)?;
    if k == 0 || k > pred.len() {
        return Err(MetricError::InvalidK { k, len: pred.len() });
    }
    let mut in_truth = vec![false; truth.len()];
    for i in top_k(truth, k) {
        in_truth[i] = true;
    }
    let hits = top_k(pred, k).into_iter().filter(|&i| in_truth[i]).count();
    Ok(hits as f64 / k as f64)
}

/// Scores of one query against its database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankScope {
    /// Rank metrics per query, then averaged.
    #[default]
    PerQuery,
    /// Rank metrics once over all pairs pooled together.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse_e3: f64,
    pub rho: f64,
    pub tau: f64,
    pub p_at_10: f64,
    pub p_at_20: f64,
    pub pairs: usize,
    pub queries: usize,
    pub skipped_queries: usize,
}

/// MSE over every pair plus ranking metrics. Queries whose ranking is
/// undefined (constant truth or constant prediction) are skipped and
/// counted. `k` is capped at the database size.
pub fn evaluate_query_set(queries: &[QueryScores], scope: RankScope) -> Result<MetricReport> {
    let pred: Vec<f64> = queries.iter().flat_map(|q| q.pred.iter().copied()).collect();
    let truth: Vec<f64> = queries.iter().flat_map(|q| q.truth.iter().copied()).collect();
    for q in queries {
        check_lengths(&q.pred, &q.truth, 0)?;
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let mse_e3 = mse_metric(&pred, &truth)?;
    let rank_sets: Vec<(&[f64], &[f64])> = match scope {
        RankScope::PerQuery => queries.iter().map(|q| (&q.pred[..], &q.truth[..])).collect(),
        RankScope::Global => vec![(&pred[..], &truth[..])],
    };
    let (mut rho, mut tau, mut p10, mut p20) = (0.0, 0.0, 0.0, 0.0);
    let mut used = 0;
    let mut skipped = 0;
    for (p, t) in rank_sets {
        let pair = (spearman_rho(p, t), kendall_tau(p, t));
        let (Ok(r), Ok(k)) = pair else {
            skipped += 1;
            continue;
        };
        rho += r;
        tau += k;
        p10 += precision_at_k(p, t, 10.min(p.len()))?;
        p20 += precision_at_k(p, t, 20.min(p.len()))?;
        used += 1;
    }
    let mean = |x: f64| if used == 0 { f64::NAN } else { x / used as f64 };
    Ok(MetricReport {
        mse_e3,
        rho: mean(rho),
        tau: mean(tau),
        p_at_10: mean(p10),
        p_at_20: mean(p20),
        pairs: pred.len(),
        queries: queries.len(),
        skipped_queries: skipped,
    })
}

/// Descending score, then ascending index: the order used for ranked output.
pub fn compare_scores(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

#[cfg(test)]
pub(crate) mod reference {
    //! Direct-from-definition implementations used as oracles.

    pub fn ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let below = x.iter().filter(|&&w| w < v).count() as f64;
                let equal = x.iter().filter(|&&w| w == v).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    pub fn spearman(p: &[f64], t: &[f64]) -> Option<f64> {
        let (a, b) = (ranks(p), ranks(t));
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        (va != 0.0 && vb != 0.0).then(|| (cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
    }

    pub fn kendall(p: &[f64], t: &[f64]) -> Option<f64> {
        let sign = |d: f64| (d > 0.0) as i64 - (d < 0.0) as i64;
        let (mut s, mut nx, mut ny) = (0i64, 0i64, 0i64);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let (a, b) = (sign(p[i] - p[j]), sign(t[i] - t[j]));
                s += a * b;
                nx += a.abs();
                ny += b.abs();
            }
        }
        (nx != 0 && ny != 0).then(|| (s as f64 / ((nx as f64) * (ny as f64)).sqrt()).clamp(-1.0, 1.0))
    }

    pub fn precision(p: &[f64], t: &[f64], k: usize) -> f64 {
        let in_top = |x: &[f64], i: usize| {
            let beaten_by = (0..x.len()).filter(|&j| x[j] > x[i] || (x[j] == x[i] && j < i)).count();
            beaten_by < k
        };
        (0..p.len()).filter(|&i| in_top(p, i) && in_top(t, i)).count() as f64 / k as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        assert_eq!(mse_metric(&[0.3, 0.5], &[0.3, 0.5]).unwrap(), 0.0);
        assert!((mse_metric(&[0.6, 0.4], &[0.5, 0.5]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(mse_metric(&[1.0], &[0.0]).unwrap(), 1000.0);
        assert_eq!(mse_metric(&[1.0], &[0.0, 1.0]), Err(MetricError::LengthMismatch(1, 2)));
        assert!(mse_metric(&[], &[]).is_err());
    }

    #[test]
    fn rank_examples() {
        let a = [1.0, 2.0, 3.0];
        let b = [1.0, 3.0, 2.0];
        assert_eq!(spearman_rho(&a, &a).unwrap(), 1.0);
        assert_eq!(spearman_rho(&a, &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman_rho(&b, &a).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(kendall_tau(&a, &a).unwrap(), 1.0);
        assert_eq!(kendall_tau(&a, &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((kendall_tau(&b, &a).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::Constant));
        assert_eq!(kendall_tau(&[1.0, 2.0], &[5.0, 5.0]), Err(MetricError::Constant));
        assert!(matches!(spearman_rho(&[1.0], &[1.0]), Err(MetricError::TooShort { .. })));
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn precision_examples() {
        let truth: Vec<f64> = (0..20).map(|i| 20.0 - i as f64).collect();
        assert_eq!(precision_at_k(&truth, &truth, 10).unwrap(), 1.0);
        let reversed: Vec<f64> = truth.iter().map(|v| -v).collect();
        assert_eq!(precision_at_k(&reversed, &truth, 10).unwrap(), 0.0);
        // Top-10 of pred: indices 5..15, five shared with 0..10.
        let shifted: Vec<f64> = (0..20).map(|i| -((i as f64) - 9.5).abs() + if i >= 5 { 0.1 } else { 0.0 }).collect();
        let top: Vec<usize> = { let mut t = top_k(&shifted, 10); t.sort(); t };
        assert_eq!(top, (5..15).collect::<Vec<_>>());
        assert_eq!(precision_at_k(&shifted, &truth, 10).unwrap(), 0.5);
        assert!(precision_at_k(&truth, &truth, 0).is_err());
        assert!(precision_at_k(&truth, &truth, 21).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
    }

    #[test]
    fn agrees_with_reference_on_random_tied_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(2..40);
            let levels = rng.gen_range(2..8);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.5).collect();
            assert_eq!(average_ranks(&p), reference::ranks(&p));
            assert_eq!(spearman_rho(&p, &t).ok(), reference::spearman(&p, &t));
            assert_eq!(kendall_tau(&p, &t).ok(), reference::kendall(&p, &t));
            for k in [1, n / 2 + 1, n] {
                assert_eq!(precision_at_k(&p, &t, k).unwrap(), reference::precision(&p, &t, k));
            }
        }
    }

    #[test]
    fn query_set_evaluation() {
        let q = QueryScores { pred: vec![0.1, 0.5, 0.3, 0.9], truth: vec![0.1, 0.5, 0.3, 0.9] };
        let copies = QueryScores { pred: vec![0.2, 0.4], truth: vec![1.0, 1.0] };
        let r = evaluate_query_set(&[q.clone(), copies], RankScope::PerQuery).unwrap();
        assert_eq!((r.rho, r.tau, r.p_at_10, r.p_at_20), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.skipped_queries, 1);
        assert_eq!(r.queries, 2);
        assert_eq!(r.pairs, 6);
        let g = evaluate_query_set(&[q], RankScope::Global).unwrap();
        assert_eq!(g.rho, 1.0);
        assert_eq!(evaluate_query_set(&[], RankScope::PerQuery), Err(MetricError::Empty));
    }

    proptest! {
        #[test]
        fn rank_metrics_invariant_under_monotone_maps(v in proptest::collection::vec(-5i32..5, 3..30), w in proptest::collection::vec(-5i32..5, 30)) {
            let p: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let t: Vec<f64> = w[..p.len()].iter().map(|&x| x as f64).collect();
            let mapped: Vec<f64> = p.iter().map(|x| (x * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(spearman_rho(&p, &t).ok(), spearman_rho(&mapped, &t).ok());
            prop_assert_eq!(kendall_tau(&p, &t).ok(), kendall_tau(&mapped, &t).ok());
        }

        #[test]
        fn mse_of_self_is_zero(v in proptest::collection::vec(-1e3f64..1e3, 1..50)) {
            prop_assert_eq!(mse(&v, &v).unwrap(), 0.0);
        }

        #[test]
        fn precision_ignores_order_outside_top_k(v in proptest::collection::vec(0u32..1000, 12..30), seed in 0u64..1000) {
            let t: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let p: Vec<f64> = t.iter().rev().copied().collect();
            let k = 5;
            let base = precision_at_k(&p, &t, k).unwrap();
            // Shuffle values of items outside both top-k sets among themselves.
            let keep: Vec<usize> = top_k(&p, k).into_iter().chain(top_k(&t, k)).collect();
            let mut rest: Vec<usize> = (0..t.len()).filter(|i| !keep.contains(i)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let floor = -1.0 - rng.gen_range(0.0..1.0);
            let mut p2 = p.clone();
            let mut t2 = t.clone();
            rest.reverse();
            for (r, &i) in rest.iter().enumerate() {
                p2[i] = floor - r as f64;
                t2[i] = floor - (rest.len() - r) as f64;
            }
            prop_assert_eq!(precision_at_k(&p2, &t2, k).unwrap(), base);
        }
    }
}
