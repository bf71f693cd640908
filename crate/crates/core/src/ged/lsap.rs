//! Linear sum assignment via the Hungarian method with row/column potentials.

use super::GedError;

/// Minimum-cost perfect assignment of a square cost matrix.
///
/// Returns `(assignment, total)` where row `i` is assigned column
/// `assignment[i]`. Runs in O(n³). Among equally cheap augmenting columns
/// the search prefers a free one, then the lowest index, which makes ties
/// resolve toward the identity (an all-zero matrix yields the identity).
pub fn solve_lsap(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64), GedError> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(GedError::Shape(format!(
                "cost matrix row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|c| !c.is_finite()) {
            return Err(GedError::Shape(format!("cost[{i}][{j}] is not finite")));
        }
    }
    let assignment = hungarian(n, |i, j| cost[i][j]);
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((assignment, total))
}

/// Core solver over an implicit `n x n` matrix; assumes finite entries.
pub(crate) fn hungarian(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta || (minv[j] == delta && owner[j] == 0 && owner[j1] != 0) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = vec![];
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn zero_matrix_gives_identity() {
        let (a, t) = solve_lsap(&vec![vec![0.0; 3]; 3]).unwrap();
        assert_eq!(a, vec![0, 1, 2]);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn two_by_two() {
        let (a, t) = solve_lsap(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(t, 2.0);
    }

    #[test]
    fn one_by_one() {
        assert_eq!(solve_lsap(&[vec![4.0]]).unwrap(), (vec![0], 4.0));
    }

    #[test]
    fn rejects_ragged_and_non_finite() {
        assert!(matches!(solve_lsap(&[vec![1.0, 2.0], vec![3.0]]), Err(GedError::Shape(_))));
        assert!(matches!(solve_lsap(&[vec![1.0, 2.0]]), Err(GedError::Shape(_))));
        assert!(solve_lsap(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn classic_three_by_three() {
        let c = [vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let (a, t) = solve_lsap(&c).unwrap();
        assert_eq!(t, 5.0);
        assert_eq!(a, vec![1, 0, 2]);
    }

    proptest! {
        #[test]
        fn matches_enumeration(n in 1usize..=5, seed in proptest::collection::vec(0u32..20, 25)) {
            let c: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| seed[i * 5 + j] as f64 * 0.5).collect())
                .collect();
            let (a, total) = solve_lsap(&c).unwrap();
            let mut seen = vec![false; n];
            for &j in &a {
                prop_assert!(!seen[j]);
                seen[j] = true;
            }
            let best = permutations(n)
                .iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| c[i][j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            prop_assert!((total - best).abs() < 1e-9);
        }
    }
}
