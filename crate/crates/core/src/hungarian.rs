//! Optimal bipartite assignment by shortest augmenting paths with dual
//! potentials (O(n^3)); matches min(P, G) pairs of a rectangular cost
//! matrix exactly, not greedily.

use crate::error::{Error, Result};

/// Injective map from prediction indices to ground-truth indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAssignment {
    /// (prediction_index, gt_index), sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost.at(p, g)).sum()
    }

    /// gt_index -> prediction_index lookup.
    pub fn by_gt(&self) -> Vec<Option<usize>> {
        let max_gt = self.pairs.iter().map(|&(_, g)| g).max().map_or(0, |g| g + 1);
        let mut out = vec![None; max_gt];
        for &(p, g) in &self.pairs {
            out[g] = Some(p);
        }
        out
    }
}

/// Row-major P x G cost matrix (predictions by ground truths).
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        CostMatrix { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Minimum-cost assignment of min(P, G) pairs. Deterministic for a given
/// matrix; errors on any non-finite entry.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchAssignment> {
    for r in 0..cost.rows {
        for c in 0..cost.cols {
            if !cost.at(r, c).is_finite() {
                return Err(Error::InvalidCost { row: r, col: c });
            }
        }
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(MatchAssignment { pairs: Vec::new() });
    }
    // solve with rows <= cols, transposing if needed
    let transposed = cost.rows > cost.cols;
    let (r, c) = if transposed {
        (cost.cols, cost.rows)
    } else {
        (cost.rows, cost.cols)
    };
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost.at(j, i)
        } else {
            cost.at(i, j)
        }
    };

    let mut u = vec![0.0f64; r];
    let mut v = vec![0.0f64; c + 1];
    // p[j] = row assigned to column j; column c is the virtual start column
    let mut p = vec![usize::MAX; c + 1];
    for i in 0..r {
        p[c] = i;
        let mut j0 = c;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut way = vec![c; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 0..c {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == usize::MAX {
                break;
            }
        }
        // augment along the found path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == c {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(r);
    for j in 0..c {
        if p[j] != usize::MAX {
            if transposed {
                pairs.push((j, p[j]));
            } else {
                pairs.push((p[j], j));
            }
        }
    }
    pairs.sort_unstable();
    Ok(MatchAssignment { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Factorial enumeration over all injective assignments.
    pub(crate) fn brute_force_min(cost: &CostMatrix) -> f64 {
        fn recurse(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, picked: usize, want: usize) {
            if picked == want {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            if row == cost.rows {
                return;
            }
            // skip this row (only allowed when enough rows remain)
            if cost.rows - row - 1 >= want - picked {
                recurse(cost, row + 1, used, acc, best, picked, want);
            }
            for c in 0..cost.cols {
                if !used[c] {
                    used[c] = true;
                    recurse(cost, row + 1, used, acc + cost.at(row, c), best, picked + 1, want);
                    used[c] = false;
                }
            }
        }
        let want = cost.rows.min(cost.cols);
        let mut best = f64::INFINITY;
        let mut used = vec![false; cost.cols];
        recurse(cost, 0, &mut used, 0.0, &mut best, 0, want);
        best
    }

    #[test]
    fn two_by_two_hand_case() {
        let cost = CostMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 1.0]);
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost(&cost), 2.0);
    }

    #[test]
    fn one_by_one() {
        let cost = CostMatrix::new(1, 1, vec![42.0]);
        assert_eq!(hungarian(&cost).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn non_finite_cost_rejected() {
        let cost = CostMatrix::new(1, 2, vec![0.0, f64::NAN]);
        match hungarian(&cost) {
            Err(crate::Error::InvalidCost { row: 0, col: 1 }) => {}
            other => panic!("expected InvalidCost, got {:?}", other.map(|a| a.pairs)),
        }
    }

    #[test]
    fn optimal_vs_brute_force_100_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..100 {
            let r = rng.gen_range(1..=6);
            let c = rng.gen_range(1..=6);
            let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let cost = CostMatrix::new(r, c, data);
            let got = hungarian(&cost).unwrap();
            assert_eq!(got.pairs.len(), r.min(c));
            let expect = brute_force_min(&cost);
            let total = got.total_cost(&cost);
            assert!(
                (total - expect).abs() < 1e-9,
                "case {case} ({r}x{c}): got {total}, brute force {expect}"
            );
            // injectivity on both sides
            let mut ps: Vec<_> = got.pairs.iter().map(|&(p, _)| p).collect();
            let mut gs: Vec<_> = got.pairs.iter().map(|&(_, g)| g).collect();
            ps.dedup();
            gs.sort_unstable();
            gs.dedup();
            assert_eq!(ps.len(), got.pairs.len());
            assert_eq!(gs.len(), got.pairs.len());
        }
    }

    #[test]
    fn rectangular_matches_smaller_side() {
        let cost = CostMatrix::new(3, 2, vec![5.0, 1.0, 1.0, 5.0, 9.0, 9.0]);
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn scaling_costs_preserves_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..5.0)).collect();
            let cost = CostMatrix::new(4, 4, data.clone());
            let scaled = CostMatrix::new(4, 4, data.iter().map(|v| v * 7.3).collect());
            assert_eq!(hungarian(&cost).unwrap(), hungarian(&scaled).unwrap());
        }
    }
}
