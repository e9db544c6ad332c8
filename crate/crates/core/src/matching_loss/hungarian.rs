//! Minimum-cost bipartite assignment (shortest augmenting paths with
//! potentials, O(M²N)).

use super::MatchError;
use crate::numerics::Tensor;

/// One-to-one matching of ground-truth objects to predictions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(prediction, ground truth)` pairs sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub num_predictions: usize,
}

impl Assignment {
    /// Ground-truth index matched to each prediction, if any.
    pub fn by_prediction(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_predictions];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }

    pub fn total(&self, cost: &Tensor<f64>) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost.at(&[p, g])).sum()
    }
}

/// Assigns every column (ground truth) of the `[N, M]` cost matrix to a
/// distinct row (prediction), minimizing the summed cost.
///
/// Ties are broken deterministically: while growing each augmenting path
/// the lowest-indexed prediction among equal candidates is taken.
pub fn hungarian(cost: &Tensor<f64>) -> Result<Assignment, MatchError> {
    if cost.ndim() != 2 {
        return Err(MatchError::Shape(format!("cost must be [N, M], got {:?}", cost.shape())));
    }
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    if !cost.all_finite() {
        return Err(MatchError::NonFinite);
    }
    if m > n {
        return Err(MatchError::TooFewPredictions { predictions: n, targets: m });
    }
    if m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            num_predictions: n,
        });
    }
    // Rows of the working problem are ground truths (1-based), columns are
    // predictions; column 0 is the virtual start.
    let a = |gt: usize, pred: usize| cost.at(&[pred - 1, gt - 1]);
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=m {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
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
    let mut pairs: Vec<_> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (j - 1, owner[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, g)| g);
    Ok(Assignment {
        pairs,
        num_predictions: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> Tensor<f64> {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(&[rows.len(), rows[0].len()], data).unwrap()
    }

    #[test]
    fn one_by_one() {
        let a = hungarian(&matrix(&[&[4.0]])).unwrap();
        assert_eq!(a.pairs, [(0, 0)]);
    }

    #[test]
    fn two_by_two() {
        let c = matrix(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, [(0, 0), (1, 1)]);
        assert_eq!(a.total(&c), 2.0);
    }

    #[test]
    fn rectangular_picks_best_rows() {
        let c = matrix(&[&[5.0], &[1.0], &[3.0]]);
        assert_eq!(hungarian(&c).unwrap().pairs, [(1, 0)]);
        let c = matrix(&[&[9.0, 9.0], &[1.0, 2.0], &[1.0, 8.0]]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, [(2, 0), (1, 1)]);
        assert_eq!(a.by_prediction(), [None, Some(1), Some(0)]);
    }

    #[test]
    fn ties_prefer_lowest_prediction() {
        let c = matrix(&[&[1.0], &[1.0], &[1.0]]);
        assert_eq!(hungarian(&c).unwrap().pairs, [(0, 0)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            hungarian(&matrix(&[&[1.0, f64::NAN]])),
            Err(MatchError::NonFinite)
        ));
        assert!(matches!(
            hungarian(&matrix(&[&[1.0, 2.0]])),
            Err(MatchError::TooFewPredictions { .. })
        ));
        let empty = Tensor::new(&[3, 0], vec![]).unwrap();
        assert!(hungarian(&empty).unwrap().pairs.is_empty());
    }
}
