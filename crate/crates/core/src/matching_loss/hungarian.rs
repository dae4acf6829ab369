use super::MatchError;
use crate::numerics::Matrix;

/// Minimum-cost assignment of every row (ground truth) to a distinct column
/// (prediction), using shortest augmenting paths with row/column potentials.
/// Returns `(prediction, ground truth)` pairs ordered by ground truth.
pub fn hungarian_match(cost: &Matrix) -> Result<Vec<(usize, usize)>, MatchError> {
    let (n, m) = cost.dim();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > m {
        return Err(MatchError::TooManyTargets { targets: n, predictions: m });
    }
    if let Some(((r, c), v)) = cost.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(MatchError::NonFinite { row: r, col: c, value: *v });
    }

    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&j| row_of[j] != 0).map(|j| (j - 1, row_of[j] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    Ok(pairs)
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &Matrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(p, g)| cost[[g, p]]).sum()
}
