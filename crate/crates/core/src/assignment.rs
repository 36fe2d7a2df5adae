//! Exact solver for the square linear assignment problem.
//!
//! Classic O(n^3) shortest-augmenting-path formulation with dual potentials.
//! The public entry point maximizes total score, which is what similarity
//! matching wants.

/// Row-to-column assignment maximizing the total of `score(row, col)`.
///
/// `score` must return finite values.
pub fn max_score_assignment(n: usize, score: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    min_cost_assignment(n, |i, j| -score(i, j))
}

/// Row-to-column assignment minimizing total cost.
pub fn min_cost_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    const NONE: usize = usize::MAX;
    let virtual_col = n;
    let mut u = vec![0.0f64; n]; // row potentials
    let mut v = vec![0.0f64; n + 1]; // column potentials (incl. virtual)
    let mut owner = vec![NONE; n + 1]; // owner[j]: row matched to column j

    for row in 0..n {
        owner[virtual_col] = row;
        let mut j0 = virtual_col;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prev = vec![virtual_col; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = virtual_col;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0, j) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    prev[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            debug_assert!(delta.is_finite(), "assignment requires finite costs");
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == NONE {
                break;
            }
        }
        // augment along the found path
        loop {
            let j1 = prev[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == virtual_col {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 0..n {
        row_to_col[owner[j]] = j;
    }
    row_to_col
}
