//! Exact O(n^3) solution of the assignment problem via shortest augmenting
//! paths with potentials. Costs are integers, so the optimum is exact and
//! safely comparable against factorial brute force in tests.

/// Minimum-cost perfect assignment on a square cost matrix.
/// Returns `assign[row] = column`.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(cost.iter().all(|row| row.len() == n));
    const INF: i64 = i64::MAX / 4;

    // 1-indexed potentials and matching, following the classic formulation.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] != 0 {
            assign[matched_row[j] - 1] = j - 1;
        }
    }
    assign
}

/// Maximum-total-value assignment (negated costs).
pub fn max_value_assignment(value: &[Vec<i64>]) -> Vec<usize> {
    let neg: Vec<Vec<i64>> = value
        .iter()
        .map(|row| row.iter().map(|&x| -x).collect())
        .collect();
    min_cost_assignment(&neg)
}
