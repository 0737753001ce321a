//! Maximum-weight perfect assignment on a square integer matrix.
//!
//! The solver runs the O(n^3) shortest-augmenting-path Hungarian method with
//! row/column potentials. Among all optimal assignments it returns the
//! lexicographically smallest one: complementary slackness confines every
//! optimal assignment to the tight edges of the final potentials, and the
//! lexicographic choice is made greedily inside that tight subgraph, fixing
//! one row at a time and repairing the matching with a single alternating
//! path.

const INF: i64 = i64::MAX / 4;

/// Returns `assign` with `assign[row] = col`, maximizing
/// `sum_row weight[row][assign[row]]`, lexicographically smallest among
/// maximizers.
pub fn max_weight_assignment(weight: &[Vec<i64>]) -> Vec<usize> {
    let n = weight.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(weight.iter().all(|r| r.len() == n), "weight matrix must be square");
    // Minimize cost = -weight, 1-based with a sentinel column 0.
    let cost = |i: usize, j: usize| -weight[i - 1][j - 1];
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let tight: Vec<Vec<bool>> =
        (1..=n).map(|i| (1..=n).map(|j| cost(i, j) - u[i] - v[j] == 0).collect()).collect();
    let mut row_of = vec![0usize; n];
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        row_of[j - 1] = p[j] - 1;
        col_of[p[j] - 1] = j - 1;
    }
    lexicographic_min(&tight, col_of, row_of)
}

/// Greedy lexicographic minimization over perfect matchings of `tight`,
/// starting from the perfect matching (`col_of`, `row_of`).
fn lexicographic_min(tight: &[Vec<bool>], mut col_of: Vec<usize>, mut row_of: Vec<usize>) -> Vec<usize> {
    let n = tight.len();
    let mut col_fixed = vec![false; n];
    for r in 0..n {
        for c in 0..n {
            if col_fixed[c] || !tight[r][c] {
                continue;
            }
            if col_of[r] == c {
                break;
            }
            // Force (r, c): row_of[c] loses its column, and col_of[r] is
            // freed. Look for an alternating path between them that avoids
            // fixed rows (all rows < r), column c and row r.
            let start = row_of[c];
            let goal = col_of[r];
            if let Some(path) = alternating_path(tight, &col_of, &row_of, &col_fixed, r, c, start, goal) {
                // path: sequence of (row, new col) reassignments.
                for &(row, col) in &path {
                    col_of[row] = col;
                    row_of[col] = row;
                }
                col_of[r] = c;
                row_of[c] = r;
                break;
            }
        }
        col_fixed[col_of[r]] = true;
    }
    col_of
}

#[allow(clippy::too_many_arguments)]
fn alternating_path(
    tight: &[Vec<bool>],
    col_of: &[usize],
    row_of: &[usize],
    col_fixed: &[bool],
    forced_row: usize,
    forced_col: usize,
    start: usize,
    goal: usize,
) -> Option<Vec<(usize, usize)>> {
    let n = tight.len();
    // BFS over rows; parent[col] = row that reached it.
    let mut parent_row = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([start]);
    let mut seen_row = vec![false; n];
    seen_row[start] = true;
    while let Some(row) = queue.pop_front() {
        for col in 0..n {
            if col == forced_col || col_fixed[col] || !tight[row][col] || parent_row[col] != usize::MAX {
                continue;
            }
            if col_of[row] == col {
                continue;
            }
            parent_row[col] = row;
            if col == goal {
                let mut path = Vec::new();
                let mut c = col;
                loop {
                    let r = parent_row[c];
                    path.push((r, c));
                    if r == start {
                        return Some(path);
                    }
                    c = col_of[r];
                }
            }
            let next = row_of[col];
            if next != forced_row && !seen_row[next] {
                seen_row[next] = true;
                queue.push_back(next);
            }
        }
    }
    None
}
