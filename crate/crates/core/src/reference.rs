//! Naive reference implementations used to cross-check the fast paths.
//!
//! Nothing here shares code with the solver: linear systems are solved with
//! plain Gaussian elimination on nested `Vec`s, convolution patches are read
//! with an explicit sliding window, and greedy selection re-solves every
//! candidate from scratch.

/// Solves `A·X = B` by Gaussian elimination with partial pivoting.
///
/// Panics on an exactly singular `A`.
pub fn gauss_solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b.first().map_or(0, Vec::len);
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut b: Vec<Vec<f64>> = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        assert!(a[pivot][col] != 0.0, "singular system");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            for k in 0..m {
                b[row][k] -= factor * b[col][k];
            }
        }
    }
    let mut x = vec![vec![0.0; m]; n];
    for row in (0..n).rev() {
        for k in 0..m {
            let mut acc = b[row][k];
            for j in row + 1..n {
                acc -= a[row][j] * x[j][k];
            }
            x[row][k] = acc / a[row][row];
        }
    }
    x
}

/// `min_W ½Tr(WᵀHW) − Tr(GᵀW)` restricted to `rows`, solved by elimination.
/// Returns the optimal value; empty `rows` gives 0.
pub fn restricted_objective(h: &[Vec<f64>], g: &[Vec<f64>], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hs: Vec<Vec<f64>> = rows.iter().map(|&i| rows.iter().map(|&j| h[i][j]).collect()).collect();
    let gs: Vec<Vec<f64>> = rows.iter().map(|&i| g[i].clone()).collect();
    let w = gauss_solve(&hs, &gs);
    let mut obj = 0.0;
    for (gr, wr) in gs.iter().zip(&w) {
        for (a, b) in gr.iter().zip(wr) {
            obj -= 0.5 * a * b;
        }
    }
    obj
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= n {
        rec(0, n, k, &mut Vec::new(), &mut out);
    }
    out
}

/// Forward greedy: starting from nothing pruned, repeatedly prune the group
/// whose removal raises the objective least (ties to the lower index).
/// `groups[j]` lists the rows of group `j`. Returns the pruned groups, in the
/// order chosen, and the final objective.
pub fn forward_greedy(
    h: &[Vec<f64>],
    g: &[Vec<f64>],
    groups: &[Vec<usize>],
    prune_count: usize,
) -> (Vec<usize>, f64) {
    let mut pruned: Vec<usize> = Vec::new();
    let mut current = objective_after_pruning(h, g, groups, &pruned);
    for _ in 0..prune_count {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..groups.len() {
            if pruned.contains(&j) {
                continue;
            }
            let mut trial = pruned.clone();
            trial.push(j);
            let f = objective_after_pruning(h, g, groups, &trial);
            if best.is_none_or(|(_, bf)| f < bf) {
                best = Some((j, f));
            }
        }
        let (j, f) = best.expect("prune_count exceeds group count");
        pruned.push(j);
        current = f;
    }
    (pruned, current)
}

fn objective_after_pruning(h: &[Vec<f64>], g: &[Vec<f64>], groups: &[Vec<usize>], pruned: &[usize]) -> f64 {
    let mut rows: Vec<usize> = groups
        .iter()
        .enumerate()
        .filter(|(j, _)| !pruned.contains(j))
        .flat_map(|(_, rows)| rows.iter().copied())
        .collect();
    rows.sort_unstable();
    restricted_objective(h, g, &rows)
}

/// Sliding-window patches of one channel-major feature map
/// (`channels × height × width`), zero padded. Each patch lists all
/// `k_h·k_w` taps of channel 0, then channel 1, and so on. Patches are
/// ordered by output row, then output column.
#[allow(clippy::too_many_arguments)]
pub fn sliding_window_patches(
    data: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    padding: usize,
) -> Vec<Vec<f64>> {
    let out_h = (height + 2 * padding - k_h) / stride + 1;
    let out_w = (width + 2 * padding - k_w) / stride + 1;
    let mut patches = Vec::new();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut patch = Vec::with_capacity(channels * k_h * k_w);
            for c in 0..channels {
                for dy in 0..k_h {
                    for dx in 0..k_w {
                        let y = (oy * stride + dy) as isize - padding as isize;
                        let x = (ox * stride + dx) as isize - padding as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width;
                        patch.push(if inside {
                            data[c * height * width + y as usize * width + x as usize]
                        } else {
                            0.0
                        });
                    }
                }
            }
            patches.push(patch);
        }
    }
    patches
}
