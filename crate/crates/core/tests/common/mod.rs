//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use dotresize::linalg::Matrix;
use dotresize::model::Model;
use dotresize::ot::objective;
use rand::Rng;

/// Inverse by Gauss–Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(m: &Matrix) -> Option<Matrix> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = m.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    Some(Matrix::from_fn(n, n, |i, j| a[i][n + j]))
}

/// Random strictly positive histogram summing to one.
pub fn random_histogram(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut h: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // Push the rounding error into the last entry so the sum is 1 to the ulp.
    let rest: f64 = h[..n - 1].iter().sum();
    h[n - 1] = 1.0 - rest;
    h
}

/// Minimizes the entropic objective over all couplings of `a` and `b`.
///
/// The free entries are the top-left `(n-1)×(k-1)` block; the last row and
/// column are fixed by the marginals. Coarse grid, then a shrinking
/// coordinate pattern search from the best grid point.
pub fn brute_force_min(cost: &Matrix, a: &[f64], b: &[f64], lambda: f64) -> f64 {
    let (n, k) = cost.shape();
    let free = (n - 1) * (k - 1);
    let complete = |x: &[f64]| -> Option<Matrix> {
        let mut t = Matrix::zeros(n, k);
        for i in 0..n - 1 {
            for j in 0..k - 1 {
                t[(i, j)] = x[i * (k - 1) + j];
            }
        }
        for i in 0..n - 1 {
            let s: f64 = (0..k - 1).map(|j| t[(i, j)]).sum();
            t[(i, k - 1)] = a[i] - s;
        }
        for j in 0..k {
            let s: f64 = (0..n - 1).map(|i| t[(i, j)]).sum();
            t[(n - 1, j)] = b[j] - s;
        }
        t.as_slice().iter().all(|&v| v >= 0.0).then_some(t)
    };
    let eval = |x: &[f64]| complete(x).map_or(f64::INFINITY, |t| objective(&t, cost, lambda));

    if free == 0 {
        return eval(&[]);
    }
    let steps = match free {
        1 => 400,
        2 => 60,
        _ => 12,
    };
    let upper: Vec<f64> = (0..free).map(|p| a[p / (k - 1)].min(b[p % (k - 1)])).collect();
    let mut best_x = vec![0.0; free];
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; free];
    loop {
        let x: Vec<f64> = idx
            .iter()
            .zip(&upper)
            .map(|(&i, &u)| u * i as f64 / steps as f64)
            .collect();
        let v = eval(&x);
        if v < best {
            best = v;
            best_x = x;
        }
        let mut p = 0;
        while p < free {
            idx[p] += 1;
            if idx[p] <= steps {
                break;
            }
            idx[p] = 0;
            p += 1;
        }
        if p == free {
            break;
        }
    }

    let mut h = upper.iter().cloned().fold(0.0, f64::max) / steps as f64;
    while h > 1e-13 {
        let mut improved = false;
        for p in 0..free {
            for dir in [1.0, -1.0] {
                let mut x = best_x.clone();
                x[p] += dir * h;
                let v = eval(&x);
                if v < best {
                    best = v;
                    best_x = x;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    best
}

/// Builds the pruned model by indexing the folded weights with the recorded
/// supports, without going through the map algebra.
pub fn direct_prune(folded: &Model, supports: &[Vec<usize>]) -> Model {
    let mut out = folded.clone();
    let sel = |from: &[usize], to: &[usize]| {
        Matrix::from_fn(from.len(), to.len(), |r, c| if from[r] == to[c] { 1.0 } else { 0.0 })
    };
    out.embed = folded.embed.select_columns(&supports[0]);
    for (i, (layer, src)) in out.layers.iter_mut().zip(&folded.layers).enumerate() {
        let (prev, attn, ffn) = (&supports[2 * i], &supports[2 * i + 1], &supports[2 * i + 2]);
        layer.wq = src.wq.select_rows(prev);
        layer.wk = src.wk.select_rows(prev);
        layer.wv = src.wv.select_rows(prev);
        layer.wo = src.wo.select_columns(attn);
        layer.adapter_attn = Some(sel(prev, attn));
        layer.wup = src.wup.select_rows(attn);
        layer.wgate = src.wgate.select_rows(attn);
        layer.wdown = src.wdown.select_columns(ffn);
        layer.adapter_ffn = Some(sel(attn, ffn));
    }
    out.head = folded.head.select_rows(supports.last().unwrap());
    out.config.residual_width = Some(supports[0].len());
    out
}
