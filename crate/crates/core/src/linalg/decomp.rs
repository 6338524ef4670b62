use nalgebra::{DMatrix, SymmetricEigen, SVD};

use super::{LinalgError, Matrix};

/// Relative singular-value cutoff used by [`pseudoinverse`].
pub const PINV_RCOND: f64 = 1e-12;

/// Relative threshold on `|R_ii|` below which [`qr_thin`] reports rank deficiency.
pub const QR_RANK_TOL: f64 = 1e-12;

/// Asymmetry tolerance accepted by [`sym_eig_desc`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Thin Householder QR of a tall matrix.
///
/// Returns `(Q, R)` with `Q` of shape `m × n` having orthonormal columns and
/// `R` upper triangular `n × n` with a nonnegative diagonal. Fails with
/// [`LinalgError::RankDeficient`] if the input does not have full column rank.
pub fn qr_thin(t: &Matrix) -> Result<(Matrix, Matrix), LinalgError> {
    let (m, n) = t.shape();
    if n > m {
        return Err(LinalgError::WideMatrix { rows: m, cols: n });
    }
    if !t.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let max_col_norm = (0..n)
        .map(|j| (0..m).map(|i| t[(i, j)].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);

    // Column-major working copy so each Householder reflection touches contiguous memory.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| t.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);

    for k in 0..n {
        let x = &a[k][k..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = x.to_vec();
        if norm > 0.0 {
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vnorm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
            if vnorm > 0.0 {
                v.iter_mut().for_each(|e| *e /= vnorm);
            }
        } else {
            v.iter_mut().for_each(|e| *e = 0.0);
        }
        for col in a.iter_mut().skip(k) {
            let tail = &mut col[k..];
            let dot: f64 = v.iter().zip(tail.iter()).map(|(p, q)| p * q).sum();
            if dot != 0.0 {
                for (q, p) in tail.iter_mut().zip(&v) {
                    *q -= 2.0 * dot * p;
                }
            }
        }
        reflectors.push(v);
    }

    let mut r = Matrix::zeros(n, n);
    for (j, col) in a.iter().enumerate() {
        for i in 0..=j {
            r[(i, j)] = col[i];
        }
    }

    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of the identity.
    let mut q_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, v) in reflectors.iter().enumerate().rev() {
        for col in q_cols.iter_mut() {
            let tail = &mut col[k..];
            let dot: f64 = v.iter().zip(tail.iter()).map(|(p, q)| p * q).sum();
            if dot != 0.0 {
                for (q, p) in tail.iter_mut().zip(v) {
                    *q -= 2.0 * dot * p;
                }
            }
        }
    }

    for i in 0..n {
        if r[(i, i)] < 0.0 {
            for j in i..n {
                r[(i, j)] = -r[(i, j)];
            }
            q_cols[i].iter_mut().for_each(|e| *e = -*e);
        }
    }

    let threshold = QR_RANK_TOL * max_col_norm;
    for i in 0..n {
        if r[(i, i)] <= threshold {
            return Err(LinalgError::RankDeficient {
                index: i,
                diagonal: r[(i, i)],
                threshold,
            });
        }
    }

    let q = Matrix::from_fn(m, n, |i, j| q_cols[j][i]);
    Ok((q, r))
}

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Moore–Penrose pseudoinverse via SVD, truncating singular values below
/// `PINV_RCOND · σ_max`.
pub fn pseudoinverse(m: &Matrix) -> Result<Matrix, LinalgError> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let (rows, cols) = m.shape();
    let svd = SVD::new(to_nalgebra(m), true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = PINV_RCOND * sigma_max;

    // M⁺ = V Σ⁺ Uᵀ, accumulated one singular triplet at a time.
    let mut out = Matrix::zeros(cols, rows);
    for (r, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..cols {
            let vi = v_t[(r, i)] * inv;
            if vi == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o += vi * u[(j, r)];
            }
        }
    }
    Ok(out)
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order.
///
/// Each eigenvector column is signed so that its largest-magnitude entry is
/// positive, which makes the output deterministic.
pub fn sym_eig_desc(s: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    let (n, c) = s.shape();
    if n != c {
        return Err(LinalgError::NotSquare { rows: n, cols: c });
    }
    if !s.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let scale = s.max_abs().max(1.0);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    if max_asym > SYMMETRY_TOL * scale {
        return Err(LinalgError::NotSymmetric { max_asymmetry: max_asym });
    }
    let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let eig = SymmetricEigen::new(to_nalgebra(&sym));

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });

    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, src)]).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() + 1e-14 { (i, *v) } else { best })
            .0;
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in col.into_iter().enumerate() {
            vectors[(i, dst)] = sign * v;
        }
    }
    Ok((values, vectors))
}

/// Unweighted RMS normalization: `x / sqrt(mean(x²) + eps)`.
pub fn rmsnorm(x: &[f64], eps: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    rmsnorm_in_place(&mut out, eps);
    out
}

pub fn rmsnorm_in_place(x: &mut [f64], eps: f64) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom == 0.0 {
        return;
    }
    let inv = 1.0 / denom;
    x.iter_mut().for_each(|v| *v *= inv);
}

/// Applies [`rmsnorm`] to each row.
pub fn rmsnorm_rows(x: &Matrix, eps: f64) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        rmsnorm_in_place(out.row_mut(i), eps);
    }
    out
}
