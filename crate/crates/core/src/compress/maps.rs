use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CompressError, Strategy, SupportNorm};
use crate::linalg::{pseudoinverse, qr_thin, sym_eig_desc, Matrix};
use crate::ot::{cost_matrix, rescale_rows, sinkhorn, uniform, ActivationMatrix, OtError, SinkhornConfig};

/// Sinkhorn outcome behind a transport-based map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    /// Regularization actually used (doubled once on a retry).
    pub lambda: f64,
    pub iterations: usize,
    pub marginal_residual: f64,
    pub log_domain: bool,
    pub retried: bool,
}

/// Knobs shared by the transport-based builders.
#[derive(Debug, Clone, PartialEq)]
pub struct MapOptions {
    pub lambda: f64,
    pub support_norm: SupportNorm,
    /// Mean-center each neuron before computing ground distances.
    pub center: bool,
    pub sinkhorn: SinkhornConfig,
}

impl MapOptions {
    pub fn new(lambda: f64, support_norm: SupportNorm) -> Self {
        Self {
            lambda,
            support_norm,
            center: false,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

/// Width-reduction map for one junction.
///
/// `m` is `d_orig × d_new` with orthonormal columns; `m_inv` is
/// `d_new × d_orig`. A token row `x` is compressed as `x · m` and read back as
/// `x · m · m_inv`.
#[derive(Debug, Clone, PartialEq)]
pub struct JunctionMaps {
    pub m: Matrix,
    pub m_inv: Matrix,
    /// Retained neurons, when the strategy selects a support.
    pub support: Option<Vec<usize>>,
    pub solver: Option<SolverStats>,
}

impl JunctionMaps {
    pub fn identity(d: usize) -> Self {
        Self {
            m: Matrix::identity(d),
            m_inv: Matrix::identity(d),
            support: None,
            solver: None,
        }
    }

    /// QR-splits a row-stochastic transport map `T` (`d_orig × d_new`):
    /// `M = Q`, `M_inv = R · T⁺`.
    pub fn from_transport(t: &Matrix) -> Result<Self, CompressError> {
        let (m, r) = qr_thin(t)?;
        let m_inv = r.matmul(&pseudoinverse(t)?);
        Ok(Self {
            m,
            m_inv,
            support: None,
            solver: None,
        })
    }

    pub fn d_orig(&self) -> usize {
        self.m.rows()
    }

    pub fn d_new(&self) -> usize {
        self.m.cols()
    }

    /// `‖X − X·M·M_inv‖_F / ‖X‖_F` over token rows.
    pub fn reconstruction_error(&self, acts: &ActivationMatrix) -> f64 {
        let x = acts.values();
        let norm = x.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        // In neuron-major layout the round trip is (M·M_inv)ᵀ · X.
        let p = self.m.matmul(&self.m_inv);
        p.t_matmul(x).sub(x).frobenius_norm() / norm
    }
}

/// Indices of the `d_new` neurons with the largest average activation
/// magnitude (root-mean-square for ℓ2, mean absolute value for ℓ1), in
/// ascending index order. Ties go to the lower index.
pub fn select_support(acts: &ActivationMatrix, d_new: usize, norm: SupportNorm) -> Vec<usize> {
    let n = acts.neurons();
    let d_new = d_new.min(n);
    let t = acts.tokens() as f64;
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let row = acts.neuron(i);
            match norm {
                SupportNorm::L2 => (row.iter().map(|v| v * v).sum::<f64>() / t).sqrt(),
                SupportNorm::L1 => row.iter().map(|v| v.abs()).sum::<f64>() / t,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..d_new].to_vec();
    keep.sort_unstable();
    keep
}

/// Uncentered second moment `(1/t) · X · Xᵀ` of neuron rows.
pub fn second_moment(acts: &ActivationMatrix) -> Matrix {
    let n = acts.neurons();
    let t = acts.tokens() as f64;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = acts.neuron(i);
            (0..n)
                .map(|j| xi.iter().zip(acts.neuron(j)).map(|(a, b)| a * b).sum::<f64>() / t)
                .collect()
        })
        .collect();
    let mut s = Matrix::from_rows(&rows);
    // Exact symmetry; the two triangles are summed in the same order anyway.
    for i in 0..n {
        for j in 0..i {
            s[(i, j)] = s[(j, i)];
        }
    }
    s
}

fn check_width(acts: &ActivationMatrix, d_new: usize) -> Result<(), CompressError> {
    if d_new == 0 || d_new > acts.neurons() {
        return Err(CompressError::InvalidSpec(format!(
            "target width {d_new} must be in 1..={}",
            acts.neurons()
        )));
    }
    Ok(())
}

/// Row-rescaled transport plan from `acts` onto `support`; retries once at
/// `2λ` if the solver does not converge.
fn transport(acts: &ActivationMatrix, support: &[usize], opts: &MapOptions) -> Result<(Matrix, SolverStats), CompressError> {
    let cost = if opts.center {
        cost_matrix(&acts.centered(), support)?
    } else {
        cost_matrix(acts, support)?
    };
    let (lambda, config) = (opts.lambda, &opts.sinkhorn);
    let a = uniform(acts.neurons());
    let b = uniform(support.len());
    let (plan, retried) = match sinkhorn(&cost, &a, &b, lambda, config) {
        Ok(p) => (p, false),
        Err(OtError::NotConverged { .. }) => (sinkhorn(&cost, &a, &b, 2.0 * lambda, config)?, true),
        Err(e) => return Err(e.into()),
    };
    let stats = SolverStats {
        lambda: plan.lambda,
        iterations: plan.iterations,
        marginal_residual: plan.marginal_residual,
        log_domain: plan.log_domain,
        retried,
    };
    Ok((rescale_rows(&plan), stats))
}

pub fn build_dotresize_maps(acts: &ActivationMatrix, d_new: usize, opts: &MapOptions) -> Result<JunctionMaps, CompressError> {
    check_width(acts, d_new)?;
    let support = select_support(acts, d_new, opts.support_norm);
    let (t, stats) = transport(acts, &support, opts)?;
    Ok(JunctionMaps {
        support: Some(support),
        solver: Some(stats),
        ..JunctionMaps::from_transport(&t)?
    })
}

/// Selection matrix of the retained neurons; `M_inv = Mᵀ`.
pub fn build_prune_maps(
    acts: &ActivationMatrix,
    d_new: usize,
    support_norm: SupportNorm,
) -> Result<JunctionMaps, CompressError> {
    check_width(acts, d_new)?;
    let support = select_support(acts, d_new, support_norm);
    let mut m = Matrix::zeros(acts.neurons(), d_new);
    for (j, &i) in support.iter().enumerate() {
        m[(i, j)] = 1.0;
    }
    Ok(JunctionMaps {
        m_inv: m.transpose(),
        m,
        support: Some(support),
        solver: None,
    })
}

/// Leading eigenvectors of the uncentered second moment; `M_inv = Mᵀ`.
pub fn build_pca_maps(acts: &ActivationMatrix, d_new: usize) -> Result<JunctionMaps, CompressError> {
    check_width(acts, d_new)?;
    let (_, v) = sym_eig_desc(&second_moment(acts))?;
    let m = v.leading_columns(d_new);
    Ok(JunctionMaps {
        m_inv: m.transpose(),
        m,
        support: None,
        solver: None,
    })
}

/// Transport plan computed on activations rotated into the full principal
/// basis `V`; the total map is `V · T`.
pub fn build_pca_dotresize_maps(
    acts: &ActivationMatrix,
    d_new: usize,
    opts: &MapOptions,
) -> Result<JunctionMaps, CompressError> {
    check_width(acts, d_new)?;
    let (_, v) = sym_eig_desc(&second_moment(acts))?;
    let rotated = ActivationMatrix::new(v.t_matmul(acts.values()))?;
    let support = select_support(&rotated, d_new, opts.support_norm);
    let (t, stats) = transport(&rotated, &support, opts)?;
    Ok(JunctionMaps {
        support: Some(support),
        solver: Some(stats),
        ..JunctionMaps::from_transport(&v.matmul(&t))?
    })
}

/// Dispatches on `strategy`.
pub fn build_maps(
    strategy: Strategy,
    acts: &ActivationMatrix,
    d_new: usize,
    opts: &MapOptions,
) -> Result<JunctionMaps, CompressError> {
    match strategy {
        Strategy::Dotresize => build_dotresize_maps(acts, d_new, opts),
        Strategy::MagnitudePrune => build_prune_maps(acts, d_new, opts.support_norm),
        Strategy::PcaSlice => build_pca_maps(acts, d_new),
        Strategy::PcaDotresize => build_pca_dotresize_maps(acts, d_new, opts),
    }
}
