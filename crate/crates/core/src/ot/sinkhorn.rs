use serde::{Deserialize, Serialize};

use super::OtError;
use crate::linalg::Matrix;

/// Which domain the scaling iterations run in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkhornMode {
    /// Log domain when `λ < 0.05 · median(C)`, or when linear scaling
    /// underflows or fails to converge.
    #[default]
    Auto,
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Maximum marginal violation (max-norm) accepted as converged.
    pub tol: f64,
    pub max_iter: usize,
    pub mode: SinkhornMode,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 10_000,
            mode: SinkhornMode::Auto,
        }
    }
}

/// Log-domain kicks in below this fraction of the median cost.
pub const LOG_DOMAIN_RATIO: f64 = 0.05;

const MARGINAL_SUM_TOL: f64 = 1e-12;

/// Scaling iterations between Newton polishes of an unconverged solve.
const POLISH_AFTER: usize = 256;
/// Newton steps per polish.
const POLISH_STEPS: usize = 128;

/// Entropy-regularized coupling between two discrete distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub lambda: f64,
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub iterations: usize,
    /// Max-norm marginal violation at exit.
    pub marginal_residual: f64,
    pub log_domain: bool,
}

impl TransportPlan {
    pub fn entropy(&self) -> f64 {
        entropy(&self.plan)
    }

    /// `⟨T, C⟩ − λ H(T)`.
    pub fn objective(&self, cost: &Matrix) -> f64 {
        objective(&self.plan, cost, self.lambda)
    }
}

/// `H(T) = −Σ T_ij (log T_ij − 1)` with `0 log 0 = 0`.
pub fn entropy(plan: &Matrix) -> f64 {
    -plan
        .as_slice()
        .iter()
        .map(|&t| if t > 0.0 { t * (t.ln() - 1.0) } else { 0.0 })
        .sum::<f64>()
}

pub fn objective(plan: &Matrix, cost: &Matrix, lambda: f64) -> f64 {
    let transport: f64 = plan
        .as_slice()
        .iter()
        .zip(cost.as_slice())
        .map(|(t, c)| t * c)
        .sum();
    transport - lambda * entropy(plan)
}

/// Uniform histogram of length `n`.
pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn validate_marginal(name: &str, m: &[f64], len: usize) -> Result<(), OtError> {
    if m.len() != len {
        return Err(OtError::InvalidMarginal(format!(
            "{name} has length {}, expected {len}",
            m.len()
        )));
    }
    if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(OtError::InvalidMarginal(format!("{name} must be nonnegative and finite")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > MARGINAL_SUM_TOL {
        return Err(OtError::InvalidMarginal(format!("{name} sums to {total}, expected 1")));
    }
    Ok(())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn max_violation(values: &[f64], expected: &[f64]) -> f64 {
    values
        .iter()
        .zip(expected)
        .fold(0.0, |m, (v, e)| m.max((v - e).abs()))
}

/// Solves `argmin_T ⟨T, C⟩ − λ H(T)` subject to `T 1 = a`, `Tᵀ 1 = b`.
///
/// Convergence is declared when both marginals are within `config.tol`
/// (max-norm) of their targets.
pub fn sinkhorn(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    lambda: f64,
    config: &SinkhornConfig,
) -> Result<TransportPlan, OtError> {
    let (n, k) = cost.shape();
    if n == 0 || k == 0 {
        return Err(OtError::EmptyActivations);
    }
    if !cost.is_finite() {
        return Err(OtError::NonFinite);
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(OtError::InvalidLambda(lambda));
    }
    validate_marginal("source marginal", a, n)?;
    validate_marginal("target marginal", b, k)?;

    let use_log = match config.mode {
        SinkhornMode::Log => true,
        SinkhornMode::Linear => false,
        SinkhornMode::Auto => lambda < LOG_DOMAIN_RATIO * median(cost.as_slice()),
    };

    let (plan, iterations, residual, log_domain) = if use_log {
        let (p, it, r) = log_domain_solve(cost, a, b, lambda, config)?;
        (p, it, r, true)
    } else {
        match linear_solve(cost, a, b, lambda, config) {
            Ok((p, it, r)) => (p, it, r, false),
            // Near-degenerate plans stall plain scaling; the log solver polishes.
            Err(OtError::NumericalUnderflow | OtError::NotConverged { .. }) if config.mode == SinkhornMode::Auto => {
                let (p, it, r) = log_domain_solve(cost, a, b, lambda, config)?;
                (p, it, r, true)
            }
            Err(e) => return Err(e),
        }
    };

    Ok(TransportPlan {
        plan,
        lambda,
        source: a.to_vec(),
        target: b.to_vec(),
        iterations,
        marginal_residual: residual,
        log_domain,
    })
}

fn linear_solve(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    lambda: f64,
    config: &SinkhornConfig,
) -> Result<(Matrix, usize, f64), OtError> {
    let (n, k) = cost.shape();
    let kernel = cost.map(|c| (-c / lambda).exp());
    let dead_row = (0..n).any(|i| kernel.row(i).iter().all(|&v| v == 0.0));
    let dead_col = kernel.col_sums().contains(&0.0);
    if dead_row || dead_col {
        return Err(OtError::NumericalUnderflow);
    }

    let kernel_t = kernel.transpose();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; k];
    let mut iterations = 0;
    while iterations < config.max_iter {
        // K v
        let kv: Vec<f64> = (0..n)
            .map(|i| kernel.row(i).iter().zip(&v).map(|(x, y)| x * y).sum())
            .collect();
        if iterations > 0 {
            let rows: Vec<f64> = u.iter().zip(&kv).map(|(x, y)| x * y).collect();
            if max_violation(&rows, a) <= config.tol {
                break;
            }
        }
        for i in 0..n {
            u[i] = a[i] / kv[i];
        }
        let ktu: Vec<f64> = (0..k)
            .map(|j| kernel_t.row(j).iter().zip(&u).map(|(x, y)| x * y).sum())
            .collect();
        for j in 0..k {
            v[j] = b[j] / ktu[j];
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(OtError::NumericalUnderflow);
        }
        iterations += 1;
        if k > 1 && iterations % POLISH_AFTER == 0 && iterations < config.max_iter {
            let mut f: Vec<f64> = u.iter().map(|x| lambda * x.ln()).collect();
            let mut g: Vec<f64> = v.iter().map(|x| lambda * x.ln()).collect();
            let budget = POLISH_STEPS.min(config.max_iter - iterations);
            let steps = newton_polish(cost, a, b, lambda, &mut f, &mut g, budget, config.tol);
            let nu: Vec<f64> = f.iter().map(|x| (x / lambda).exp()).collect();
            let nv: Vec<f64> = g.iter().map(|x| (x / lambda).exp()).collect();
            // Keep the scaling form only while it is representable.
            if nu.iter().chain(&nv).all(|x| x.is_finite() && *x > 0.0) {
                u = nu;
                v = nv;
            }
            iterations += steps;
        }
    }

    let plan = Matrix::from_fn(n, k, |i, j| u[i] * kernel[(i, j)] * v[j]);
    let residual = max_violation(&plan.row_sums(), a).max(max_violation(&plan.col_sums(), b));
    if residual > config.tol {
        return Err(OtError::NotConverged {
            residual,
            iterations,
        });
    }
    Ok((plan, iterations, residual))
}

#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn plan_from_potentials(cost: &Matrix, f: &[f64], g: &[f64], lambda: f64) -> Matrix {
    Matrix::from_fn(f.len(), g.len(), |i, j| ((f[i] + g[j] - cost[(i, j)]) / lambda).exp())
}

fn plan_residual(plan: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    max_violation(&plan.row_sums(), a).max(max_violation(&plan.col_sums(), b))
}

/// `⟨f, a⟩ + ⟨g, b⟩ − λ Σ T`, the concave dual maximized by the solver.
fn dual_objective(plan: &Matrix, f: &[f64], g: &[f64], a: &[f64], b: &[f64], lambda: f64) -> f64 {
    let fa: f64 = f.iter().zip(a).map(|(x, y)| x * y).sum();
    let gb: f64 = g.iter().zip(b).map(|(x, y)| x * y).sum();
    fa + gb - lambda * plan.as_slice().iter().sum::<f64>()
}

/// Newton iterations on the dual potentials at fixed `λ`.
///
/// Linearizing the marginals of `T = exp((f ⊕ g − C)/λ)` in `(δf, δg)/λ`
/// gives the system `[[diag(T1), T], [Tᵀ, diag(Tᵀ1)]] · x = (a − T1, b − Tᵀ1)`,
/// singular along `(1, −1)`; the last `g` coordinate is pinned to remove it.
/// Each step is backtracked until the marginal violation decreases. Returns
/// the number of steps taken.
fn newton_polish(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    lambda: f64,
    f: &mut [f64],
    g: &mut [f64],
    max_steps: usize,
    tol: f64,
) -> usize {
    use nalgebra::{DMatrix, DVector};
    const MAX_STEP: f64 = 64.0;

    let (n, k) = cost.shape();
    let dim = n + k - 1;
    let mut plan = plan_from_potentials(cost, f, g, lambda);
    let mut residual = plan_residual(&plan, a, b);
    let mut steps = 0;
    while steps < max_steps && residual > tol {
        let rows = plan.row_sums();
        let cols = plan.col_sums();
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..n {
            h[(i, i)] = rows[i];
            rhs[i] = a[i] - rows[i];
            for j in 0..k - 1 {
                h[(i, n + j)] = plan[(i, j)];
                h[(n + j, i)] = plan[(i, j)];
            }
        }
        for j in 0..k - 1 {
            h[(n + j, n + j)] = cols[j];
            rhs[n + j] = b[j] - cols[j];
        }
        // A small ridge keeps the system definite when parts of the plan
        // underflow and the coupling graph falls apart.
        let ridge = 1e-12 * (0..dim).map(|d| h[(d, d)]).fold(0.0, f64::max);
        for d in 0..dim {
            h[(d, d)] += ridge;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match h.svd(true, true).solve(&rhs, 1e-14) {
                Ok(x) => x,
                Err(_) => break,
            },
        };
        if step.iter().any(|v| !v.is_finite()) {
            break;
        }
        steps += 1;
        // Directions of near-zero curvature produce huge steps; cap the
        // change of any potential at MAX_STEP multiples of λ.
        let largest = step.amax();
        let mut t = if largest > MAX_STEP { MAX_STEP / largest } else { 1.0 };

        let dual_now = dual_objective(&plan, f, g, a, b, lambda);
        let mut accepted = false;
        while t > 1e-10 {
            let nf: Vec<f64> = (0..n).map(|i| f[i] + t * lambda * step[i]).collect();
            let ng: Vec<f64> = (0..k)
                .map(|j| if j + 1 < k { g[j] + t * lambda * step[n + j] } else { g[j] })
                .collect();
            let candidate = plan_from_potentials(cost, &nf, &ng, lambda);
            if candidate.is_finite() {
                let r = plan_residual(&candidate, a, b);
                if r < residual || dual_objective(&candidate, &nf, &ng, a, b, lambda) > dual_now {
                    f.copy_from_slice(&nf);
                    g.copy_from_slice(&ng);
                    plan = candidate;
                    residual = r;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    steps
}

/// Log-domain solver with geometric annealing of λ: the potentials from
/// each coarser stage warm-start the next, and only the final stage (at the
/// requested λ) is run to tolerance. Plain scaling stalls once `λ` is far
/// below the cost gaps. A coarse stage that ends short of `sqrt(tol)` is
/// finished with Newton steps so the next stage starts near its optimum,
/// and the final stage is polished every `POLISH_AFTER` iterations.
fn log_domain_solve(
    cost: &Matrix,
    a: &[f64],
    b: &[f64],
    lambda: f64,
    config: &SinkhornConfig,
) -> Result<(Matrix, usize, f64), OtError> {
    const ANNEAL_FACTOR: f64 = 0.5;
    const STAGE_ITERS: usize = 64;

    let (n, k) = cost.shape();
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let cost_t = cost.transpose();

    let mut stages = vec![lambda];
    let c_max = cost.max_abs();
    while stages.last().copied().unwrap_or(lambda) < c_max {
        let next = stages.last().unwrap() / ANNEAL_FACTOR;
        stages.push(next);
    }
    stages.reverse();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; k];
    let mut row_lse = vec![0.0; n];
    let mut iterations = 0;

    for (s, &eps) in stages.iter().enumerate() {
        let last = s + 1 == stages.len();
        let mut stage_iters = 0;
        loop {
            for i in 0..n {
                let row = cost.row(i);
                row_lse[i] = log_sum_exp(g.iter().zip(row).map(|(gj, c)| (gj - c) / eps));
            }
            if stage_iters > 0 {
                // Row marginals of the current coupling, before re-fitting f.
                let residual = (0..n)
                    .map(|i| ((f[i] / eps + row_lse[i]).exp() - a[i]).abs())
                    .fold(0.0, f64::max);
                if residual <= config.tol {
                    break;
                }
                if !last && (stage_iters >= STAGE_ITERS || residual <= config.tol.sqrt()) {
                    if k > 1 && residual > config.tol.sqrt() {
                        let budget = POLISH_STEPS.min(config.max_iter.saturating_sub(iterations));
                        iterations += newton_polish(cost, a, b, eps, &mut f, &mut g, budget, config.tol.sqrt());
                    }
                    break;
                }
            }
            if iterations >= config.max_iter {
                break;
            }
            if last && k > 1 && stage_iters > 0 && stage_iters % POLISH_AFTER == 0 {
                let budget = POLISH_STEPS.min(config.max_iter - iterations);
                iterations += newton_polish(cost, a, b, lambda, &mut f, &mut g, budget, config.tol);
                stage_iters += 1;
                continue;
            }
            for i in 0..n {
                f[i] = eps * (log_a[i] - row_lse[i]);
            }
            for j in 0..k {
                let col = cost_t.row(j);
                let lse = log_sum_exp(f.iter().zip(col).map(|(fi, c)| (fi - c) / eps));
                g[j] = eps * (log_b[j] - lse);
            }
            iterations += 1;
            stage_iters += 1;
        }
    }

    let plan = plan_from_potentials(cost, &f, &g, lambda);
    if !plan.is_finite() {
        return Err(OtError::NonFinite);
    }
    let residual = plan_residual(&plan, a, b);
    if residual > config.tol {
        return Err(OtError::NotConverged {
            residual,
            iterations,
        });
    }
    Ok((plan, iterations, residual))
}

/// Multiplies a plan by its source width so each row sums to one.
pub fn rescale_rows(plan: &TransportPlan) -> Matrix {
    plan.plan.scale(plan.plan.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SinkhornConfig {
        SinkhornConfig::default()
    }

    #[test]
    fn single_cell() {
        let p = sinkhorn(&Matrix::zeros(1, 1), &[1.0], &[1.0], 0.1, &cfg()).unwrap();
        assert!((p.plan[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(rescale_rows(&p), Matrix::from_rows(&[[1.0]]));
    }

    #[test]
    fn two_by_two_closed_form() {
        let c = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let h = [0.5, 0.5];
        for mode in [SinkhornMode::Auto, SinkhornMode::Linear, SinkhornMode::Log] {
            let config = SinkhornConfig { mode, ..cfg() };
            let p = sinkhorn(&c, &h, &h, 0.1, &config).unwrap();
            let expected = 0.5 / (1.0 + (-1.0f64 / 0.1).exp());
            assert!((expected - 0.499_977_3).abs() < 1e-7);
            assert!((p.plan[(0, 0)] - expected).abs() < 1e-9, "{mode:?}");
            assert!((p.plan[(0, 1)] - (0.5 - expected)).abs() < 1e-9);
            let r = rescale_rows(&p);
            assert!((r[(0, 0)] - 2.0 * expected).abs() < 1e-9);
            assert!((r.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn large_lambda_is_product_coupling() {
        let c = Matrix::from_rows(&[[0.0, 3.0, 1.0], [2.0, 0.5, 4.0]]);
        let a = [0.3, 0.7];
        let b = [0.2, 0.5, 0.3];
        let p = sinkhorn(&c, &a, &b, 1e6, &cfg()).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((p.plan[(i, j)] - a[i] * b[j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn uniform_plan_rescaled() {
        let plan = TransportPlan {
            plan: Matrix::from_rows(&[[0.25, 0.25], [0.25, 0.25]]),
            lambda: 1.0,
            source: uniform(2),
            target: uniform(2),
            iterations: 0,
            marginal_residual: 0.0,
            log_domain: false,
        };
        assert_eq!(rescale_rows(&plan), Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn linear_mode_reports_underflow() {
        let c = Matrix::from_rows(&[[0.0, 1e4], [1e4, 1e4]]);
        let config = SinkhornConfig {
            mode: SinkhornMode::Linear,
            ..cfg()
        };
        let err = sinkhorn(&c, &uniform(2), &uniform(2), 0.01, &config).unwrap_err();
        assert_eq!(err, OtError::NumericalUnderflow);
        // Auto mode survives the same instance.
        let p = sinkhorn(&c, &uniform(2), &uniform(2), 0.01, &cfg()).unwrap();
        assert!(p.log_domain);
    }

    #[test]
    fn not_converged_is_reported() {
        let c = Matrix::from_rows(&[[0.0, 1.0, 2.0], [2.0, 0.0, 1.0], [1.0, 2.0, 0.0]]);
        let config = SinkhornConfig {
            max_iter: 1,
            tol: 1e-15,
            mode: SinkhornMode::Linear,
        };
        let a = [0.5, 0.3, 0.2];
        match sinkhorn(&c, &a, &uniform(3), 0.5, &config) {
            Err(OtError::NotConverged { residual, .. }) => assert!(residual > 1e-15),
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = Matrix::zeros(2, 2);
        assert!(matches!(
            sinkhorn(&c, &[0.5, 0.6], &uniform(2), 1.0, &cfg()),
            Err(OtError::InvalidMarginal(_))
        ));
        assert!(matches!(
            sinkhorn(&c, &uniform(2), &uniform(2), 0.0, &cfg()),
            Err(OtError::InvalidLambda(_))
        ));
        assert!(matches!(
            sinkhorn(&c, &uniform(3), &uniform(2), 1.0, &cfg()),
            Err(OtError::InvalidMarginal(_))
        ));
    }
}
