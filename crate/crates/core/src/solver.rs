//! ADMM for `min_{X in simplex} 0.5 ||Y - B X||_F^2 + lambda R(X)`.
//!
//! Splitting: `X = V1` carries the penalty prox and `X = V2` the simplex
//! projection, so the `X` step is a linear solve with `B^T B + 2 rho I`
//! whose inverse is computed once per value of `rho`. The same routine
//! serves the coarse problem and the stacked fine-scale problem.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::UnmixConfig;
use crate::error::{Error, Result};
use crate::hsi::{AbundanceLevel, AbundanceMatrix, BundleLibrary, GroupStructure};
use crate::multiscale::ScaleOperators;
use crate::penalty::{penalty_matrix, project_simplex_into, prox_into, PenaltyKind, PenaltySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    #[default]
    Uniform,
    WarmStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SolverParams {
    pub rho: f64,
    pub max_iterations: usize,
    pub tol_primal: f64,
    pub tol_dual: f64,
    /// Residual balancing of `rho` (factor 2, within `rho * 1e+-4`).
    pub adapt_rho: bool,
    pub init: InitMode,
    /// Objective evaluation period; only evaluated iterates can be accepted.
    pub check_every: usize,
    /// Keep a per-iteration residual trace.
    pub trace: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            rho: 0.1,
            max_iterations: 1000,
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            adapt_rho: true,
            init: InitMode::Uniform,
            check_every: 10,
            trace: false,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::param("solver.rho", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("solver.max-iterations", "must be at least 1"));
        }
        if !(self.tol_primal > 0.0 && self.tol_dual > 0.0) {
            return Err(Error::param("solver.tol", "tolerances must be positive"));
        }
        if self.check_every == 0 {
            return Err(Error::param("solver.check-every", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub rho: f64,
    /// NaN on iterations where the objective was not evaluated.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub abundances: AbundanceMatrix,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    /// Objective of the returned (best accepted) iterate.
    pub objective: f64,
    pub trace: Vec<TraceRow>,
}

impl SolveOutcome {
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "iteration,primal_residual,dual_residual,rho,objective").unwrap();
        for row in &self.trace {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{}",
                row.iteration,
                row.primal_residual,
                row.dual_residual,
                row.rho,
                if row.objective.is_nan() {
                    String::new()
                } else {
                    format!("{:e}", row.objective)
                }
            )
            .unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Quadratic data of `0.5 ||Y - B X||^2`: `B^T B`, `B^T Y` and `||Y||^2`.
struct Quadratic {
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
    energy: f64,
}

impl Quadratic {
    fn new(y: &DMatrix<f64>, b: &DMatrix<f64>) -> Self {
        Quadratic {
            gram: b.transpose() * b,
            cross: b.transpose() * y,
            energy: y.norm_squared(),
        }
    }

    fn data_term(&self, x: &DMatrix<f64>, scratch: &mut DMatrix<f64>) -> f64 {
        scratch.gemm(1.0, &self.gram, x, 0.0);
        let quad = x.dot(scratch);
        let lin = x.dot(&self.cross);
        (0.5 * (self.energy - 2.0 * lin + quad)).max(0.0)
    }
}

/// Full objective `0.5 ||Y - B X||_F^2 + lambda R(X)`.
pub fn objective(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &DMatrix<f64>,
    groups: &GroupStructure,
    spec: &PenaltySpec,
    lambda: f64,
) -> Result<f64> {
    let residual = y - b * x;
    let penalty = if lambda > 0.0 {
        lambda * penalty_matrix(x, groups, spec)?
    } else {
        0.0
    };
    Ok(0.5 * residual.norm_squared() + penalty)
}

const BALANCE_RATIO: f64 = 10.0;
const STALL_FACTOR: f64 = 0.99;
const ADAPT_WINDOW: usize = 10;

fn inverse_system(gram: &DMatrix<f64>, shift: f64) -> Result<DMatrix<f64>> {
    let q = gram.nrows();
    let system = gram + DMatrix::identity(q, q) * shift;
    system
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::DegenerateGeometry("ADMM system matrix is not positive definite".into()))
}

/// Solves the simplex-constrained penalized regression with dictionary `b`
/// (`L' x Q`, grouped by `groups`) on data `y` (`L' x N`).
///
/// `init` is used only with [`InitMode::WarmStart`]; its columns are
/// projected onto the simplex first.
pub fn admm_unmix(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    groups: &GroupStructure,
    spec: &PenaltySpec,
    lambda: f64,
    params: &SolverParams,
    init: Option<&DMatrix<f64>>,
) -> Result<SolveOutcome> {
    params.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param("lambda", format!("must be nonnegative, got {lambda}")));
    }
    if b.nrows() != y.nrows() {
        return Err(Error::Dimension {
            context: "dictionary rows",
            expected: y.nrows(),
            found: b.nrows(),
        });
    }
    let q = b.ncols();
    let n = y.ncols();
    if groups.total() != q {
        return Err(Error::Dimension {
            context: "group structure size",
            expected: q,
            found: groups.total(),
        });
    }
    if let Some(x0) = init {
        if x0.shape() != (q, n) {
            return Err(Error::Dimension {
                context: "initial abundances",
                expected: q * n,
                found: x0.len(),
            });
        }
    }
    let problem = Quadratic::new(y, b);
    let penalized = lambda > 0.0 && spec.kind() != PenaltyKind::None;
    let blocks = if penalized { 2.0 } else { 1.0 };

    let mut simplex_scratch = Vec::with_capacity(q);
    let uniform = DMatrix::from_element(q, n, 1.0 / q as f64);
    let start = match (params.init, init) {
        (InitMode::WarmStart, Some(x0)) => x0.clone(),
        _ => uniform,
    };
    let mut v2 = DMatrix::zeros(q, n);
    for j in 0..n {
        project_simplex_into(
            start.column(j).as_slice(),
            v2.column_mut(j).as_mut_slice(),
            &mut simplex_scratch,
        );
    }
    let mut v1 = v2.clone();
    let mut u1 = DMatrix::zeros(q, n);
    let mut u2 = DMatrix::zeros(q, n);
    let mut x = v2.clone();
    let mut rhs = DMatrix::zeros(q, n);
    let mut scratch = DMatrix::zeros(q, n);
    let mut arg = vec![0.0; q];
    let mut old = vec![0.0; q];
    let mut delta = vec![0.0; q];

    let rho_min = params.rho * 1e-4;
    let rho_max = params.rho * 1e4;
    let mut rho = params.rho;
    let mut inverse = inverse_system(&problem.gram, blocks * rho)?;

    let eval = |v: &DMatrix<f64>, scratch: &mut DMatrix<f64>| -> Result<f64> {
        let pen = if penalized {
            lambda * penalty_matrix(v, groups, spec)?
        } else {
            0.0
        };
        Ok(problem.data_term(v, scratch) + pen)
    };
    let mut best = v2.clone();
    let mut best_obj = eval(&v2, &mut scratch)?;

    let mut trace = Vec::new();
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut since_adapt = 0;
    let mut window_primal = f64::INFINITY;

    for it in 1..=params.max_iterations {
        iterations = it;
        // X step
        {
            let rhs = rhs.as_mut_slice();
            let cross = problem.cross.as_slice();
            let (v2s, u2s) = (v2.as_slice(), u2.as_slice());
            if penalized {
                let (v1s, u1s) = (v1.as_slice(), u1.as_slice());
                for k in 0..rhs.len() {
                    rhs[k] = cross[k] + rho * (v1s[k] - u1s[k] + v2s[k] - u2s[k]);
                }
            } else {
                for k in 0..rhs.len() {
                    rhs[k] = cross[k] + rho * (v2s[k] - u2s[k]);
                }
            }
        }
        x.gemm(1.0, &inverse, &rhs, 0.0);

        let mut r2 = 0.0_f64;
        let mut s2 = 0.0_f64;
        let mut x_norm2 = 0.0_f64;
        let mut v_norm2 = 0.0_f64;
        let mut u_norm2 = 0.0_f64;
        for j in 0..n {
            let cols = j * q..(j + 1) * q;
            let xs = &x.as_slice()[cols.clone()];
            if penalized {
                let v1c = &mut v1.as_mut_slice()[cols.clone()];
                let u1c = &mut u1.as_mut_slice()[cols.clone()];
                for i in 0..q {
                    arg[i] = xs[i] + u1c[i];
                    old[i] = v1c[i];
                }
                prox_into(&arg, groups, spec, lambda / rho, v1c)?;
                for i in 0..q {
                    let diff = xs[i] - v1c[i];
                    u1c[i] += diff;
                    r2 += diff * diff;
                    v_norm2 += v1c[i] * v1c[i];
                    delta[i] = v1c[i] - old[i];
                }
            } else {
                delta.iter_mut().for_each(|d| *d = 0.0);
            }
            let v2c = &mut v2.as_mut_slice()[cols.clone()];
            let u2c = &mut u2.as_mut_slice()[cols.clone()];
            for i in 0..q {
                arg[i] = xs[i] + u2c[i];
                old[i] = v2c[i];
            }
            project_simplex_into(&arg, v2c, &mut simplex_scratch);
            let u1c = &u1.as_slice()[cols];
            for i in 0..q {
                let diff = xs[i] - v2c[i];
                u2c[i] += diff;
                r2 += diff * diff;
                v_norm2 += v2c[i] * v2c[i];
                x_norm2 += xs[i] * xs[i];
                delta[i] += v2c[i] - old[i];
                s2 += delta[i] * delta[i];
                let u = u2c[i] + u1c[i];
                u_norm2 += u * u;
            }
        }
        x_norm2 *= blocks;
        primal = r2.sqrt();
        dual = rho * s2.sqrt();
        if !primal.is_finite() || !dual.is_finite() {
            return Err(Error::SolverNan { iteration: it });
        }
        let eps_primal = params.tol_primal * x_norm2.sqrt().max(v_norm2.sqrt());
        let eps_dual = params.tol_dual * rho * u_norm2.sqrt().max(v_norm2.sqrt());
        converged = primal <= eps_primal && dual <= eps_dual;

        let checked = converged || it % params.check_every == 0 || it == params.max_iterations;
        let mut obj_here = f64::NAN;
        if checked {
            obj_here = eval(&v2, &mut scratch)?;
            if obj_here <= best_obj {
                best_obj = obj_here;
                best.copy_from(&v2);
            }
        }
        if params.trace {
            trace.push(TraceRow {
                iteration: it,
                primal_residual: primal,
                dual_residual: dual,
                rho,
                objective: obj_here,
            });
        }
        if converged {
            break;
        }

        since_adapt += 1;
        if params.adapt_rho && since_adapt >= ADAPT_WINDOW {
            // Compare residuals relative to their own stopping thresholds.
            let rel_primal = primal / eps_primal.max(f64::MIN_POSITIVE);
            let rel_dual = dual / eps_dual.max(f64::MIN_POSITIVE);
            let new_rho = if rel_primal > BALANCE_RATIO * rel_dual {
                (rho * 2.0).min(rho_max)
            } else if rel_dual > BALANCE_RATIO * rel_primal {
                (rho / 2.0).max(rho_min)
            } else if primal > STALL_FACTOR * window_primal {
                // No primal progress over the window: typical of
                // oscillation under non-convex penalties.
                (rho * 2.0).min(rho_max)
            } else {
                rho
            };
            if new_rho != rho {
                let ratio = rho / new_rho;
                u1 *= ratio;
                u2 *= ratio;
                rho = new_rho;
                inverse = inverse_system(&problem.gram, blocks * rho)?;
            }
            since_adapt = 0;
            window_primal = primal;
        }
    }

    let abundances = AbundanceMatrix::new(AbundanceLevel::Bundle(groups.clone()), best)?;
    Ok(SolveOutcome {
        abundances,
        iterations,
        primal_residual: primal,
        dual_residual: dual,
        converged,
        objective: best_obj,
        trace,
    })
}

/// Fully constrained least squares: no penalty.
pub fn fclsu(y: &DMatrix<f64>, library: &BundleLibrary, params: &SolverParams) -> Result<SolveOutcome> {
    admm_unmix(
        y,
        library.signatures(),
        library.groups(),
        &PenaltySpec::none(),
        0.0,
        params,
        None,
    )
}

/// Penalized unmixing of the superpixel-averaged data `Y W`.
pub fn coarse_unmix(
    y: &DMatrix<f64>,
    library: &BundleLibrary,
    ops: &ScaleOperators,
    lambda_coarse: f64,
    spec: &PenaltySpec,
    params: &SolverParams,
) -> Result<SolveOutcome> {
    let coarse = ops.coarsen(y)?;
    admm_unmix(
        &coarse,
        library.signatures(),
        library.groups(),
        spec,
        lambda_coarse,
        params,
        None,
    )
}

/// `[Y; sqrt(beta) X_D]` and `[B; sqrt(beta) I]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedProblem {
    pub y: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub beta: f64,
}

pub fn build_stacked(
    y: &DMatrix<f64>,
    b: &DMatrix<f64>,
    prior: &DMatrix<f64>,
    beta: f64,
) -> Result<StackedProblem> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::param("beta", format!("must be nonnegative, got {beta}")));
    }
    let (l, n) = y.shape();
    let q = b.ncols();
    if b.nrows() != l {
        return Err(Error::Dimension {
            context: "dictionary rows",
            expected: l,
            found: b.nrows(),
        });
    }
    if prior.shape() != (q, n) {
        return Err(Error::Dimension {
            context: "prior abundances",
            expected: q * n,
            found: prior.len(),
        });
    }
    let root = beta.sqrt();
    let mut sy = DMatrix::zeros(l + q, n);
    sy.view_mut((0, 0), (l, n)).copy_from(y);
    sy.view_mut((l, 0), (q, n)).copy_from(&(prior * root));
    let mut sb = DMatrix::zeros(l + q, q);
    sb.view_mut((0, 0), (l, q)).copy_from(b);
    for i in 0..q {
        sb[(l + i, i)] = root;
    }
    Ok(StackedProblem { y: sy, b: sb, beta })
}

/// Coarse solve, replication to full resolution, then the stacked fine
/// problem warm-started from the replicated estimate. With `beta = 0` the
/// coarse stage is skipped and this is plain single-scale unmixing.
pub fn multiscale_unmix(
    y: &DMatrix<f64>,
    library: &BundleLibrary,
    ops: &ScaleOperators,
    cfg: &UnmixConfig,
) -> Result<SolveOutcome> {
    let groups = library.groups();
    if cfg.beta == 0.0 {
        return admm_unmix(
            y,
            library.signatures(),
            groups,
            &cfg.penalty,
            cfg.lambda,
            &cfg.solver,
            None,
        );
    }
    let coarse = coarse_unmix(y, library, ops, cfg.lambda_coarse, &cfg.penalty, &cfg.solver)?;
    let prior = ops.upsample(coarse.abundances.coefficients())?;
    let stacked = build_stacked(y, library.signatures(), &prior, cfg.beta)?;
    let params = SolverParams {
        init: InitMode::WarmStart,
        ..cfg.solver.clone()
    };
    admm_unmix(
        &stacked.y,
        &stacked.b,
        groups,
        &cfg.penalty,
        cfg.lambda,
        &params,
        Some(&prior),
    )
}

/// Global abundances: per-group sums of the bundle abundances.
pub fn aggregate_global(x: &AbundanceMatrix) -> Result<AbundanceMatrix> {
    let groups = x.groups().ok_or_else(|| {
        Error::param("abundances", "global aggregation needs bundle-level abundances")
    })?;
    let coeffs = x.coefficients();
    let mut z = DMatrix::zeros(groups.len(), coeffs.ncols());
    for (j, col) in coeffs.column_iter().enumerate() {
        for (p, g) in groups.ranges().iter().enumerate() {
            z[(p, j)] = col.rows_range(g.clone()).sum();
        }
    }
    AbundanceMatrix::with_tolerance(AbundanceLevel::Global, z, x.tolerance())
}

/// `B X`.
pub fn reconstruct(b: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.ncols() != x.nrows() {
        return Err(Error::Dimension {
            context: "reconstruction",
            expected: b.ncols(),
            found: x.nrows(),
        });
    }
    Ok(b * x)
}

/// `||x - project_simplex(x)||` for one column.
pub fn simplex_gap(x: &[f64]) -> f64 {
    let p = crate::penalty::project_simplex(x);
    DVector::from_column_slice(x).metric_distance(&DVector::from_column_slice(&p))
}
