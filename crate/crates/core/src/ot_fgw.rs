//! Fused Gromov-Wasserstein discrepancy solved by Frank-Wolfe.
//!
//! Objective over feasible plans π:
//!
//! ```text
//! F(π) = κ·⟨D, π⟩ + (1-κ)·Σ_{i,j,k,l} (C0[i][k] - C1[j][l])² · π[i][j] · π[k][l]
//! ```
//!
//! The quartic sum is never materialised. With `p = π·1`, `q = πᵀ·1`,
//!
//! ```text
//! E(π)[i][j] = Σ_k C0[i][k]² p[k] + Σ_l C1[j][l]² q[l] - 2·(C0·π·C1ᵀ)[i][j]
//! ```
//!
//! gives `GW(π) = ⟨E(π), π⟩` and `∇GW(π) = 2·E(π)` for symmetric C0, C1, at
//! O(n²m + nm²). `E` is linear in its argument, so the Frank-Wolfe iterate's
//! `E` is updated along the search direction instead of being recomputed, and
//! the objective along `π + δΔ` is an exact quadratic in δ.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::matstat::Matrix;
use crate::ot_exact::{marginal_violation, solve_transport_warm, Basis, MassVector, SolverMethod, TransportPlan};

/// Size guard for the quartic test oracle (`n·m`).
pub const NAIVE_GW_LIMIT: usize = 10_000;
/// Plans handed to [`fgw_cost`] must meet the marginals to this tolerance.
pub const FEASIBILITY_TOL: f64 = 1e-6;
pub const DEFAULT_KAPPA: f64 = 0.5;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct FgwProblem {
    /// Cross-group cost, n×m.
    pub cross: Matrix,
    /// Within-source cost, n×n, symmetric with zero diagonal.
    pub source: Matrix,
    /// Within-target cost, m×m, symmetric with zero diagonal.
    pub target: Matrix,
    pub a: MassVector,
    pub b: MassVector,
    /// Weight of the Wasserstein term, in [0, 1].
    pub kappa: f64,
}

impl FgwProblem {
    pub fn new(cross: Matrix, source: Matrix, target: Matrix, a: MassVector, b: MassVector, kappa: f64) -> Result<Self> {
        let p = Self {
            cross,
            source,
            target,
            a,
            b,
            kappa,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.cross.rows()
    }

    pub fn m(&self) -> usize {
        self.cross.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.cross.shape();
        if self.source.shape() != (n, n) {
            return Err(dim_mismatch("FgwProblem source", format!("{n}x{n}"), format!("{:?}", self.source.shape())));
        }
        if self.target.shape() != (m, m) {
            return Err(dim_mismatch("FgwProblem target", format!("{m}x{m}"), format!("{:?}", self.target.shape())));
        }
        if self.a.len() != n || self.b.len() != m {
            return Err(dim_mismatch(
                "FgwProblem masses",
                format!("({n}, {m})"),
                format!("({}, {})", self.a.len(), self.b.len()),
            ));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::InvalidConfig {
                field: "kappa".into(),
                reason: format!("{} is outside [0, 1]", self.kappa),
            });
        }
        check_metric_like(&self.source, "source")?;
        check_metric_like(&self.target, "target")?;
        if !self.cross.is_finite() {
            return Err(Error::NonFinite {
                what: "cross cost".into(),
            });
        }
        Ok(())
    }
}

fn check_metric_like(c: &Matrix, name: &str) -> Result<()> {
    let scale = 1.0 + c.as_slice().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-10 * scale;
    for i in 0..c.rows() {
        if c[(i, i)].abs() > tol {
            return Err(Error::InvalidConfig {
                field: name.into(),
                reason: format!("nonzero diagonal entry {} at {i}", c[(i, i)]),
            });
        }
        for k in 0..i {
            if (c[(i, k)] - c[(k, i)]).abs() > tol {
                return Err(Error::InvalidConfig {
                    field: name.into(),
                    reason: format!("asymmetric at ({i}, {k})"),
                });
            }
        }
    }
    if !c.is_finite() {
        return Err(Error::NonFinite { what: name.into() });
    }
    Ok(())
}

/// `Σ_{i,j,k,l} (C0[i][k] - C1[j][l])² π[i][j] π[k][l]` by direct contraction.
/// Test oracle: refuses `n·m > 10⁴`.
pub fn gw_cost_naive(c0: &Matrix, c1: &Matrix, plan: &Matrix) -> Result<f64> {
    let (n, m) = plan.shape();
    check_shapes(c0, c1, plan)?;
    if n * m > NAIVE_GW_LIMIT {
        return Err(Error::OracleTooLarge {
            what: "quartic contraction",
            size: n * m,
            limit: NAIVE_GW_LIMIT,
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let pij = plan[(i, j)];
            if pij == 0.0 {
                continue;
            }
            for k in 0..n {
                for l in 0..m {
                    let d = c0[(i, k)] - c1[(j, l)];
                    total += d * d * pij * plan[(k, l)];
                }
            }
        }
    }
    Ok(total)
}

fn check_shapes(c0: &Matrix, c1: &Matrix, plan: &Matrix) -> Result<()> {
    let (n, m) = plan.shape();
    if c0.shape() != (n, n) || c1.shape() != (m, m) {
        return Err(dim_mismatch(
            "gromov term",
            format!("C0 {n}x{n}, C1 {m}x{m}"),
            format!("C0 {:?}, C1 {:?}", c0.shape(), c1.shape()),
        ));
    }
    Ok(())
}

/// `E(X)` from the module docs, using the margins of `x` itself.
fn tensor_product(c0: &Matrix, c1: &Matrix, x: &Matrix) -> Matrix {
    let (n, m) = x.shape();
    let p = x.row_sums();
    let q = x.col_sums();
    let left: Vec<f64> = (0..n)
        .map(|i| c0.row(i).iter().zip(&p).map(|(c, pk)| c * c * pk).sum())
        .collect();
    let right: Vec<f64> = (0..m)
        .map(|j| c1.row(j).iter().zip(&q).map(|(c, ql)| c * c * ql).sum())
        .collect();
    let cross = cross_term(c0, c1, x);
    Matrix::from_fn(n, m, |i, j| left[i] + right[j] - 2.0 * cross[(i, j)])
}

/// `C0 · X · C1ᵀ`.
fn cross_term(c0: &Matrix, c1: &Matrix, x: &Matrix) -> Matrix {
    let tmp = c0.matmul(x).expect("shapes checked");
    tmp.matmul_t(c1).expect("shapes checked")
}

/// Gromov term via the tensor decomposition.
pub fn gw_cost(c0: &Matrix, c1: &Matrix, plan: &Matrix) -> Result<f64> {
    check_shapes(c0, c1, plan)?;
    Ok(tensor_product(c0, c1, plan).frobenius_dot(plan))
}

/// Gradient of the Gromov term with respect to the plan entries.
pub fn gw_grad(c0: &Matrix, c1: &Matrix, plan: &Matrix) -> Result<Matrix> {
    check_shapes(c0, c1, plan)?;
    Ok(tensor_product(c0, c1, plan).scaled(2.0))
}

/// `κ·⟨D, π⟩ + (1-κ)·GW(π)` for a feasible plan.
pub fn fgw_cost(prob: &FgwProblem, plan: &Matrix) -> Result<f64> {
    if plan.shape() != prob.cross.shape() {
        return Err(dim_mismatch("fgw_cost", format!("{:?}", prob.cross.shape()), format!("{:?}", plan.shape())));
    }
    let violation = marginal_violation(plan, prob.a.values(), prob.b.values());
    if violation > FEASIBILITY_TOL {
        return Err(Error::InfeasiblePlan { violation });
    }
    Ok(fgw_objective(prob, plan))
}

/// Objective value without the feasibility check of [`fgw_cost`].
pub fn fgw_objective(prob: &FgwProblem, plan: &Matrix) -> f64 {
    let k = prob.kappa;
    let linear = if k > 0.0 { k * prob.cross.frobenius_dot(plan) } else { 0.0 };
    let quad = if k < 1.0 {
        (1.0 - k) * tensor_product(&prob.source, &prob.target, plan).frobenius_dot(plan)
    } else {
        0.0
    };
    linear + quad
}

/// Partial derivatives of the objective with respect to `D`, `C0` and `C1`
/// at a fixed plan.
#[derive(Debug, Clone)]
pub struct CostSensitivity {
    pub d_cross: Matrix,
    pub d_source: Matrix,
    pub d_target: Matrix,
}

pub fn cost_sensitivity(prob: &FgwProblem, plan: &Matrix) -> CostSensitivity {
    let k = prob.kappa;
    let (n, m) = plan.shape();
    let d_cross = plan.scaled(k);
    if k >= 1.0 {
        return CostSensitivity {
            d_cross,
            d_source: Matrix::zeros(n, n),
            d_target: Matrix::zeros(m, m),
        };
    }
    let p = plan.row_sums();
    let q = plan.col_sums();
    // π C1 πᵀ and πᵀ C0 π
    let pc1pt = plan.matmul(&prob.target).unwrap().matmul_t(plan).unwrap();
    let ptc0p = plan.t_matmul(&prob.source).unwrap().matmul(plan).unwrap();
    let w = 2.0 * (1.0 - k);
    let d_source = Matrix::from_fn(n, n, |i, kk| w * (prob.source[(i, kk)] * p[i] * p[kk] - pc1pt[(i, kk)]));
    let d_target = Matrix::from_fn(m, m, |j, l| w * (prob.target[(j, l)] * q[j] * q[l] - ptc0p[(j, l)]));
    CostSensitivity {
        d_cross,
        d_source,
        d_target,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FgwResult {
    /// Final plan; its `cost` field is `⟨D, plan⟩`.
    pub plan: TransportPlan,
    pub objective: f64,
    /// Objective at the initial plan followed by one entry per accepted step.
    pub objective_trace: Vec<f64>,
    pub lmo_calls: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgwSettings {
    pub max_iters: usize,
    /// Relative objective-drop threshold.
    pub tol: f64,
}

impl Default for FgwSettings {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// Frank-Wolfe with exact line search and an exact-LP linear oracle.
pub fn fgw_solve(prob: &FgwProblem, max_iters: usize, tol: f64) -> Result<FgwResult> {
    prob.validate()?;
    let (n, m) = prob.cross.shape();
    let k = prob.kappa;
    let a = prob.a.values();
    let b = prob.b.values();
    let mut plan = Matrix::from_fn(n, m, |i, j| a[i] * b[j]);
    let quadratic = k < 1.0;
    let mut e_plan = if quadratic {
        tensor_product(&prob.source, &prob.target, &plan)
    } else {
        Matrix::zeros(n, m)
    };
    let eval = |plan: &Matrix, e: &Matrix| -> f64 {
        let lin = if k > 0.0 { k * prob.cross.frobenius_dot(plan) } else { 0.0 };
        let quad = if quadratic { (1.0 - k) * e.frobenius_dot(plan) } else { 0.0 };
        lin + quad
    };
    let mut value = eval(&plan, &e_plan);
    let mut trace = vec![value];
    let mut lmo_calls = 0;
    let mut converged = false;
    let mut basis: Option<Basis> = None;

    for _ in 0..max_iters {
        let grad = Matrix::from_fn(n, m, |i, j| k * prob.cross[(i, j)] + 2.0 * (1.0 - k) * e_plan[(i, j)]);
        let (vertex, next_basis) = solve_transport_warm(&grad, a, b, basis.as_ref())?;
        basis = next_basis;
        lmo_calls += 1;
        let dir = Matrix::from_fn(n, m, |i, j| vertex.plan[(i, j)] - plan[(i, j)]);

        // F(π + δΔ) = qa·δ² + qb·δ + F(π)
        let e_dir = if quadratic {
            let c = cross_term(&prob.source, &prob.target, &dir);
            // Δ has zero margins up to rounding; keep the exact linear form.
            let p = dir.row_sums();
            let q = dir.col_sums();
            let left: Vec<f64> = (0..n)
                .map(|i| prob.source.row(i).iter().zip(&p).map(|(s, pk)| s * s * pk).sum())
                .collect();
            let right: Vec<f64> = (0..m)
                .map(|j| prob.target.row(j).iter().zip(&q).map(|(t, ql)| t * t * ql).sum())
                .collect();
            Matrix::from_fn(n, m, |i, j| left[i] + right[j] - 2.0 * c[(i, j)])
        } else {
            Matrix::zeros(n, m)
        };
        let qa = if quadratic { (1.0 - k) * e_dir.frobenius_dot(&dir) } else { 0.0 };
        let qb = grad.frobenius_dot(&dir);
        let step = if qa > 0.0 {
            (-qb / (2.0 * qa)).clamp(0.0, 1.0)
        } else if qa + qb < 0.0 {
            1.0
        } else {
            0.0
        };
        if step == 0.0 {
            converged = true;
            break;
        }

        let next = Matrix::from_fn(n, m, |i, j| plan[(i, j)] + step * dir[(i, j)]);
        let e_next = if quadratic {
            Matrix::from_fn(n, m, |i, j| e_plan[(i, j)] + step * e_dir[(i, j)])
        } else {
            e_plan.clone()
        };
        let next_value = eval(&next, &e_next);
        if next_value > value {
            // Rounding-level increase: the line search found no real descent.
            converged = true;
            break;
        }
        let drop = value - next_value;
        plan = next;
        e_plan = e_next;
        value = next_value;
        trace.push(value);
        // A linear objective is minimised by the oracle's vertex itself.
        if !quadratic || drop <= tol * value.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    // Refresh E from scratch so the reported objective carries no drift.
    let objective = fgw_objective(prob, &plan);
    if let Some(last) = trace.last_mut() {
        *last = objective.min(*last);
    }
    let cost = prob.cross.frobenius_dot(&plan);
    Ok(FgwResult {
        plan: TransportPlan {
            plan,
            cost,
            iterations: trace.len() - 1,
            method: SolverMethod::FrankWolfe,
            converged,
        },
        objective,
        objective_trace: trace,
        lmo_calls,
    })
}

/// [`fgw_solve`] with the default iteration cap and tolerance.
pub fn fgw_solve_default(prob: &FgwProblem) -> Result<FgwResult> {
    let s = FgwSettings::default();
    fgw_solve(prob, s.max_iters, s.tol)
}
