//! Entropy-regularised optimal transport via Sinkhorn matrix scaling.
//!
//! Plain scaling (`u ← a / Kv`, `v ← b / Kᵀu` with `K = exp(-D/ε)`) is used
//! for moderate ε. Below [`LOG_DOMAIN_THRESHOLD`]·mean(D) the same fixed point
//! is computed on dual potentials with log-sum-exp reductions, which cannot
//! underflow.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::matstat::Matrix;
use crate::ot_exact::{MassVector, SolverMethod, TransportPlan};

/// ε / mean(D) ratio under which the log-domain solver is selected.
pub const LOG_DOMAIN_THRESHOLD: f64 = 0.05;
/// Default ε / mean(D) ratio.
pub const DEFAULT_EPSILON_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub convergence_tol: f64,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64, max_iters: usize, convergence_tol: f64) -> Result<Self> {
        let cfg = Self {
            epsilon,
            max_iters,
            convergence_tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// ε = 0.1·mean(D), 1000 sweeps, 1e-6 marginal tolerance.
    pub fn default_for(cost: &Matrix) -> Self {
        Self::relative(cost, DEFAULT_EPSILON_RATIO)
    }

    /// ε = `ratio`·mean(D) (falls back to `ratio` itself for an all-zero cost).
    pub fn relative(cost: &Matrix, ratio: f64) -> Self {
        let mean = cost.mean();
        let epsilon = if mean > 0.0 { ratio * mean } else { ratio };
        Self {
            epsilon,
            max_iters: 1000,
            convergence_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("epsilon", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be at least 1"));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(invalid("convergence_tol", "must be positive"));
        }
        Ok(())
    }
}

fn invalid(field: &str, reason: &str) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Entropic plan for `(D, a, b)`. Not reaching `convergence_tol` within
/// `max_iters` is reported through `TransportPlan::converged`, not as an error.
pub fn sinkhorn(cost: &Matrix, a: &MassVector, b: &MassVector, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return Err(dim_mismatch(
            "sinkhorn",
            format!("masses of length ({n}, {m})"),
            format!("({}, {})", a.len(), b.len()),
        ));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite {
            what: "sinkhorn cost".into(),
        });
    }
    let mean = cost.mean();
    let (plan, iterations, converged) = if cfg.epsilon < LOG_DOMAIN_THRESHOLD * mean {
        log_domain(cost, a.values(), b.values(), cfg)
    } else {
        scaling(cost, a.values(), b.values(), cfg)?
    };
    let value = plan.frobenius_dot(cost);
    Ok(TransportPlan {
        plan,
        cost: value,
        iterations,
        method: SolverMethod::Sinkhorn,
        converged,
    })
}

fn scaling(cost: &Matrix, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> Result<(Matrix, usize, bool)> {
    let (n, m) = cost.shape();
    let k = Matrix::from_fn(n, m, |i, j| (-cost[(i, j)] / cfg.epsilon).exp());
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let underflow = || Error::SinkhornUnderflow { epsilon: cfg.epsilon };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        mat_vec(&k, &v, &mut kv);
        for i in 0..n {
            u[i] = a[i] / kv[i];
        }
        mat_t_vec(&k, &u, &mut ktu);
        for j in 0..m {
            v[j] = b[j] / ktu[j];
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(underflow());
        }
        mat_vec(&k, &v, &mut kv);
        let violation: f64 = (0..n).map(|i| (u[i] * kv[i] - a[i]).abs()).sum();
        if violation <= cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    let plan = Matrix::from_fn(n, m, |i, j| u[i] * k[(i, j)] * v[j]);
    if !plan.is_finite() {
        return Err(underflow());
    }
    Ok((plan, iterations, converged))
}

fn log_domain(cost: &Matrix, a: &[f64], b: &[f64], cfg: &SinkhornConfig) -> (Matrix, usize, bool) {
    let (n, m) = cost.shape();
    let eps = cfg.epsilon;
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut buf = vec![0.0; n.max(m)];

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..n {
            let row = cost.row(i);
            for j in 0..m {
                buf[j] = (g[j] - row[j]) / eps;
            }
            f[i] = eps * (log_a[i] - log_sum_exp(&buf[..m]));
        }
        for j in 0..m {
            for i in 0..n {
                buf[i] = (f[i] - cost[(i, j)]) / eps;
            }
            g[j] = eps * (log_b[j] - log_sum_exp(&buf[..n]));
        }
        let violation: f64 = (0..n)
            .map(|i| {
                let row = cost.row(i);
                let s: f64 = (0..m).map(|j| ((f[i] + g[j] - row[j]) / eps).exp()).sum();
                (s - a[i]).abs()
            })
            .sum();
        if violation <= cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    let plan = Matrix::from_fn(n, m, |i, j| {
        let e = (f[i] + g[j] - cost[(i, j)]) / eps;
        if e.is_nan() {
            0.0
        } else {
            e.exp()
        }
    });
    (plan, iterations, converged)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn mat_vec(k: &Matrix, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = crate::matstat::dot(k.row(i), v);
    }
}

fn mat_t_vec(k: &Matrix, u: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (i, &ui) in u.iter().enumerate() {
        for (o, kij) in out.iter_mut().zip(k.row(i)) {
            *o += ui * kij;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matstat::SeededRng;
    use crate::ot_exact::solve_exact_ot;

    #[test]
    fn single_point_is_forced() {
        let d = Matrix::from_rows(&[vec![2.5]]).unwrap();
        let u = MassVector::uniform(1);
        for eps in [1e-3, 0.1, 10.0] {
            let cfg = SinkhornConfig::new(eps, 100, 1e-9).unwrap();
            let p = sinkhorn(&d, &u, &u, &cfg).unwrap();
            assert!((p.plan[(0, 0)] - 1.0).abs() < 1e-12);
            assert!((p.cost - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SinkhornConfig::new(0.0, 10, 1e-6).is_err());
        assert!(SinkhornConfig::new(0.1, 0, 1e-6).is_err());
        assert!(SinkhornConfig::new(0.1, 10, 0.0).is_err());
    }

    #[test]
    fn close_to_exact_on_4x4() {
        let mut rng = SeededRng::new(21);
        let d = rng.uniform_matrix(4, 4);
        let u = MassVector::uniform(4);
        let mut cfg = SinkhornConfig::relative(&d, 0.01);
        cfg.max_iters = 10_000;
        let s = sinkhorn(&d, &u, &u, &cfg).unwrap();
        let e = solve_exact_ot(&d, &u, &u).unwrap();
        assert!((s.cost - e.cost).abs() / e.cost <= 0.02, "{} vs {}", s.cost, e.cost);
    }

    #[test]
    fn symmetric_instance_gives_symmetric_plan() {
        let mut rng = SeededRng::new(4);
        let x = rng.normal_matrix(5, 2);
        let d = crate::matstat::pairwise_sq_dist(&x, &x).unwrap();
        let u = MassVector::uniform(5);
        for ratio in [0.01, 0.5] {
            let mut cfg = SinkhornConfig::relative(&d, ratio);
            cfg.max_iters = 20_000;
            cfg.convergence_tol = 1e-12;
            let p = sinkhorn(&d, &u, &u, &cfg).unwrap();
            assert!(p.plan.max_abs_diff(&p.plan.transpose()) < 1e-8);
        }
    }

    #[test]
    fn plans_are_dense_and_feasible() {
        let mut rng = SeededRng::new(8);
        let d = rng.uniform_matrix(5, 7);
        let a = MassVector::uniform(5);
        let b = MassVector::uniform(7);
        let p = sinkhorn(&d, &a, &b, &SinkhornConfig::default_for(&d)).unwrap();
        assert!(p.converged);
        assert!(p.plan.as_slice().iter().all(|v| *v > 0.0));
        assert!(p.marginal_violation(a.values(), b.values()) < 1e-6);
    }

    #[test]
    fn plain_scaling_underflow_is_reported() {
        // One far-away row among many at the origin: ε stays above the
        // log-domain switch, yet exp(-D/ε) vanishes along that whole row.
        let n = 50;
        let d = Matrix::from_fn(n, 2, |i, _| if i == n - 1 { 1.0 } else { 0.0 });
        let cfg = SinkhornConfig::new(0.06 * d.mean(), 50, 1e-9).unwrap();
        let err = sinkhorn(&d, &MassVector::uniform(n), &MassVector::uniform(2), &cfg).unwrap_err();
        assert!(matches!(err, Error::SinkhornUnderflow { .. }));
    }

    #[test]
    fn non_convergence_is_a_flag() {
        let mut rng = SeededRng::new(1);
        let d = rng.uniform_matrix(6, 6);
        let u = MassVector::uniform(6);
        let cfg = SinkhornConfig::new(0.001, 1, 1e-14).unwrap();
        let p = sinkhorn(&d, &u, &u, &cfg).unwrap();
        assert!(!p.converged);
        assert_eq!(p.iterations, 1);
    }
}
