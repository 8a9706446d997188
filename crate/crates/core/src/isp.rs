//! Informative subspace projection.
//!
//! The projector keeps the top-k right singular vectors of a representation
//! matrix, `k = max(1, round(P·d))`. Among all d×k orthonormal bases this one
//! minimises the reconstruction residual `‖R - R·U·Uᵀ‖²_F`, which equals the
//! sum of the discarded squared singular values.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::matstat::{complete_orthonormal, svd_thin, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    /// d×k, orthonormal columns.
    pub basis: Matrix,
    /// Column means subtracted before projecting, when fitted centred.
    pub center: Option<Vec<f64>>,
    /// Leading singular values, one per kept direction (zero-padded if the
    /// input rank is below k).
    pub singular_values: Vec<f64>,
    /// Sum of discarded squared singular values.
    pub residual: f64,
}

/// Number of kept directions for proportion `p` of dimension `d`.
pub fn subspace_dim(p: f64, d: usize) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidConfig {
            field: "proportion".into(),
            reason: format!("{p} is outside (0, 1]"),
        });
    }
    // f64::round is half-away-from-zero, i.e. half-up for positive values.
    Ok(((p * d as f64).round() as usize).clamp(1, d.max(1)))
}

/// Fit on `reps` (N×d). With `centered`, column means are removed first.
pub fn fit_projector(reps: &Matrix, proportion: f64, centered: bool) -> Result<Projector> {
    let (n, d) = reps.shape();
    if n == 0 || d == 0 {
        return Err(dim_mismatch("fit_projector", "non-empty representation", format!("{n}x{d}")));
    }
    let k = subspace_dim(proportion, d)?;
    let (work, center) = if centered {
        let mu: Vec<f64> = reps.col_sums().into_iter().map(|s| s / n as f64).collect();
        let c = Matrix::from_fn(n, d, |i, j| reps[(i, j)] - mu[j]);
        (c, Some(mu))
    } else {
        (reps.clone(), None)
    };
    let svd = svd_thin(&work)?;
    let r = svd.s.len();
    let kept = k.min(r);
    let mut cols: Vec<Vec<f64>> = (0..kept).map(|j| svd.v.column(j)).collect();
    if kept < k {
        let extra = complete_orthonormal(&cols, d, k - kept);
        cols.extend(extra);
    }
    let basis = Matrix::from_fn(d, k, |i, j| cols[j][i]);
    let mut singular_values: Vec<f64> = svd.s[..kept].to_vec();
    singular_values.resize(k, 0.0);
    let residual = svd.s[kept..].iter().map(|s| s * s).sum();
    Ok(Projector {
        basis,
        center,
        singular_values,
        residual,
    })
}

impl Projector {
    pub fn input_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.cols()
    }

    /// `(R - center)·U`, N×k.
    pub fn project(&self, reps: &Matrix) -> Result<Matrix> {
        if reps.cols() != self.input_dim() {
            return Err(dim_mismatch("project", format!("{} columns", self.input_dim()), reps.cols()));
        }
        match &self.center {
            None => reps.matmul(&self.basis),
            Some(mu) => {
                let c = Matrix::from_fn(reps.rows(), reps.cols(), |i, j| reps[(i, j)] - mu[j]);
                c.matmul(&self.basis)
            }
        }
    }

    /// Pull a gradient with respect to projected coordinates back to the
    /// representation: `dR = dZ·Uᵀ`.
    pub fn backproject(&self, grad: &Matrix) -> Result<Matrix> {
        grad.matmul_t(&self.basis)
    }
}

/// `‖R - R·U·Uᵀ‖²_F` for any d×k basis with orthonormal columns.
pub fn reconstruction_residual(reps: &Matrix, basis: &Matrix) -> Result<f64> {
    let z = reps.matmul(basis)?;
    let back = z.matmul_t(basis)?;
    let diff = Matrix::from_fn(reps.rows(), reps.cols(), |i, j| reps[(i, j)] - back[(i, j)]);
    Ok(diff.frobenius_dot(&diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matstat::SeededRng;

    #[test]
    fn dimension_rounding() {
        assert_eq!(subspace_dim(0.5, 16).unwrap(), 8);
        assert_eq!(subspace_dim(0.25, 10).unwrap(), 3); // 2.5 rounds up
        assert_eq!(subspace_dim(0.01, 16).unwrap(), 1);
        assert_eq!(subspace_dim(1.0, 7).unwrap(), 7);
        assert!(subspace_dim(0.0, 4).is_err());
        assert!(subspace_dim(1.2, 4).is_err());
    }

    #[test]
    fn full_proportion_is_lossless() {
        let mut rng = SeededRng::new(1);
        let r = rng.normal_matrix(20, 5);
        let p = fit_projector(&r, 1.0, false).unwrap();
        assert!(p.residual.abs() < 1e-12);
        let z = p.project(&r).unwrap();
        // Rotation preserves pairwise distances.
        let d0 = crate::matstat::pairwise_sq_dist(&r, &r).unwrap();
        let d1 = crate::matstat::pairwise_sq_dist(&z, &z).unwrap();
        assert!(d0.max_abs_diff(&d1) < 1e-9);
    }

    #[test]
    fn residual_matches_reconstruction() {
        let mut rng = SeededRng::new(2);
        let r = rng.normal_matrix(30, 6);
        let p = fit_projector(&r, 0.5, false).unwrap();
        let direct = reconstruction_residual(&r, &p.basis).unwrap();
        assert!((p.residual - direct).abs() < 1e-9 * (1.0 + direct));
    }

    #[test]
    fn rank_deficient_input_is_completed() {
        // Three samples in ten dimensions, keep eight directions.
        let mut rng = SeededRng::new(3);
        let r = rng.normal_matrix(3, 10);
        let p = fit_projector(&r, 0.8, false).unwrap();
        assert_eq!(p.basis.shape(), (10, 8));
        let g = p.basis.t_matmul(&p.basis).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(8)) < 1e-10);
        assert!(p.residual.abs() < 1e-10);
    }

    #[test]
    fn centred_mode_removes_offset() {
        let mut rng = SeededRng::new(4);
        let r = rng.normal_matrix(40, 4).add_scalar(10.0);
        let c = fit_projector(&r, 0.25, true).unwrap();
        let u = fit_projector(&r, 0.25, false).unwrap();
        let z = c.project(&r).unwrap();
        assert!(z.col_sums()[0].abs() < 1e-9);
        // Uncentred top direction follows the mean offset.
        let lead: Vec<f64> = u.basis.column(0);
        assert!(lead.iter().all(|x| x.abs() > 0.3));
    }

    #[test]
    fn backprojection_is_transpose() {
        let mut rng = SeededRng::new(5);
        let r = rng.normal_matrix(10, 4);
        let p = fit_projector(&r, 0.5, false).unwrap();
        let g = rng.normal_matrix(10, 2);
        let back = p.backproject(&g).unwrap();
        // ⟨g, R·U⟩ = ⟨g·Uᵀ, R⟩
        let lhs = g.frobenius_dot(&p.project(&r).unwrap());
        assert!((lhs - back.frobenius_dot(&r)).abs() < 1e-10);
    }

    #[test]
    fn wrong_width_rejected() {
        let mut rng = SeededRng::new(6);
        let p = fit_projector(&rng.normal_matrix(5, 3), 1.0, false).unwrap();
        assert!(p.project(&Matrix::zeros(2, 4)).is_err());
    }
}
