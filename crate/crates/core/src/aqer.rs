//! Activation quantization error reduction.
//!
//! Folds the error introduced by quantizing a layer's input into the
//! full-precision weight via the ridge problem
//! `min_ΔW E‖ΔW x̄ + W δx‖² + λ₁‖ΔW‖²`, whose minimizer is
//! `ΔW* = -W E[δx x̄ᵀ] (E[x̄ x̄ᵀ] + λ₁ I)⁻¹`.

use nalgebra::DMatrix;

use crate::error::{ErqError, Result};
use crate::linalg::RidgeSystem;
use crate::moments::{cross_moment, moments_of};

pub const DEFAULT_LAMBDA1: f64 = 1e4;

#[derive(Debug, Clone)]
pub struct AqerSolution {
    pub delta_w: DMatrix<f64>,
    pub updated_w: DMatrix<f64>,
}

/// Closed-form weight adjustment from precomputed `1/N` moments:
/// `cross = E[δx x̄ᵀ]`, `raw2 = E[x̄ x̄ᵀ]`.
pub fn aqer_delta(
    w: &DMatrix<f64>,
    cross: &DMatrix<f64>,
    raw2: &DMatrix<f64>,
    lambda1: f64,
) -> Result<DMatrix<f64>> {
    let d = w.ncols();
    if cross.shape() != (d, d) || raw2.shape() != (d, d) {
        return Err(ErqError::validation(format!(
            "aqer: weight has {d} inputs but moments are {:?} / {:?}",
            cross.shape(),
            raw2.shape()
        )));
    }
    let system = RidgeSystem::new(raw2, lambda1, "aqer")?;
    let rhs = -(w * cross);
    Ok(system.solve_rows(&rhs))
}

pub fn solve_aqer(
    w: &DMatrix<f64>,
    a_fp: &DMatrix<f64>,
    a_q: &DMatrix<f64>,
    lambda1: f64,
) -> Result<AqerSolution> {
    if a_fp.ncols() != w.ncols() {
        return Err(ErqError::validation(format!(
            "aqer: weight has {} inputs, activations have {}",
            w.ncols(),
            a_fp.ncols()
        )));
    }
    let raw2 = moments_of(a_q)?.raw2;
    let cross = cross_moment(a_fp, a_q)?;
    let delta_w = aqer_delta(w, &cross, &raw2, lambda1)?;
    let updated_w = w + &delta_w;
    Ok(AqerSolution { delta_w, updated_w })
}

/// Empirical ridge objective `(1/N) Σ ‖ΔW x̄ₙ + W δxₙ‖² + λ₁‖ΔW‖²_F`.
pub fn aqer_objective(
    w: &DMatrix<f64>,
    delta_w: &DMatrix<f64>,
    a_fp: &DMatrix<f64>,
    a_q: &DMatrix<f64>,
    lambda1: f64,
) -> f64 {
    let n = a_fp.nrows() as f64;
    let dx = a_q - a_fp;
    // Rows of the residual are (ΔW x̄ₙ + W δxₙ)ᵀ.
    let residual = a_q * delta_w.transpose() + dx * w.transpose();
    residual.norm_squared() / n + lambda1 * delta_w.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn crude_quant(a: &DMatrix<f64>, step: f64) -> DMatrix<f64> {
        a.map(|v| (v / step).round() * step)
    }

    #[test]
    fn lossless_activations_leave_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = gaussian(3, 4, &mut rng);
        let a = gaussian(30, 4, &mut rng);
        let sol = solve_aqer(&w, &a, &a, 1.0).unwrap();
        assert_eq!(sol.delta_w, DMatrix::zeros(3, 4));
        assert_eq!(sol.updated_w, w);
    }

    #[test]
    fn scalar_closed_form() {
        let w = DMatrix::from_element(1, 1, 2.0);
        let cross = DMatrix::from_element(1, 1, 0.1);
        let raw2 = DMatrix::from_element(1, 1, 1.0);
        let d = aqer_delta(&w, &cross, &raw2, 1.0).unwrap();
        assert!((d[(0, 0)] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn heavy_regularization_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = gaussian(4, 6, &mut rng);
        let a = gaussian(50, 6, &mut rng);
        let q = crude_quant(&a, 0.5);
        let sol = solve_aqer(&w, &a, &q, 1e12).unwrap();
        assert!(sol.delta_w.amax() < 1e-10);
    }

    #[test]
    fn singular_system_without_ridge() {
        let w = DMatrix::from_element(2, 3, 1.0);
        // Third column identically zero: E[x̄x̄ᵀ] is singular.
        let a = DMatrix::from_fn(10, 3, |i, j| if j == 2 { 0.0 } else { (i * (j + 1)) as f64 });
        let q = crude_quant(&a, 3.0);
        assert!(matches!(solve_aqer(&w, &a, &q, 0.0), Err(ErqError::Numerical(_))));
    }

    #[test]
    fn solution_is_stationary_and_improves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = gaussian(3, 5, &mut rng);
        let a = gaussian(80, 5, &mut rng);
        let q = crude_quant(&a, 0.7);
        let lambda = 0.3;
        let sol = solve_aqer(&w, &a, &q, lambda).unwrap();
        let at = |flat: &[f64]| {
            let dw = DMatrix::from_row_slice(3, 5, flat);
            aqer_objective(&w, &dw, &a, &q, lambda)
        };
        let x0: Vec<f64> = sol.delta_w.transpose().as_slice().to_vec();
        let g = finite_diff_gradient(at, &x0, 1e-5);
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(gmax < 1e-6 * (1.0 + w.norm()), "gradient {gmax}");
        let zero = DMatrix::zeros(3, 5);
        assert!(aqer_objective(&w, &sol.delta_w, &a, &q, lambda) <= aqer_objective(&w, &zero, &a, &q, lambda));
    }

    #[test]
    fn rows_permute_with_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = gaussian(4, 3, &mut rng);
        let a = gaussian(40, 3, &mut rng);
        let q = crude_quant(&a, 0.4);
        let perm = [2usize, 0, 3, 1];
        let wp = DMatrix::from_fn(4, 3, |i, j| w[(perm[i], j)]);
        let base = solve_aqer(&w, &a, &q, 0.1).unwrap().delta_w;
        let permuted = solve_aqer(&wp, &a, &q, 0.1).unwrap().delta_w;
        for i in 0..4 {
            for j in 0..3 {
                assert!((permuted[(i, j)] - base[(perm[i], j)]).abs() < 1e-12);
            }
        }
    }
}
