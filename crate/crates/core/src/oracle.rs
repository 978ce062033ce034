//! Reference computations used to check the optimized paths: exhaustive
//! rounding search, sample-average output error, the end-to-end layer MSE
//! and central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::error::{ErqError, Result};

pub const MAX_BRUTE_FORCE_DIM: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub best_delta: Vec<f64>,
    /// `true` where the optimum takes the ceil-side error.
    pub best_choice: Vec<bool>,
    pub best_proxy: f64,
    pub evaluated: usize,
}

fn quadratic_form(v: &[f64], m: &DMatrix<f64>) -> f64 {
    let d = v.len();
    let mut total = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += m[(i, j)] * v[j];
        }
        total += v[i] * row;
    }
    total
}

/// Enumerates every floor/ceil assignment of the rounding errors and returns
/// the one minimizing `δ M δᵀ`. Coordinates where both sides coincide
/// (saturated or already on the lattice) contribute a single option.
/// Assignments are visited in lexicographic order (floor before ceil,
/// coordinate 0 most significant) and only a strictly better proxy
/// replaces the incumbent.
pub fn brute_force_rounding(down: &[f64], up: &[f64], m: &DMatrix<f64>) -> Result<BruteForceResult> {
    let d = down.len();
    if up.len() != d || m.shape() != (d, d) {
        return Err(ErqError::validation("brute force: dimension mismatch"));
    }
    if d > MAX_BRUTE_FORCE_DIM {
        return Err(ErqError::validation(format!(
            "brute force enumeration limited to {MAX_BRUTE_FORCE_DIM} dimensions, got {d}"
        )));
    }
    let free: Vec<usize> = (0..d).filter(|&j| down[j] != up[j]).collect();
    let f = free.len();
    let mut delta = down.to_vec();
    let mut best: Option<(f64, u64)> = None;
    for mask in 0..(1u64 << f) {
        for (bit, &j) in free.iter().enumerate() {
            let ceil = (mask >> (f - 1 - bit)) & 1 == 1;
            delta[j] = if ceil { up[j] } else { down[j] };
        }
        let p = quadratic_form(&delta, m);
        if best.is_none_or(|(b, _)| p < b) {
            best = Some((p, mask));
        }
    }
    let (best_proxy, mask) = best.expect("at least one assignment");
    let mut best_choice = vec![false; d];
    for (bit, &j) in free.iter().enumerate() {
        best_choice[j] = (mask >> (f - 1 - bit)) & 1 == 1;
    }
    let best_delta = (0..d)
        .map(|j| if best_choice[j] { up[j] } else { down[j] })
        .collect();
    Ok(BruteForceResult {
        best_delta,
        best_choice,
        best_proxy,
        evaluated: 1usize << f,
    })
}

/// `(1/N) Σₙ (δ · x̄ₙ)²` over the rows of `batch`.
pub fn mc_output_error(delta: &[f64], batch: &DMatrix<f64>) -> f64 {
    assert_eq!(delta.len(), batch.ncols(), "error vector / batch width mismatch");
    let n = batch.nrows();
    if n == 0 {
        return 0.0;
    }
    let out = batch * DVector::from_column_slice(delta);
    out.norm_squared() / n as f64
}

/// `(1/N) Σₙ ‖W xₙ − W̄ x̄ₙ‖²` over paired full-precision and quantized
/// activation rows.
pub fn layer_mse(
    w_fp: &DMatrix<f64>,
    a_fp: &DMatrix<f64>,
    w_q: &DMatrix<f64>,
    a_q: &DMatrix<f64>,
) -> f64 {
    let n = a_fp.nrows();
    if n == 0 {
        return 0.0;
    }
    let diff = a_fp * w_fp.transpose() - a_q * w_q.transpose();
    diff.norm_squared() / n as f64
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Sample Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_dimensional_picks_nearest() {
        let m = DMatrix::from_element(1, 1, 2.5);
        let r = brute_force_rounding(&[-0.3], &[0.7], &m).unwrap();
        assert_eq!(r.best_delta, vec![-0.3]);
        assert_eq!(r.evaluated, 2);
    }

    #[test]
    fn identity_is_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let down: Vec<f64> = (0..8).map(|_| -rng.random::<f64>()).collect();
        let up: Vec<f64> = down.iter().map(|d| d + 1.0).collect();
        let r = brute_force_rounding(&down, &up, &DMatrix::identity(8, 8)).unwrap();
        for j in 0..8 {
            let want = if down[j].abs() <= up[j].abs() { down[j] } else { up[j] };
            assert_eq!(r.best_delta[j], want);
        }
    }

    #[test]
    fn saturated_coordinates_are_fixed() {
        let r = brute_force_rounding(&[-0.2, 0.4, -0.5], &[0.8, 0.4, 0.5], &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(r.evaluated, 4);
        assert_eq!(r.best_delta[1], 0.4);
        // Exact tie at coordinate 2 resolves to floor.
        assert_eq!(r.best_delta[2], -0.5);
    }

    #[test]
    fn rejects_oversized_instances() {
        let n = MAX_BRUTE_FORCE_DIM + 1;
        let err = brute_force_rounding(&vec![0.0; n], &vec![1.0; n], &DMatrix::identity(n, n));
        assert!(err.is_err());
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 7;
        let a = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        let m = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        let down: Vec<f64> = (0..d).map(|_| -rng.random::<f64>()).collect();
        let up: Vec<f64> = down.iter().map(|v| v + 1.0).collect();
        let perm = [3usize, 6, 0, 2, 5, 1, 4];
        let mp = DMatrix::from_fn(d, d, |i, j| m[(perm[i], perm[j])]);
        let dp: Vec<f64> = perm.iter().map(|&p| down[p]).collect();
        let upp: Vec<f64> = perm.iter().map(|&p| up[p]).collect();
        let base = brute_force_rounding(&down, &up, &m).unwrap();
        let permuted = brute_force_rounding(&dp, &upp, &mp).unwrap();
        for i in 0..d {
            assert_eq!(permuted.best_delta[i], base.best_delta[perm[i]]);
        }
        assert!((permuted.best_proxy - base.best_proxy).abs() < 1e-12);
    }

    #[test]
    fn mc_error_cases() {
        let batch = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert!((mc_output_error(&[0.3, -0.1], &batch) - 0.04).abs() < 1e-15);
        assert_eq!(mc_output_error(&[0.0, 0.0], &batch), 0.0);
    }

    #[test]
    fn layer_mse_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut mat = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() - 0.5);
        let (w, wq, a, aq) = (mat(3, 4), mat(3, 4), mat(9, 4), mat(9, 4));
        let mut want = 0.0;
        for n in 0..9 {
            for i in 0..3 {
                let mut y = 0.0;
                for j in 0..4 {
                    y += w[(i, j)] * a[(n, j)] - wq[(i, j)] * aq[(n, j)];
                }
                want += y * y;
            }
        }
        want /= 9.0;
        assert!((layer_mse(&w, &a, &wq, &aq) - want).abs() < 1e-12);
        assert_eq!(layer_mse(&w, &a, &w, &a), 0.0);
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_gradient(|x| x[0] * x[0] + x[1] * x[1], &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        assert_eq!(finite_diff_gradient(|_| 3.0, &[1.0, 2.0], 1e-5), vec![0.0, 0.0]);
    }
}
