//! Empirical moments of (quantized) calibration activations.
//!
//! `sigma` is the unbiased `1/(N-1)` covariance used by the output-error
//! proxy; `raw2` is the `1/N` second moment used by the ridge systems.

use nalgebra::{DMatrix, DVector};

use crate::error::{ErqError, Result};

/// Rows folded with Welford updates before blocks are merged pairwise.
const BLOCK_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub raw2: DMatrix<f64>,
    pub n: usize,
}

impl MomentSet {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `μ̂_S μ̂_Sᵀ + Σ̂_SS` restricted to a contiguous column range.
    pub fn proxy_matrix(&self, cols: std::ops::Range<usize>) -> DMatrix<f64> {
        let len = cols.len();
        let mu = self.mu.rows(cols.start, len);
        let mut m = self.sigma.view((cols.start, cols.start), (len, len)).into_owned();
        m.ger(1.0, &mu, &mu, 1.0);
        m
    }
}

/// Streaming mean / co-moment accumulator. Partial accumulators over
/// disjoint row shards merge associatively.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    dim: usize,
    n: usize,
    mean: Vec<f64>,
    // Upper triangle (row-major, full D×D storage) of Σ (x-μ)(x-μ)ᵀ.
    comoment: Vec<f64>,
    scratch: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            n: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            scratch: vec![0.0; dim],
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.n += 1;
        let inv_n = 1.0 / self.n as f64;
        let d = self.dim;
        for j in 0..d {
            let before = row[j] - self.mean[j];
            self.scratch[j] = before;
            self.mean[j] += before * inv_n;
        }
        for i in 0..d {
            let di = self.scratch[i];
            if di == 0.0 {
                continue;
            }
            let base = i * d;
            for j in i..d {
                self.comoment[base + j] += di * (row[j] - self.mean[j]);
            }
        }
    }

    /// Chan et al. pairwise combination of two partial accumulators.
    pub fn merge(&mut self, other: &MomentAccumulator) {
        assert_eq!(self.dim, other.dim, "merging accumulators of different width");
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            self.n = other.n;
            self.mean.clone_from(&other.mean);
            self.comoment.clone_from(&other.comoment);
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let d = self.dim;
        let delta: Vec<f64> = (0..d).map(|j| other.mean[j] - self.mean[j]).collect();
        let w = na * nb / n;
        for i in 0..d {
            let base = i * d;
            for j in i..d {
                self.comoment[base + j] += other.comoment[base + j] + delta[i] * delta[j] * w;
            }
        }
        for j in 0..d {
            self.mean[j] += delta[j] * nb / n;
        }
        self.n += other.n;
    }

    pub fn finish(&self) -> Result<MomentSet> {
        if self.n < 2 {
            return Err(ErqError::validation(format!(
                "moment estimation needs at least 2 samples, got {}",
                self.n
            )));
        }
        let d = self.dim;
        let n = self.n as f64;
        let mu = DVector::from_column_slice(&self.mean);
        let mut sigma = DMatrix::zeros(d, d);
        let mut raw2 = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let c = self.comoment[i * d + j];
                let s = c / (n - 1.0);
                let r = c / n + mu[i] * mu[j];
                sigma[(i, j)] = s;
                sigma[(j, i)] = s;
                raw2[(i, j)] = r;
                raw2[(j, i)] = r;
            }
        }
        Ok(MomentSet {
            mu,
            sigma,
            raw2,
            n: self.n,
        })
    }
}

/// Single pass over the rows. Rows are folded in fixed-size blocks which are
/// then merged as a balanced binary tree, so long streams never accumulate
/// into one running sum.
pub fn accumulate_moments<'a, I>(dim: usize, rows: I) -> Result<MomentSet>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut blocks = Vec::new();
    let mut current = MomentAccumulator::new(dim);
    for row in rows {
        if row.len() != dim {
            return Err(ErqError::validation(format!(
                "row of length {} in a {dim}-wide moment stream",
                row.len()
            )));
        }
        current.push(row);
        if current.count() == BLOCK_ROWS {
            blocks.push(std::mem::replace(&mut current, MomentAccumulator::new(dim)));
        }
    }
    blocks.push(current);
    while blocks.len() > 1 {
        let mut next = Vec::with_capacity(blocks.len().div_ceil(2));
        let mut it = blocks.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge(&b);
            }
            next.push(a);
        }
        blocks = next;
    }
    blocks.pop().expect("at least one block").finish()
}

/// Moments of the rows of an `N × D` matrix.
pub fn moments_of(batch: &DMatrix<f64>) -> Result<MomentSet> {
    let rows = row_buffers(batch);
    accumulate_moments(batch.ncols(), rows.chunks_exact(batch.ncols().max(1)).take(batch.nrows()))
}

fn row_buffers(batch: &DMatrix<f64>) -> Vec<f64> {
    batch.transpose().as_slice().to_vec()
}

/// Blocks of the second-moment matrix for a column split `(s, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceMoments {
    pub s: Vec<usize>,
    pub r: Vec<usize>,
    pub e_ss: DMatrix<f64>,
    pub e_sr: DMatrix<f64>,
    pub e_rr: DMatrix<f64>,
    pub mu_s: DVector<f64>,
}

impl SliceMoments {
    /// Extracts the blocks from `raw2` without re-summing any samples.
    pub fn extract(m: &MomentSet, s: &[usize], r: &[usize]) -> Result<Self> {
        let d = m.dim();
        let mut seen = vec![false; d];
        for &c in s.iter().chain(r) {
            if c >= d {
                return Err(ErqError::validation(format!("column {c} out of range for width {d}")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(ErqError::validation(format!(
                    "column {c} appears in more than one index set"
                )));
            }
        }
        let pick = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| m.raw2[(rows[i], cols[j])])
        };
        Ok(Self {
            s: s.to_vec(),
            r: r.to_vec(),
            e_ss: pick(s, s),
            e_sr: pick(s, r),
            e_rr: pick(r, r),
            mu_s: DVector::from_iterator(s.len(), s.iter().map(|&c| m.mu[c])),
        })
    }
}

/// `Ê[δx x̄ᵀ]` with `δx = x̄ - x`, using the `1/N` normalization.
pub fn cross_moment(fp: &DMatrix<f64>, quantized: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if fp.shape() != quantized.shape() {
        return Err(ErqError::validation(format!(
            "paired batches differ in shape: {:?} vs {:?}",
            fp.shape(),
            quantized.shape()
        )));
    }
    let n = fp.nrows();
    if n == 0 {
        return Err(ErqError::validation("cross moment of an empty batch"));
    }
    let delta = quantized - fp;
    Ok(delta.tr_mul(quantized) / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * (1.0 + j as f64) + 3.0 * j as f64
        })
    }

    // Two-pass textbook estimators, kept independent of the streaming path.
    fn two_pass(batch: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (n, d) = batch.shape();
        let mut mu = DVector::zeros(d);
        for i in 0..n {
            for j in 0..d {
                mu[j] += batch[(i, j)];
            }
        }
        mu /= n as f64;
        let mut sigma = DMatrix::zeros(d, d);
        let mut raw2 = DMatrix::zeros(d, d);
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    sigma[(a, b)] += (batch[(i, a)] - mu[a]) * (batch[(i, b)] - mu[b]);
                    raw2[(a, b)] += batch[(i, a)] * batch[(i, b)];
                }
            }
        }
        (mu, sigma / (n as f64 - 1.0), raw2 / n as f64)
    }

    fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let scale = b.amax().max(1e-300);
        (a - b).amax() / scale
    }

    #[test]
    fn two_symmetric_rows() {
        let m = accumulate_moments(2, [&[1.0, 0.0][..], &[-1.0, 0.0][..]]).unwrap();
        assert_eq!(m.mu.as_slice(), &[0.0, 0.0]);
        assert_eq!(m.sigma, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert_eq!(m.raw2, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn identical_rows_have_zero_variance() {
        let v = [0.5, -2.0, 3.0];
        let m = accumulate_moments(3, std::iter::repeat_n(&v[..], 7)).unwrap();
        assert!(m.sigma.amax() == 0.0);
        let vv = DVector::from_column_slice(&v);
        assert!((&m.raw2 - &vv * vv.transpose()).amax() < 1e-15);
        assert_eq!(m.mu, vv);
    }

    #[test]
    fn needs_two_samples() {
        assert!(accumulate_moments(2, [&[1.0, 2.0][..]]).is_err());
        assert!(accumulate_moments(2, std::iter::empty()).is_err());
    }

    #[test]
    fn standard_normal_covariance_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = DMatrix::from_fn(100_000, 4, |_, _| StandardNormal.sample(&mut rng));
        let m = moments_of(&batch).unwrap();
        assert!((m.sigma - DMatrix::<f64>::identity(4, 4)).amax() < 0.05);
    }

    #[test]
    fn streaming_matches_two_pass_across_blocks() {
        let batch = random_batch(3 * BLOCK_ROWS + 17, 5, 9);
        let m = moments_of(&batch).unwrap();
        let (mu, sigma, raw2) = two_pass(&batch);
        assert!((&m.mu - &mu).amax() / mu.amax() < 1e-10);
        assert!(max_rel(&m.sigma, &sigma) < 1e-10);
        assert!(max_rel(&m.raw2, &raw2) < 1e-10);
    }

    #[test]
    fn raw_moment_identity() {
        let m = moments_of(&random_batch(300, 6, 2)).unwrap();
        let n = m.n as f64;
        let rebuilt = &m.sigma * ((n - 1.0) / n) + &m.mu * m.mu.transpose();
        assert!(max_rel(&rebuilt, &m.raw2) < 1e-9);
        assert_eq!(m.raw2, m.raw2.transpose());
        assert!(m.raw2.clone().symmetric_eigenvalues().min() > -1e-9);
    }

    #[test]
    fn identity_blocks() {
        let m = MomentSet {
            mu: DVector::zeros(4),
            sigma: DMatrix::identity(4, 4),
            raw2: DMatrix::identity(4, 4),
            n: 10,
        };
        let sm = SliceMoments::extract(&m, &[0, 1], &[2, 3]).unwrap();
        assert_eq!(sm.e_ss, DMatrix::identity(2, 2));
        assert_eq!(sm.e_rr, DMatrix::identity(2, 2));
        assert_eq!(sm.e_sr, DMatrix::zeros(2, 2));
        assert!(SliceMoments::extract(&m, &[0, 1], &[1, 3]).is_err());
    }

    #[test]
    fn blocks_match_direct_raw2() {
        let batch = random_batch(50, 6, 5);
        let m = moments_of(&batch).unwrap();
        let (_, _, raw2) = two_pass(&batch);
        let (s, r) = ([0usize, 1, 2], [3usize, 4, 5]);
        let sm = SliceMoments::extract(&m, &s, &r).unwrap();
        for (a, &i) in s.iter().enumerate() {
            for (b, &j) in r.iter().enumerate() {
                assert!((sm.e_sr[(a, b)] - raw2[(i, j)]).abs() <= 1e-10 * raw2.amax());
            }
            for (b, &j) in s.iter().enumerate() {
                assert!((sm.e_ss[(a, b)] - raw2[(i, j)]).abs() <= 1e-10 * raw2.amax());
            }
        }
    }

    #[test]
    fn exact_quantization_has_zero_cross_moment() {
        let batch = random_batch(20, 3, 1);
        assert_eq!(cross_moment(&batch, &batch).unwrap(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn proxy_matrix_adds_mean_outer_product() {
        let m = moments_of(&random_batch(40, 4, 8)).unwrap();
        let p = m.proxy_matrix(1..3);
        for a in 0..2 {
            for b in 0..2 {
                let want = m.sigma[(a + 1, b + 1)] + m.mu[a + 1] * m.mu[b + 1];
                assert!((p[(a, b)] - want).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn row_order_does_not_matter(seed in 0u64..1000, n in 2usize..40) {
            let batch = random_batch(n, 3, seed);
            let reversed = DMatrix::from_fn(n, 3, |i, j| batch[(n - 1 - i, j)]);
            let a = moments_of(&batch).unwrap();
            let b = moments_of(&reversed).unwrap();
            prop_assert!(max_rel(&a.raw2, &b.raw2) < 1e-12);
            prop_assert_eq!(&a.sigma, &a.sigma.transpose());
        }

        #[test]
        fn merge_equals_sequential(seed in 0u64..1000, split in 1usize..30) {
            let batch = random_batch(31, 3, seed);
            let rows = row_buffers(&batch);
            let mut left = MomentAccumulator::new(3);
            let mut right = MomentAccumulator::new(3);
            for (i, r) in rows.chunks_exact(3).enumerate() {
                if i < split { left.push(r) } else { right.push(r) }
            }
            left.merge(&right);
            let merged = left.finish().unwrap();
            let direct = moments_of(&batch).unwrap();
            prop_assert!(max_rel(&merged.sigma, &direct.sigma) < 1e-10);
        }
    }
}
