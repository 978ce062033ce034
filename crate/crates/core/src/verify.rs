//! Self-check suites run by `erq verify`.
//!
//! Each suite draws its own random instances from the configured seed,
//! compares an optimized computation against an independent reference and
//! reports its worst-case metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::aqer::{aqer_objective, solve_aqer};
use crate::moments::{moments_of, SliceMoments};
use crate::oracle::{brute_force_rounding, finite_diff_gradient, mc_output_error, pearson};
use crate::quant::{max_code, quantize_log_sqrt2, quantize_uniform, LogSqrt2Params, UniformParams};
use crate::wqer::{proxy_gradient, proxy_value, ridge_correct_remainder, rounding_refinement, RoundingState};

/// Signature of the proxy gradient under test.
pub type GradientFn = fn(&[f64], &DMatrix<f64>) -> Vec<f64>;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Gradient checked by the gradient suite; replaceable for fault injection.
    pub gradient: GradientFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            gradient: proxy_gradient,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub checks: usize,
    pub failures: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

struct Suite {
    name: &'static str,
    checks: usize,
    failures: Vec<String>,
    metrics: BTreeMap<String, f64>,
    start: Instant,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            checks: 0,
            failures: Vec::new(),
            metrics: BTreeMap::new(),
            start: Instant::now(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }

    fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name.to_string(),
            passed: self.failures.is_empty(),
            checks: self.checks,
            failures: self.failures,
            metrics: self.metrics,
            elapsed_s: self.start.elapsed().as_secs_f64(),
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Random mean and covariance `AAᵀ/d + 0.1 I`.
pub fn random_gaussian_model(d: usize, rng: &mut ChaCha8Rng) -> (DVector<f64>, DMatrix<f64>) {
    let mu = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let a = gaussian(d, d, rng);
    let sigma = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1;
    (mu, sigma)
}

/// `n` samples of `N(μ, Σ)` as rows.
pub fn sample_gaussian(mu: &DVector<f64>, sigma: &DMatrix<f64>, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let l = sigma.clone().cholesky().expect("covariance is positive definite").l();
    let z = gaussian(n, mu.len(), rng);
    let mut x = z * l.transpose();
    for mut row in x.row_iter_mut() {
        row += mu.transpose();
    }
    x
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn suite_quantizers() -> SuiteResult {
    let mut s = Suite::new("quantizers");
    let p = UniformParams {
        scale: 1.0,
        zero_point: 0,
        bits: 2,
    };
    let (codes, deq) = quantize_uniform(&[-0.4, 0.6, 2.7, 5.0], &p);
    s.check(codes == [0, 1, 3, 3] && deq == [0.0, 1.0, 3.0, 3.0], || {
        format!("uniform s=1 z=0 b=2: codes {codes:?}, values {deq:?}")
    });
    let p4 = UniformParams {
        scale: 1.0,
        zero_point: 0,
        bits: 4,
    };
    let ties = quantize_uniform(&[0.5, 1.5, 2.5], &p4).0;
    s.check(ties == [0, 2, 2], || format!("ties-to-even: {ties:?}"));
    let lat = UniformParams {
        scale: 0.25,
        zero_point: 3,
        bits: 3,
    };
    let grid: Vec<f64> = (0..8).map(|q| lat.dequant(q)).collect();
    let back = quantize_uniform(&grid, &lat).1;
    s.check(back == grid, || "uniform lattice points not fixed".into());

    let lp = LogSqrt2Params { scale: 1.0, bits: 4 };
    let (codes, deq) = quantize_log_sqrt2(&[1.0, 0.5, 2f64.powf(-0.5)], &lp);
    s.check(
        codes == [0, 2, 1] && deq[0] == 1.0 && deq[1] == 0.5 && (deq[2] - 2f64.powf(-0.5)).abs() < 1e-15,
        || format!("log√2 hand cases: codes {codes:?}, values {deq:?}"),
    );
    let small = LogSqrt2Params { scale: 1.0, bits: 3 };
    let zero = quantize_log_sqrt2(&[0.0], &small);
    s.check(zero.0 == [7] && zero.1[0] == small.floor_value(), || {
        format!("log√2 zero input: {zero:?}")
    });
    for bits in [3u32, 4, 8] {
        let p = LogSqrt2Params { scale: 0.7, bits };
        for m in 0..=max_code(bits) {
            let v = p.dequant(m);
            s.check(p.code(v) == m && p.fake_quant(v) == v, || {
                format!("log√2 fixed point b={bits} code={m}")
            });
        }
    }
    s.finish()
}

/// Proxy against sample-average output error, and against the analytic
/// expectation under exact moments.
pub fn suite_proxy_fidelity(seed: u64) -> SuiteResult {
    let mut s = Suite::new("proxy_fidelity");
    let (d, n, trials) = (64, 10_000, 100);
    let mut rng = rng_for(seed, 1);
    let (mu, sigma) = random_gaussian_model(d, &mut rng);
    let batch = sample_gaussian(&mu, &sigma, n, &mut rng);
    let mut m = sigma.clone();
    m.ger(1.0, &mu, &mu, 1.0);
    let chol_l = sigma.clone().cholesky().expect("positive definite").l();

    let mut proxies = Vec::with_capacity(trials);
    let mut mcs = Vec::with_capacity(trials);
    let mut worst_analytic = 0.0f64;
    for _ in 0..trials {
        let magnitude = 10f64.powf(rng.random_range(-2.0..0.0));
        let delta: Vec<f64> = (0..d).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); magnitude * z }).collect();
        let p = proxy_value(&delta, &m);
        proxies.push(p);
        mcs.push(mc_output_error(&delta, &batch));
        let dv = DVector::from_column_slice(&delta);
        let analytic = dv.dot(&mu).powi(2) + (chol_l.transpose() * &dv).norm_squared();
        worst_analytic = worst_analytic.max((p - analytic).abs() / analytic.abs().max(f64::MIN_POSITIVE));
    }
    let r = pearson(&proxies, &mcs);
    s.metric("pearson_r", r);
    s.metric("max_rel_err_analytic", worst_analytic);
    s.check(r >= 0.9, || format!("pearson r = {r} < 0.9"));
    s.check(worst_analytic <= 1e-9, || {
        format!("proxy vs analytic expectation relative error {worst_analytic}")
    });
    s.finish()
}

/// Analytic proxy gradient against central differences.
pub fn suite_gradient(seed: u64, gradient: GradientFn) -> SuiteResult {
    let mut s = Suite::new("gradient");
    let mut rng = rng_for(seed, 2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(1..=24);
        let (mu, sigma) = random_gaussian_model(d, &mut rng);
        let mut m = sigma;
        m.ger(1.0, &mu, &mu, 1.0);
        let delta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let g = gradient(&delta, &m);
        let fd = finite_diff_gradient(|x| proxy_value(x, &m), &delta, 1e-6);
        let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let tol = 1e-6 * (1.0 + max_abs(&fd));
        worst = worst.max(err / (1.0 + max_abs(&fd)));
        s.check(g.len() == d && err <= tol, || format!("d={d}: gradient error {err} > {tol}"));
    }
    s.metric("max_scaled_err", worst);
    s.finish()
}

/// Closed-form activation error reduction is a stationary point and beats
/// leaving the weights alone.
pub fn suite_aqer(seed: u64) -> SuiteResult {
    let mut s = Suite::new("aqer_optimality");
    let mut rng = rng_for(seed, 3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d_in = rng.random_range(2..=64);
        let d_out = rng.random_range(1..=16);
        let n = rng.random_range(4 * d_in..8 * d_in);
        let lambda = 10f64.powf(rng.random_range(-3.0..1.0));
        let w = gaussian(d_out, d_in, &mut rng);
        let (mu, sigma) = random_gaussian_model(d_in, &mut rng);
        let a = sample_gaussian(&mu, &sigma, n, &mut rng);
        let step = rng.random_range(0.1..0.8);
        let q = a.map(|v| (v / step).round() * step);
        let sol = match solve_aqer(&w, &a, &q, lambda) {
            Ok(sol) => sol,
            Err(e) => {
                s.check(false, || format!("solve failed: {e}"));
                continue;
            }
        };
        let x0: Vec<f64> = sol.delta_w.transpose().as_slice().to_vec();
        let g = finite_diff_gradient(
            |flat| aqer_objective(&w, &DMatrix::from_row_slice(d_out, d_in, flat), &a, &q, lambda),
            &x0,
            1e-5,
        );
        let gmax = max_abs(&g);
        let bound = 1e-6 * (1.0 + w.norm());
        worst = worst.max(gmax / (1.0 + w.norm()));
        s.check(gmax < bound, || format!("{d_out}x{d_in}: gradient max-norm {gmax} ≥ {bound}"));
        let at_sol = aqer_objective(&w, &sol.delta_w, &a, &q, lambda);
        let at_zero = aqer_objective(&w, &DMatrix::zeros(d_out, d_in), &a, &q, lambda);
        s.check(at_sol <= at_zero, || format!("objective {at_sol} above zero-update {at_zero}"));
    }
    s.metric("max_scaled_grad", worst);
    s.finish()
}

/// A random rounding instance: weights on a 4-bit lattice and a proxy matrix
/// from Gaussian moments.
pub fn random_rounding_instance(d: usize, rng: &mut ChaCha8Rng) -> (RoundingState, DMatrix<f64>) {
    let (mu, sigma) = random_gaussian_model(d, rng);
    let mut m = sigma;
    m.ger(1.0, &mu, &mu, 1.0);
    let p = UniformParams {
        scale: 0.1,
        zero_point: 8,
        bits: 4,
    };
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.7)).collect();
    (RoundingState::nearest(&w, &p), m)
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundingStats {
    pub instances: usize,
    pub monotone_violations: usize,
    pub worse_than_nearest: usize,
    /// Cases where refinement made no progress although nearest was not optimal.
    pub stuck_suboptimal: usize,
    pub improved: usize,
    pub brute_force_optimal: usize,
    pub median_gap_ratio: f64,
    pub max_gap_ratio: f64,
}

/// Runs rounding refinement on random instances of dimension ≤ `max_d`,
/// comparing against exhaustive enumeration.
pub fn rounding_stats(seed: u64, instances: usize, max_d: usize) -> RoundingStats {
    let mut rng = rng_for(seed, 4);
    let mut stats = RoundingStats {
        instances,
        monotone_violations: 0,
        worse_than_nearest: 0,
        stuck_suboptimal: 0,
        improved: 0,
        brute_force_optimal: 0,
        median_gap_ratio: 0.0,
        max_gap_ratio: 0.0,
    };
    let mut gaps = Vec::with_capacity(instances);
    for _ in 0..instances {
        let d = rng.random_range(1..=max_d);
        let (mut st, m) = random_rounding_instance(d, &mut rng);
        let bf = brute_force_rounding(&st.delta_down, &st.delta_up, &m).expect("small instance");
        let committed = rounding_refinement(&mut st, &m, 1, 100);
        if committed.windows(2).any(|w| w[1] > w[0]) {
            stats.monotone_violations += 1;
        }
        let (nearest, refined) = (committed[0], *committed.last().expect("non-empty"));
        let tol = 1e-12 * nearest.abs().max(1e-300);
        if refined > nearest {
            stats.worse_than_nearest += 1;
        } else if refined < nearest {
            stats.improved += 1;
        } else if nearest > bf.best_proxy + tol {
            stats.stuck_suboptimal += 1;
        }
        if refined <= bf.best_proxy + tol {
            stats.brute_force_optimal += 1;
        }
        gaps.push(if bf.best_proxy > 0.0 { refined / bf.best_proxy } else { 1.0 });
    }
    gaps.sort_by(f64::total_cmp);
    stats.median_gap_ratio = gaps[gaps.len() / 2];
    stats.max_gap_ratio = *gaps.last().expect("non-empty");
    stats
}

/// Refinement never increases the proxy, never ends above nearest rounding
/// and never beats the exhaustive optimum. The gap to the optimum is reported.
pub fn suite_rounding(seed: u64) -> SuiteResult {
    let mut s = Suite::new("brute_force_dominance");
    let stats = rounding_stats(seed, 100, 12);
    s.check(stats.monotone_violations == 0, || {
        format!("{} instances with an increasing committed proxy", stats.monotone_violations)
    });
    s.check(stats.worse_than_nearest == 0, || {
        format!("{} instances ended above nearest rounding", stats.worse_than_nearest)
    });
    s.check(stats.max_gap_ratio >= 1.0 - 1e-12 || stats.max_gap_ratio.is_nan(), || {
        "refinement beat exhaustive enumeration".into()
    });
    s.metric("median_gap_ratio", stats.median_gap_ratio);
    s.metric("max_gap_ratio", stats.max_gap_ratio);
    s.metric("improved", stats.improved as f64);
    s.metric("stuck_suboptimal", stats.stuck_suboptimal as f64);
    s.metric("brute_force_optimal", stats.brute_force_optimal as f64);

    // Worst case for the enumeration bound used by the checks above.
    let mut rng = rng_for(seed, 5);
    let (st, m) = random_rounding_instance(12, &mut rng);
    let t = Instant::now();
    let bf = brute_force_rounding(&st.delta_down, &st.delta_up, &m).expect("d=12");
    s.metric("d12_enumeration_s", t.elapsed().as_secs_f64());
    s.metric("d12_evaluated", bf.evaluated as f64);
    s.finish()
}

/// Ridge compensation of the remaining weights is a stationary point of the
/// sample-average slice objective.
pub fn suite_ridge(seed: u64) -> SuiteResult {
    let mut s = Suite::new("ridge_optimality");
    let mut rng = rng_for(seed, 6);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = rng.random_range(2..=32);
        let n = rng.random_range(4 * d..8 * d);
        let lambda = 10f64.powf(rng.random_range(-3.0..1.0));
        let (mu, sigma) = random_gaussian_model(d, &mut rng);
        let x = sample_gaussian(&mu, &sigma, n, &mut rng);
        // Random disjoint split, not necessarily contiguous.
        let mut cols: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            cols.swap(i, rng.random_range(0..=i));
        }
        let cut = rng.random_range(1..d);
        let (sidx, ridx) = cols.split_at(cut);
        let moments = match moments_of(&x) {
            Ok(m) => m,
            Err(e) => {
                s.check(false, || format!("moments: {e}"));
                continue;
            }
        };
        let sm = SliceMoments::extract(&moments, sidx, ridx).expect("disjoint split");
        let delta_s: Vec<f64> = (0..sidx.len()).map(|_| rng.random_range(-0.05..0.05)).collect();
        let sol = match ridge_correct_remainder(&delta_s, &sm, lambda) {
            Ok(v) => v,
            Err(e) => {
                s.check(false, || format!("ridge solve: {e}"));
                continue;
            }
        };
        let objective = |corr: &[f64]| {
            let mut total = 0.0;
            for row in x.row_iter() {
                let mut e = 0.0;
                for (k, &c) in sidx.iter().enumerate() {
                    e += delta_s[k] * row[c];
                }
                for (k, &c) in ridx.iter().enumerate() {
                    e += corr[k] * row[c];
                }
                total += e * e;
            }
            total / n as f64 + lambda * corr.iter().map(|v| v * v).sum::<f64>()
        };
        let x0: Vec<f64> = sol.iter().copied().collect();
        let g = finite_diff_gradient(objective, &x0, 1e-5);
        let g0 = finite_diff_gradient(objective, &vec![0.0; ridx.len()], 1e-5);
        let rel = max_abs(&g) / max_abs(&g0).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        s.check(rel <= 1e-6, || format!("d={d} |s|={cut}: relative gradient {rel}"));
    }
    s.metric("max_rel_grad", worst);
    s.finish()
}

pub fn run_all(opts: &VerifyOptions) -> VerifySummary {
    let suites = vec![
        suite_quantizers(),
        suite_proxy_fidelity(opts.seed),
        suite_gradient(opts.seed, opts.gradient),
        suite_aqer(opts.seed),
        suite_rounding(opts.seed),
        suite_ridge(opts.seed),
    ];
    VerifySummary {
        passed: suites.iter().all(|s| s.passed),
        suites,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped_gradient(delta: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
        proxy_gradient(delta, m).into_iter().map(|g| -g).collect()
    }

    #[test]
    fn all_suites_pass_by_default() {
        let summary = run_all(&VerifyOptions::default());
        for s in &summary.suites {
            assert!(s.passed, "{}: {:?}", s.name, s.failures);
        }
        assert!(summary.passed);
    }

    #[test]
    fn sign_fault_is_caught() {
        assert!(!suite_gradient(0, flipped_gradient).passed);
    }

    #[test]
    fn gaussian_sampler_moments() {
        let mut rng = rng_for(9, 0);
        let (mu, sigma) = random_gaussian_model(4, &mut rng);
        let x = sample_gaussian(&mu, &sigma, 50_000, &mut rng);
        let m = moments_of(&x).unwrap();
        assert!((m.mu - mu).amax() < 0.05);
        assert!((m.sigma - sigma).amax() < 0.05);
    }
}
