//! Weight quantization error reduction.
//!
//! Each output channel is quantized in rounds. A round takes the leading
//! half (rounded up) of the still-unquantized weights, picks floor or ceil
//! for each of them by minimizing the Gaussian output-error proxy
//! `δ (μμᵀ + Σ) δᵀ`, and then shifts the remaining full-precision weights
//! with a ridge solve so that they absorb what the rounding left behind.
//!
//! Errors follow `δ = W̄ − W`: a floor error is `≤ 0` and a ceil error `≥ 0`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ErqError, Result};
use crate::linalg::RidgeSystem;
use crate::moments::{MomentSet, SliceMoments};
use crate::quant::UniformParams;

pub const DEFAULT_K: usize = 1;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_LAMBDA2: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WqerConfig {
    /// Rounding directions overturned per refinement step.
    pub k: usize,
    /// Refinement step budget per slice.
    pub max_iter: usize,
    pub lambda2: f64,
    /// Run rounding refinement (otherwise keep round-to-nearest).
    pub rounding: bool,
    /// Run the ridge correction of the remaining weights.
    pub ridge: bool,
}

impl Default for WqerConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_iter: DEFAULT_MAX_ITER,
            lambda2: DEFAULT_LAMBDA2,
            rounding: true,
            ridge: true,
        }
    }
}

/// `δ M δᵀ`.
pub fn proxy_value(delta: &[f64], m: &DMatrix<f64>) -> f64 {
    let d = delta.len();
    debug_assert_eq!(m.shape(), (d, d));
    let mut total = 0.0;
    for j in 0..d {
        let col = m.column(j);
        let mut acc = 0.0;
        for i in 0..d {
            acc += col[i] * delta[i];
        }
        total += acc * delta[j];
    }
    total
}

/// `2 δ M` for symmetric `M`.
pub fn proxy_gradient(delta: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
    let d = delta.len();
    (0..d)
        .map(|j| {
            let col = m.column(j);
            2.0 * (0..d).map(|i| col[i] * delta[i]).sum::<f64>()
        })
        .collect()
}

/// Indices of the `k` largest `|g_j|` among flippable coordinates whose
/// gradient and error share a sign (`g_j δ_j ≥ 0`). Ties go to the lower index.
pub fn select_flip_set(delta: &[f64], grad: &[f64], flippable: &[bool], k: usize) -> Vec<usize> {
    let mut candidates: Vec<(f64, usize)> = (0..delta.len())
        .filter(|&j| flippable[j] && grad[j] * delta[j] >= 0.0)
        .map(|j| (grad[j].abs(), j))
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Floor/ceil alternatives for a slice of weights under a fixed lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundingState {
    pub code_down: Vec<i64>,
    pub code_up: Vec<i64>,
    pub delta_down: Vec<f64>,
    pub delta_up: Vec<f64>,
    /// `true` where the ceil side is currently chosen.
    pub use_up: Vec<bool>,
}

impl RoundingState {
    /// Round-to-nearest initialization.
    pub fn nearest(weights: &[f64], p: &UniformParams) -> Self {
        let d = weights.len();
        let mut st = Self {
            code_down: Vec::with_capacity(d),
            code_up: Vec::with_capacity(d),
            delta_down: Vec::with_capacity(d),
            delta_up: Vec::with_capacity(d),
            use_up: Vec::with_capacity(d),
        };
        for &w in weights {
            let (lo, hi, near) = (p.floor_code(w), p.ceil_code(w), p.code(w));
            st.code_down.push(lo);
            st.code_up.push(hi);
            st.delta_down.push(p.dequant(lo) - w);
            st.delta_up.push(p.dequant(hi) - w);
            st.use_up.push(near == hi && near != lo);
        }
        st
    }

    pub fn len(&self) -> usize {
        self.use_up.len()
    }

    pub fn is_empty(&self) -> bool {
        self.use_up.is_empty()
    }

    pub fn delta(&self) -> Vec<f64> {
        (0..self.len())
            .map(|j| if self.use_up[j] { self.delta_up[j] } else { self.delta_down[j] })
            .collect()
    }

    pub fn codes(&self) -> Vec<i64> {
        (0..self.len())
            .map(|j| if self.use_up[j] { self.code_up[j] } else { self.code_down[j] })
            .collect()
    }

    /// Coordinates with two distinct rounding targets. Clipped weights and
    /// weights already on the lattice have only one.
    pub fn flippable(&self) -> Vec<bool> {
        (0..self.len()).map(|j| self.code_down[j] != self.code_up[j]).collect()
    }

    pub fn overturn(&mut self, idx: &[usize]) {
        for &j in idx {
            self.use_up[j] = !self.use_up[j];
        }
    }
}

/// Gradient-guided flipping of rounding directions. Returns the committed
/// proxy values, starting with the initial one; the sequence never increases.
pub fn rounding_refinement(
    state: &mut RoundingState,
    m: &DMatrix<f64>,
    k: usize,
    max_iter: usize,
) -> Vec<f64> {
    let flippable = state.flippable();
    let mut delta = state.delta();
    let mut committed = vec![proxy_value(&delta, m)];
    for _ in 0..max_iter {
        let old = *committed.last().expect("non-empty");
        let grad = proxy_gradient(&delta, m);
        let flips = select_flip_set(&delta, &grad, &flippable, k);
        if flips.is_empty() {
            break;
        }
        state.overturn(&flips);
        let trial = state.delta();
        let now = proxy_value(&trial, m);
        if now > old {
            state.overturn(&flips);
            break;
        }
        delta = trial;
        committed.push(now);
    }
    committed
}

/// `ΔW_r* = −δ_s E[x̄ˢ x̄ʳᵀ] (E[x̄ʳ x̄ʳᵀ] + λ₂I)⁻¹` given the factorized system.
pub fn ridge_correction(delta_s: &[f64], e_sr: &DMatrix<f64>, system: &RidgeSystem) -> DVector<f64> {
    let rhs = -(e_sr.tr_mul(&DVector::from_column_slice(delta_s)));
    system.solve(&rhs)
}

/// Convenience form that factorizes `E_rr + λ₂I` on the spot.
pub fn ridge_correct_remainder(delta_s: &[f64], sm: &SliceMoments, lambda2: f64) -> Result<DVector<f64>> {
    if sm.r.is_empty() {
        return Err(ErqError::validation("ridge correction needs a non-empty remainder"));
    }
    if delta_s.len() != sm.s.len() {
        return Err(ErqError::validation("ridge correction: error vector does not match slice"));
    }
    let system = RidgeSystem::new(&sm.e_rr, lambda2, "wqer ridge")?;
    Ok(ridge_correction(delta_s, &sm.e_sr, &system))
}

/// Column ranges quantized by successive rounds: the first `ceil(n/2)` of
/// whatever remains.
pub fn partition_schedule(d_in: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < d_in {
        let take = (d_in - start).div_ceil(2);
        out.push(start..start + take);
        start += take;
    }
    out
}

/// Shared, read-only per-slice data for one layer.
#[derive(Debug)]
pub struct SlicePlan {
    pub s: Range<usize>,
    pub r: Range<usize>,
    pub proxy: DMatrix<f64>,
    /// `E[x̄ˢ x̄ʳᵀ]`.
    pub e_sr: DMatrix<f64>,
    /// `E[x̄ˢ x̄ˢᵀ]`, `E[x̄ʳ x̄ˢᵀ]` and `E[x̄ʳ x̄ʳᵀ]` packed as the full active block.
    pub active_raw2: DMatrix<f64>,
    pub ridge: Option<RidgeSystem>,
}

#[derive(Debug)]
pub struct LayerPlan {
    pub d_in: usize,
    pub slices: Vec<SlicePlan>,
}

impl LayerPlan {
    /// Precomputes every slice's proxy matrix and ridge factorization from
    /// the moments of the quantized activations.
    pub fn new(moments: &MomentSet, cfg: &WqerConfig) -> Result<Self> {
        let d_in = moments.dim();
        let slices = partition_schedule(d_in)
            .into_iter()
            .map(|s| {
                let r = s.end..d_in;
                let proxy = moments.proxy_matrix(s.clone());
                let e_sr = moments
                    .raw2
                    .view((s.start, r.start), (s.len(), r.len()))
                    .into_owned();
                let active_raw2 = moments
                    .raw2
                    .view((s.start, s.start), (d_in - s.start, d_in - s.start))
                    .into_owned();
                let ridge = if cfg.ridge && !r.is_empty() {
                    let e_rr = moments.raw2.view((r.start, r.start), (r.len(), r.len())).into_owned();
                    Some(RidgeSystem::new(&e_rr, cfg.lambda2, "wqer ridge")?)
                } else {
                    None
                };
                Ok(SlicePlan {
                    s,
                    r,
                    proxy,
                    e_sr,
                    active_raw2,
                    ridge,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { d_in, slices })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub slice_size: usize,
    pub proxy_before: f64,
    pub proxy_after: f64,
    /// Empirical `E[(δ_s x̄ˢ + ΔW_r* x̄ʳ)²]` after this round.
    pub mse: f64,
}

/// Progress of one output channel through the rounds.
#[derive(Debug, Clone)]
pub struct ChannelState {
    pub row: usize,
    pub codes: Vec<i64>,
    /// Remaining full-precision weights, aligned with columns `codes.len()..`.
    pub remaining: Vec<f64>,
    pub params: UniformParams,
}

impl ChannelState {
    pub fn new(row: usize, weights: &[f64], params: UniformParams) -> Self {
        Self {
            row,
            codes: Vec::with_capacity(weights.len()),
            remaining: weights.to_vec(),
            params,
        }
    }

    pub fn is_done(&self) -> bool {
        self.remaining.is_empty()
    }

    /// Runs one round on the given slice, which must start at the first
    /// unquantized column.
    pub fn step(&mut self, iteration: usize, plan: &SlicePlan, cfg: &WqerConfig) -> IterationTrace {
        debug_assert_eq!(plan.s.start, self.codes.len());
        let take = plan.s.len();
        let mut state = RoundingState::nearest(&self.remaining[..take], &self.params);
        let committed = if cfg.rounding {
            rounding_refinement(&mut state, &plan.proxy, cfg.k, cfg.max_iter)
        } else {
            vec![proxy_value(&state.delta(), &plan.proxy)]
        };
        let delta_s = state.delta();
        self.codes.extend(state.codes());

        let mut rest: Vec<f64> = self.remaining.split_off(take);
        let mut residual = delta_s.clone();
        match &plan.ridge {
            Some(system) => {
                let corr = ridge_correction(&delta_s, &plan.e_sr, system);
                for (w, c) in rest.iter_mut().zip(corr.iter()) {
                    *w += c;
                }
                residual.extend(corr.iter());
            }
            None => residual.extend(std::iter::repeat_n(0.0, rest.len())),
        }
        self.remaining = rest;

        IterationTrace {
            iteration,
            slice_size: take,
            proxy_before: committed[0],
            proxy_after: *committed.last().expect("non-empty"),
            mse: proxy_value(&residual, &plan.active_raw2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChannelResult {
    pub codes: Vec<i64>,
    pub trace: Vec<IterationTrace>,
}

pub fn wqer_channel(
    row: usize,
    weights: &[f64],
    params: UniformParams,
    plan: &LayerPlan,
    cfg: &WqerConfig,
) -> ChannelResult {
    assert_eq!(weights.len(), plan.d_in, "weight row width does not match plan");
    let mut st = ChannelState::new(row, weights, params);
    let trace = plan
        .slices
        .iter()
        .enumerate()
        .map(|(it, slice)| st.step(it, slice, cfg))
        .collect();
    debug_assert!(st.is_done());
    ChannelResult {
        codes: st.codes,
        trace,
    }
}

#[derive(Debug, Clone)]
pub struct WqerLayer {
    /// Row-major `D_out × D_in` integer codes.
    pub codes: Vec<i32>,
    pub traces: Vec<Vec<IterationTrace>>,
}

/// Quantizes every output channel independently. The result does not depend
/// on the rayon pool size or scheduling.
pub fn wqer_layer(
    w: &DMatrix<f64>,
    params: &[UniformParams],
    moments: &MomentSet,
    cfg: &WqerConfig,
) -> Result<WqerLayer> {
    if params.len() != w.nrows() {
        return Err(ErqError::validation(format!(
            "wqer: {} channel quantizers for {} output channels",
            params.len(),
            w.nrows()
        )));
    }
    if moments.dim() != w.ncols() {
        return Err(ErqError::validation(format!(
            "wqer: moments are {}-wide but weight has {} inputs",
            moments.dim(),
            w.ncols()
        )));
    }
    let plan = LayerPlan::new(moments, cfg)?;
    let results: Vec<ChannelResult> = (0..w.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = w.row(i).iter().copied().collect();
            wqer_channel(i, &row, params[i], &plan, cfg)
        })
        .collect();
    let mut codes = Vec::with_capacity(w.len());
    let mut traces = Vec::with_capacity(w.nrows());
    for r in results {
        codes.extend(r.codes.into_iter().map(|c| c as i32));
        traces.push(r.trace);
    }
    Ok(WqerLayer { codes, traces })
}
