//! Uniform and log√2 integer quantizers with grid-searched scales.
//!
//! Weights use one uniform quantizer per output channel; activations use a
//! single quantizer for the whole tensor. Rounding is half-to-even everywhere.

use std::f64::consts::SQRT_2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Uniform,
    LogSqrt2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerChannel,
    PerTensor,
}

#[inline]
pub fn max_code(bits: u32) -> i64 {
    (1i64 << bits) - 1
}

/// Affine quantizer: `code = clip(round(x/s) + z, 0, 2^b - 1)`,
/// dequantized as `s * (code - z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bits: u32,
}

impl UniformParams {
    /// Builds parameters for a scale, deriving the zero-point from the
    /// minimum of the data being quantized.
    pub fn from_scale_and_min(scale: f64, min: f64, bits: u32) -> Self {
        let z = (-min / scale).round_ties_even();
        let z = if z.is_finite() { z as i64 } else { 0 };
        Self {
            scale,
            zero_point: z.clamp(0, max_code(bits)),
            bits,
        }
    }

    #[inline]
    pub fn qmax(&self) -> i64 {
        max_code(self.bits)
    }

    #[inline]
    fn clamp(&self, q: f64) -> i64 {
        (q.clamp(0.0, self.qmax() as f64)) as i64
    }

    #[inline]
    pub fn code(&self, x: f64) -> i64 {
        self.clamp((x / self.scale).round_ties_even() + self.zero_point as f64)
    }

    /// Code obtained when rounding toward negative infinity.
    #[inline]
    pub fn floor_code(&self, x: f64) -> i64 {
        self.clamp((x / self.scale).floor() + self.zero_point as f64)
    }

    /// Code obtained when rounding toward positive infinity.
    #[inline]
    pub fn ceil_code(&self, x: f64) -> i64 {
        self.clamp((x / self.scale).ceil() + self.zero_point as f64)
    }

    #[inline]
    pub fn dequant(&self, code: i64) -> f64 {
        self.scale * (code - self.zero_point) as f64
    }

    #[inline]
    pub fn fake_quant(&self, x: f64) -> f64 {
        self.dequant(self.code(x))
    }
}

/// Geometric quantizer with ratio √2 between adjacent codes, for
/// non-negative long-tailed inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSqrt2Params {
    pub scale: f64,
    pub bits: u32,
}

impl LogSqrt2Params {
    #[inline]
    pub fn qmax(&self) -> i64 {
        max_code(self.bits)
    }

    /// Smallest representable magnitude; inputs below it are clamped up.
    pub fn floor_value(&self) -> f64 {
        self.dequant(self.qmax())
    }

    #[inline]
    pub fn code(&self, x: f64) -> i64 {
        let x = x.max(self.floor_value());
        if x <= 0.0 {
            return self.qmax();
        }
        let q = (-2.0 * (x / self.scale).log2()).round_ties_even();
        q.clamp(0.0, self.qmax() as f64) as i64
    }

    #[inline]
    pub fn dequant(&self, code: i64) -> f64 {
        let exp = (-code).div_euclid(2);
        let odd = if code % 2 == 1 { SQRT_2 } else { 1.0 };
        self.scale * 2f64.powi(exp as i32) * odd
    }

    #[inline]
    pub fn fake_quant(&self, x: f64) -> f64 {
        self.dequant(self.code(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum QuantParams {
    Uniform(UniformParams),
    LogSqrt2(LogSqrt2Params),
}

impl QuantParams {
    #[inline]
    pub fn code(&self, x: f64) -> i64 {
        match self {
            QuantParams::Uniform(p) => p.code(x),
            QuantParams::LogSqrt2(p) => p.code(x),
        }
    }

    #[inline]
    pub fn dequant(&self, code: i64) -> f64 {
        match self {
            QuantParams::Uniform(p) => p.dequant(code),
            QuantParams::LogSqrt2(p) => p.dequant(code),
        }
    }

    #[inline]
    pub fn fake_quant(&self, x: f64) -> f64 {
        self.dequant(self.code(x))
    }

    pub fn scale(&self) -> f64 {
        match self {
            QuantParams::Uniform(p) => p.scale,
            QuantParams::LogSqrt2(p) => p.scale,
        }
    }

    pub fn as_uniform(&self) -> Option<&UniformParams> {
        match self {
            QuantParams::Uniform(p) => Some(p),
            QuantParams::LogSqrt2(_) => None,
        }
    }
}

/// Calibrated quantizer for a tensor: one parameter set per output channel
/// for `PerChannel`, a single one for `PerTensor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub family: Family,
    pub granularity: Granularity,
    pub bits: u32,
    pub params: Vec<QuantParams>,
    /// Set when some channel had zero dynamic range and fell back to `s = 1`.
    pub degenerate: bool,
}

impl QuantScheme {
    fn params_for_row(&self, row: usize) -> &QuantParams {
        match self.granularity {
            Granularity::PerChannel => &self.params[row],
            Granularity::PerTensor => &self.params[0],
        }
    }

    /// Integer codes of a matrix, row-major.
    pub fn codes(&self, m: &DMatrix<f64>) -> Vec<i32> {
        let mut out = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            let p = self.params_for_row(i);
            out.extend((0..m.ncols()).map(|j| p.code(m[(i, j)]) as i32));
        }
        out
    }

    pub fn fake_quant(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            self.params_for_row(i).fake_quant(m[(i, j)])
        })
    }

    /// Dequantizes a row-major code buffer of the given shape.
    pub fn dequant_codes(&self, rows: usize, cols: usize, codes: &[i32]) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |i, j| {
            self.params_for_row(i).dequant(i64::from(codes[i * cols + j]))
        })
    }
}

/// Returns codes and dequantized values for the uniform quantizer.
pub fn quantize_uniform(x: &[f64], p: &UniformParams) -> (Vec<i64>, Vec<f64>) {
    let codes: Vec<i64> = x.iter().map(|&v| p.code(v)).collect();
    let deq = codes.iter().map(|&q| p.dequant(q)).collect();
    (codes, deq)
}

/// Returns codes and dequantized values for the log√2 quantizer.
pub fn quantize_log_sqrt2(x: &[f64], p: &LogSqrt2Params) -> (Vec<i64>, Vec<f64>) {
    let codes: Vec<i64> = x.iter().map(|&v| p.code(v)).collect();
    let deq = codes.iter().map(|&q| p.dequant(q)).collect();
    (codes, deq)
}

/// Number of scale candidates in the calibration grid.
pub const GRID_POINTS: usize = 141;

/// Multipliers applied to the range-derived base scale: 0.500, 0.505, …, 1.200.
pub fn grid_multipliers() -> impl Iterator<Item = f64> {
    (0..GRID_POINTS).map(|i| (100 + i) as f64 / 200.0)
}

fn min_max(x: &[f64]) -> (f64, f64) {
    x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Mean squared error of fake-quantizing `x` with the given parameters.
pub fn quant_mse(x: &[f64], p: &QuantParams) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let sum: f64 = x
        .iter()
        .map(|&v| {
            let e = p.fake_quant(v) - v;
            e * e
        })
        .sum();
    sum / x.len() as f64
}

/// Every parameter set the grid search considers for `x`, in ascending
/// scale order. Empty when the input is degenerate.
pub fn candidate_params(x: &[f64], family: Family, bits: u32) -> Vec<QuantParams> {
    let (lo, hi) = min_max(x);
    match family {
        Family::Uniform => {
            let base = (hi - lo) / max_code(bits) as f64;
            if !(base > 0.0 && base.is_finite()) {
                return Vec::new();
            }
            grid_multipliers()
                .map(|a| QuantParams::Uniform(UniformParams::from_scale_and_min(a * base, lo, bits)))
                .collect()
        }
        Family::LogSqrt2 => {
            if !(hi > 0.0 && hi.is_finite()) {
                return Vec::new();
            }
            grid_multipliers()
                .map(|a| QuantParams::LogSqrt2(LogSqrt2Params { scale: a * hi, bits }))
                .collect()
        }
    }
}

fn fallback(family: Family, bits: u32) -> QuantParams {
    match family {
        Family::Uniform => QuantParams::Uniform(UniformParams {
            scale: 1.0,
            zero_point: 0,
            bits,
        }),
        Family::LogSqrt2 => QuantParams::LogSqrt2(LogSqrt2Params { scale: 1.0, bits }),
    }
}

/// Grid-searches the MSE-minimizing parameters for one group of values.
/// Ties go to the larger scale. Returns `(params, degenerate)`.
pub fn calibrate_values(x: &[f64], family: Family, bits: u32) -> (QuantParams, bool) {
    let mut best: Option<(f64, QuantParams)> = None;
    for cand in candidate_params(x, family, bits) {
        let mse = quant_mse(x, &cand);
        if best.as_ref().is_none_or(|(b, _)| mse <= *b) {
            best = Some((mse, cand));
        }
    }
    match best {
        Some((_, p)) => (p, false),
        None => (fallback(family, bits), true),
    }
}

/// Calibrates a scheme for a matrix. `PerChannel` fits one quantizer per row.
pub fn calibrate_scale(
    x: &DMatrix<f64>,
    family: Family,
    bits: u32,
    granularity: Granularity,
) -> QuantScheme {
    let (params, degenerate) = match granularity {
        Granularity::PerTensor => {
            let values: Vec<f64> = x.iter().copied().collect();
            let (p, d) = calibrate_values(&values, family, bits);
            (vec![p], d)
        }
        Granularity::PerChannel => {
            let mut any = false;
            let params = (0..x.nrows())
                .map(|i| {
                    let row: Vec<f64> = x.row(i).iter().copied().collect();
                    let (p, d) = calibrate_values(&row, family, bits);
                    any |= d;
                    p
                })
                .collect();
            (params, any)
        }
    };
    if degenerate {
        log::warn!("quantizer calibration hit zero dynamic range; using s = 1");
    }
    QuantScheme {
        family,
        granularity,
        bits,
        params,
        degenerate,
    }
}
