//! Per-layer orchestration and the experiment drivers behind the CLI.
//!
//! A layer goes through: activation quantizer calibration, activation
//! quantization of the calibration batch, the optional Aqer weight update,
//! per-channel weight quantizer calibration on the (updated) weight, and the
//! optional Wqer rounds. Disabled stages are skipped outright.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aqer::{aqer_delta, DEFAULT_LAMBDA1};
use crate::error::{ErqError, Result};
use crate::moments::{cross_moment, moments_of};
use crate::oracle::layer_mse;
use crate::quant::{calibrate_scale, Family, Granularity, QuantScheme, UniformParams};
use crate::tensor_store::{self, LayerManifestEntry, Manifest, TensorFile, MAX_BITS};
use crate::wqer::{wqer_layer, IterationTrace, WqerConfig, DEFAULT_K, DEFAULT_LAMBDA2, DEFAULT_MAX_ITER};

/// Which error-reduction stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Stages {
    pub aqer: bool,
    pub wqer_rounding: bool,
    pub wqer_ridge: bool,
}

impl Stages {
    pub const NONE: Stages = Stages {
        aqer: false,
        wqer_rounding: false,
        wqer_ridge: false,
    };
    pub const ALL: Stages = Stages {
        aqer: true,
        wqer_rounding: true,
        wqer_ridge: true,
    };

    /// All eight subsets, baseline first, ordered as binary (aqer, rounding, ridge).
    pub fn grid() -> [Stages; 8] {
        std::array::from_fn(|i| Stages {
            aqer: i & 4 != 0,
            wqer_rounding: i & 2 != 0,
            wqer_ridge: i & 1 != 0,
        })
    }

    pub fn wqer(&self) -> bool {
        self.wqer_rounding || self.wqer_ridge
    }
}

impl Default for Stages {
    fn default() -> Self {
        Stages::ALL
    }
}

impl From<Stages> for Vec<String> {
    fn from(s: Stages) -> Self {
        let mut out = Vec::new();
        if s.aqer {
            out.push("aqer".to_string());
        }
        if s.wqer_rounding {
            out.push("wqer_rounding".to_string());
        }
        if s.wqer_ridge {
            out.push("wqer_ridge".to_string());
        }
        out
    }
}

impl TryFrom<Vec<String>> for Stages {
    type Error = ErqError;

    fn try_from(names: Vec<String>) -> Result<Self> {
        let mut s = Stages::NONE;
        for name in names {
            match name.trim() {
                "aqer" => s.aqer = true,
                "wqer_rounding" | "rounding" => s.wqer_rounding = true,
                "wqer_ridge" | "ridge" => s.wqer_ridge = true,
                "wqer" => {
                    s.wqer_rounding = true;
                    s.wqer_ridge = true;
                }
                "all" => s = Stages::ALL,
                "none" | "" => {}
                other => return Err(ErqError::validation(format!("unknown stage '{other}'"))),
            }
        }
        Ok(s)
    }
}

impl FromStr for Stages {
    type Err = ErqError;

    fn from_str(s: &str) -> Result<Self> {
        Stages::try_from(s.split(',').map(str::to_string).collect::<Vec<_>>())
    }
}

impl fmt::Display for Stages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = (*self).into();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub k: usize,
    pub max_iter: usize,
    /// Overrides the manifest's per-layer bit-widths when set.
    pub bits_w: Option<u32>,
    pub bits_a: Option<u32>,
    pub stages: Stages,
    pub seed: u64,
    pub jobs: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            k: DEFAULT_K,
            max_iter: DEFAULT_MAX_ITER,
            bits_w: None,
            bits_a: None,
            stages: Stages::ALL,
            seed: 0,
            jobs: 1,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ErqError::io(format!("reading config {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| ErqError::validation(format!("config {}: {e}", path.display())))
    }

    pub fn wqer_config(&self) -> WqerConfig {
        WqerConfig {
            k: self.k,
            max_iter: self.max_iter,
            lambda2: self.lambda2,
            rounding: self.stages.wqer_rounding,
            ridge: self.stages.wqer_ridge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ErqError::validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, b) in [("bits_w", self.bits_w), ("bits_a", self.bits_a)] {
            if let Some(b) = b {
                if !(2..=MAX_BITS).contains(&b) {
                    return Err(ErqError::validation(format!("{name}={b} outside [2, {MAX_BITS}]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionRatios {
    pub aqer: f64,
    pub wqer: f64,
    pub cumulative: f64,
}

/// `1 − after/before`, or 0 when there was no error to begin with.
pub fn reduction_ratio(before: f64, after: f64) -> f64 {
    if before > 0.0 {
        1.0 - after / before
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: String,
    pub d_out: usize,
    pub d_in: usize,
    pub n_calib: usize,
    pub stages: Stages,
    pub act_quant: QuantScheme,
    pub weight_quant: QuantScheme,
    /// Layer output MSE of plain calibration + round-to-nearest.
    pub mse_baseline: f64,
    /// After the Aqer update, weights round-to-nearest.
    pub mse_after_aqer: f64,
    /// Final quantized layer.
    pub mse_after_wqer: f64,
    pub reduction_ratio: ReductionRatios,
}

impl LayerReport {
    /// Recomputes the ratios from the raw MSE fields.
    pub fn ratios_consistent(&self) -> bool {
        let expect = ReductionRatios {
            aqer: reduction_ratio(self.mse_baseline, self.mse_after_aqer),
            wqer: reduction_ratio(self.mse_after_aqer, self.mse_after_wqer),
            cumulative: reduction_ratio(self.mse_baseline, self.mse_after_wqer),
        };
        expect == self.reduction_ratio
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub calibration_s: f64,
    pub aqer_s: f64,
    pub wqer_s: f64,
}

/// Inputs for quantizing one layer.
#[derive(Debug, Clone)]
pub struct LayerJob<'a> {
    pub layer_id: String,
    pub weight: &'a DMatrix<f64>,
    /// `N × D_in` full-precision calibration activations.
    pub calib: &'a DMatrix<f64>,
    /// Optional batch the reported MSEs are measured on instead of `calib`.
    pub eval: Option<&'a DMatrix<f64>>,
    pub act_quant: Family,
    pub bits_w: u32,
    pub bits_a: u32,
}

#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub report: LayerReport,
    /// Row-major `D_out × D_in` codes of the final weight quantizer.
    pub codes: Vec<i32>,
    pub weight_dequant: DMatrix<f64>,
    /// The calibration batch after activation quantization.
    pub act_quantized: DMatrix<f64>,
    pub traces: Vec<Vec<IterationTrace>>,
    pub timings: StageTimings,
}

pub fn quantize_layer(job: &LayerJob<'_>, cfg: &RunConfig) -> Result<LayerOutcome> {
    let w = job.weight;
    let (d_out, d_in) = w.shape();
    if job.calib.ncols() != d_in {
        return Err(ErqError::validation(format!(
            "layer {}: weight has {d_in} inputs, calibration rows have {}",
            job.layer_id,
            job.calib.ncols()
        )));
    }
    if job.calib.nrows() < 2 {
        return Err(ErqError::validation(format!(
            "layer {}: need at least 2 calibration rows",
            job.layer_id
        )));
    }
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let act = calibrate_scale(job.calib, job.act_quant, job.bits_a, Granularity::PerTensor);
    let a_q = act.fake_quant(job.calib);
    let (eval_fp, eval_q) = match job.eval {
        Some(e) => (e, act.fake_quant(e)),
        None => (job.calib, a_q.clone()),
    };
    let base_scheme = calibrate_scale(w, Family::Uniform, job.bits_w, Granularity::PerChannel);
    let mse_baseline = layer_mse(w, eval_fp, &base_scheme.fake_quant(w), &eval_q);
    let moments = moments_of(&a_q)?;
    timings.calibration_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let (w_upd, scheme) = if cfg.stages.aqer {
        let cross = cross_moment(job.calib, &a_q)?;
        let delta = aqer_delta(w, &cross, &moments.raw2, cfg.lambda1)?;
        let updated = w + delta;
        let scheme = calibrate_scale(&updated, Family::Uniform, job.bits_w, Granularity::PerChannel);
        (updated, scheme)
    } else {
        (w.clone(), base_scheme)
    };
    let mse_after_aqer = if cfg.stages.aqer {
        layer_mse(w, eval_fp, &scheme.fake_quant(&w_upd), &eval_q)
    } else {
        mse_baseline
    };
    timings.aqer_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let (codes, traces) = if cfg.stages.wqer() {
        let params: Vec<UniformParams> = scheme
            .params
            .iter()
            .map(|p| *p.as_uniform().expect("weights use the uniform quantizer"))
            .collect();
        let out = wqer_layer(&w_upd, &params, &moments, &cfg.wqer_config())?;
        (out.codes, out.traces)
    } else {
        (scheme.codes(&w_upd), Vec::new())
    };
    let weight_dequant = scheme.dequant_codes(d_out, d_in, &codes);
    let mse_after_wqer = if cfg.stages.wqer() {
        layer_mse(w, eval_fp, &weight_dequant, &eval_q)
    } else {
        mse_after_aqer
    };
    timings.wqer_s = t2.elapsed().as_secs_f64();

    let report = LayerReport {
        layer_id: job.layer_id.clone(),
        d_out,
        d_in,
        n_calib: job.calib.nrows(),
        stages: cfg.stages,
        act_quant: act,
        weight_quant: scheme,
        mse_baseline,
        mse_after_aqer,
        mse_after_wqer,
        reduction_ratio: ReductionRatios {
            aqer: reduction_ratio(mse_baseline, mse_after_aqer),
            wqer: reduction_ratio(mse_after_aqer, mse_after_wqer),
            cumulative: reduction_ratio(mse_baseline, mse_after_wqer),
        },
    };
    Ok(LayerOutcome {
        report,
        codes,
        weight_dequant,
        act_quantized: a_q,
        traces,
        timings,
    })
}

/// Runs `f` inside a rayon pool of `jobs` threads (0 means rayon's default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| ErqError::validation(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// A manifest layer with tensors loaded, or the reason it could not be.
pub struct ManifestLayer {
    pub entry: LayerManifestEntry,
    pub loaded: Result<(DMatrix<f64>, DMatrix<f64>)>,
}

fn valid_layer_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.')
}

/// Parses the manifest and loads each layer independently so that one bad
/// layer does not prevent the others from running.
pub fn read_manifest_layers(path: &Path, cfg: &RunConfig) -> Result<Vec<ManifestLayer>> {
    let text = fs::read_to_string(path)
        .map_err(|e| ErqError::io(format!("reading manifest {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| ErqError::validation(format!("manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(manifest
        .layers
        .into_iter()
        .map(|mut entry| {
            if entry.weight_path.is_relative() {
                entry.weight_path = base.join(&entry.weight_path);
            }
            if entry.calib_path.is_relative() {
                entry.calib_path = base.join(&entry.calib_path);
            }
            if let Some(b) = cfg.bits_w {
                entry.bits_w = b;
            }
            if let Some(b) = cfg.bits_a {
                entry.bits_a = b;
            }
            let loaded = if valid_layer_id(&entry.layer_id) {
                tensor_store::load_layer(entry.clone()).map(|l| (l.weight, l.calib))
            } else {
                Err(ErqError::validation(format!("invalid layer_id {:?}", entry.layer_id)))
            };
            ManifestLayer { entry, loaded }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFailure {
    pub layer_id: String,
    pub error: String,
    #[serde(skip)]
    pub exit_code: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub layers: Vec<LayerReport>,
    pub failures: Vec<LayerFailure>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        self.failures.first().map_or(0, |f| f.exit_code)
    }
}

#[derive(Debug, Serialize)]
struct TraceRow<'a> {
    layer_id: &'a str,
    channel: usize,
    iteration: usize,
    slice_size: usize,
    proxy_before: f64,
    proxy_after: f64,
    mse: f64,
}

fn run_manifest(
    layers: &[ManifestLayer],
    cfg: &RunConfig,
    prepare: impl Fn(&DMatrix<f64>) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> + Sync,
) -> Result<Vec<std::result::Result<LayerOutcome, LayerFailure>>> {
    cfg.validate()?;
    with_jobs(cfg.jobs, || {
        layers
            .par_iter()
            .map(|layer| {
                let fail = |e: ErqError| LayerFailure {
                    layer_id: layer.entry.layer_id.clone(),
                    error: e.to_string(),
                    exit_code: e.exit_code(),
                };
                let (w, a) = layer.loaded.as_ref().map_err(|e| LayerFailure {
                    layer_id: layer.entry.layer_id.clone(),
                    error: e.to_string(),
                    exit_code: e.exit_code(),
                })?;
                tensor_store::validate_entry(&layer.entry, &[w.nrows(), w.ncols()], &[a.nrows(), a.ncols()])
                    .map_err(fail)?;
                let (calib, eval) = prepare(a).map_err(fail)?;
                let job = LayerJob {
                    layer_id: layer.entry.layer_id.clone(),
                    weight: w,
                    calib: &calib,
                    eval: eval.as_ref(),
                    act_quant: layer.entry.act_quant,
                    bits_w: layer.entry.bits_w,
                    bits_a: layer.entry.bits_a,
                };
                quantize_layer(&job, cfg).map_err(fail)
            })
            .collect()
    })
}

fn identity_prepare(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    Ok((a.clone(), None))
}

/// Quantizes every manifest layer and writes, under `out`:
/// `report.json`, `trace.csv`, `timings.json` and `<layer_id>.codes.npy`.
/// `report.json` and `trace.csv` depend only on inputs and configuration.
pub fn cmd_quantize(manifest: &Path, cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    let layers = read_manifest_layers(manifest, cfg)?;
    let results = run_manifest(&layers, cfg, identity_prepare)?;
    fs::create_dir_all(out).map_err(|e| ErqError::io(format!("creating {}", out.display()), e))?;

    let mut report = RunReport {
        layers: Vec::new(),
        failures: Vec::new(),
    };
    let mut timings = BTreeMap::new();
    let mut trace = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(out.join("trace.csv"))
        .map_err(|e| ErqError::validation(format!("trace.csv: {e}")))?;
    trace
        .write_record(["layer_id", "channel", "iteration", "slice_size", "proxy_before", "proxy_after", "mse"])
        .map_err(|e| ErqError::validation(format!("trace.csv: {e}")))?;
    for result in results {
        match result {
            Ok(outcome) => {
                let id = outcome.report.layer_id.clone();
                let codes = TensorFile::from_codes(outcome.report.d_out, outcome.report.d_in, outcome.codes)?;
                tensor_store::write_tensor(out.join(format!("{id}.codes.npy")), &codes)?;
                for (channel, rows) in outcome.traces.iter().enumerate() {
                    for t in rows {
                        trace
                            .serialize(TraceRow {
                                layer_id: &id,
                                channel,
                                iteration: t.iteration,
                                slice_size: t.slice_size,
                                proxy_before: t.proxy_before,
                                proxy_after: t.proxy_after,
                                mse: t.mse,
                            })
                            .map_err(|e| ErqError::validation(format!("trace.csv: {e}")))?;
                    }
                }
                timings.insert(id, outcome.timings);
                report.layers.push(outcome.report);
            }
            Err(failure) => {
                log::error!("layer {} failed: {}", failure.layer_id, failure.error);
                report.failures.push(failure);
            }
        }
    }
    trace
        .flush()
        .map_err(|e| ErqError::io("flushing trace.csv", e))?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("timings.json"), &timings)?;
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| ErqError::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub aqer: bool,
    pub rounding: bool,
    pub ridge: bool,
    pub mse_baseline: f64,
    pub mse: f64,
    pub reduction_ratio: f64,
}

fn sum_mse(outcomes: &[LayerOutcome]) -> (f64, f64, f64) {
    outcomes.iter().fold((0.0, 0.0, 0.0), |(b, a, w), o| {
        (
            b + o.report.mse_baseline,
            a + o.report.mse_after_aqer,
            w + o.report.mse_after_wqer,
        )
    })
}

fn collect_ok(results: Vec<std::result::Result<LayerOutcome, LayerFailure>>) -> Result<Vec<LayerOutcome>> {
    results
        .into_iter()
        .map(|r| {
            r.map_err(|f| match f.exit_code {
                2 => ErqError::Numerical(format!("layer {}: {}", f.layer_id, f.error)),
                _ => ErqError::validation(format!("layer {}: {}", f.layer_id, f.error)),
            })
        })
        .collect()
}

/// One row per subset of {Aqer, Rounding, Ridge}, MSE summed over layers.
pub fn ablate_jobs(jobs: &[LayerJob<'_>], cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    Stages::grid()
        .into_iter()
        .map(|stages| {
            let run = RunConfig { stages, ..cfg.clone() };
            let outcomes = with_jobs(cfg.jobs, || {
                jobs.par_iter().map(|j| quantize_layer(j, &run)).collect::<Result<Vec<_>>>()
            })??;
            let (base, _, mse) = sum_mse(&outcomes);
            Ok(AblationRow {
                aqer: stages.aqer,
                rounding: stages.wqer_rounding,
                ridge: stages.wqer_ridge,
                mse_baseline: base,
                mse,
                reduction_ratio: reduction_ratio(base, mse),
            })
        })
        .collect()
}

pub fn cmd_ablate(manifest: &Path, cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let layers = read_manifest_layers(manifest, cfg)?;
    let mut loaded = Vec::with_capacity(layers.len());
    for l in &layers {
        match &l.loaded {
            Ok((w, a)) => loaded.push((l, w, a)),
            Err(e) => {
                return Err(ErqError::validation(format!("layer {}: {e}", l.entry.layer_id)));
            }
        }
    }
    let jobs: Vec<LayerJob<'_>> = loaded
        .iter()
        .map(|(l, w, a)| LayerJob {
            layer_id: l.entry.layer_id.clone(),
            weight: w,
            calib: a,
            eval: None,
            act_quant: l.entry.act_quant,
            bits_w: l.entry.bits_w,
            bits_a: l.entry.bits_a,
        })
        .collect();
    ablate_jobs(&jobs, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Couples λ₁ = λ₂.
    Lambda,
    K,
    /// Number of leading calibration rows used for calibration.
    NImages,
}

impl FromStr for SweepParam {
    type Err = ErqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "k" => Ok(SweepParam::K),
            "n_images" | "n-images" => Ok(SweepParam::NImages),
            other => Err(ErqError::validation(format!("unknown sweep parameter '{other}'"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Lambda => "lambda",
            SweepParam::K => "k",
            SweepParam::NImages => "n_images",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub mse_baseline: f64,
    pub mse_after_aqer: f64,
    pub mse_after_wqer: f64,
    pub reduction_ratio: f64,
    pub wall_time_s: f64,
}

fn sweep_point(param: SweepParam, value: f64, cfg: &RunConfig) -> Result<RunConfig> {
    let mut run = cfg.clone();
    match param {
        SweepParam::Lambda => {
            run.lambda1 = value;
            run.lambda2 = value;
        }
        SweepParam::K => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(ErqError::validation(format!("k must be a non-negative integer, got {value}")));
            }
            run.k = value as usize;
        }
        SweepParam::NImages => {}
    }
    Ok(run)
}

fn rows_for(param: SweepParam, value: f64) -> Result<Option<usize>> {
    if param != SweepParam::NImages {
        return Ok(None);
    }
    if value < 2.0 || value.fract() != 0.0 {
        return Err(ErqError::validation(format!(
            "n_images must be an integer >= 2, got {value}"
        )));
    }
    Ok(Some(value as usize))
}

/// For `n_images`, layers calibrate on their first `n` rows and every MSE
/// is measured on the full calibration tensor.
pub fn sweep_jobs(param: SweepParam, values: &[f64], jobs: &[LayerJob<'_>], cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(ErqError::validation("sweep range is empty"));
    }
    values
        .iter()
        .map(|&value| {
            let run = sweep_point(param, value, cfg)?;
            run.validate()?;
            let n_rows = rows_for(param, value)?;
            let start = Instant::now();
            let outcomes = with_jobs(cfg.jobs, || {
                jobs.par_iter()
                    .map(|j| match n_rows {
                        Some(n) if n > j.calib.nrows() => Err(ErqError::validation(format!(
                            "layer {}: n_images={n} exceeds {} calibration rows",
                            j.layer_id,
                            j.calib.nrows()
                        ))),
                        Some(n) => {
                            let sub = j.calib.rows(0, n).into_owned();
                            let job = LayerJob {
                                calib: &sub,
                                eval: Some(j.calib),
                                ..j.clone()
                            };
                            quantize_layer(&job, &run)
                        }
                        None => quantize_layer(j, &run),
                    })
                    .collect::<Result<Vec<_>>>()
            })??;
            let (b, a, w) = sum_mse(&outcomes);
            Ok(SweepRow {
                param: param.to_string(),
                value,
                mse_baseline: b,
                mse_after_aqer: a,
                mse_after_wqer: w,
                reduction_ratio: reduction_ratio(b, w),
                wall_time_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn cmd_sweep(param: SweepParam, values: &[f64], manifest: &Path, cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let layers = read_manifest_layers(manifest, cfg)?;
    let results = run_manifest(&layers, &RunConfig { stages: Stages::NONE, ..cfg.clone() }, identity_prepare)?;
    collect_ok(results)?;
    let jobs: Vec<LayerJob<'_>> = layers
        .iter()
        .map(|l| {
            let (w, a) = l.loaded.as_ref().expect("checked above");
            LayerJob {
                layer_id: l.entry.layer_id.clone(),
                weight: w,
                calib: a,
                eval: None,
                act_quant: l.entry.act_quant,
                bits_w: l.entry.bits_w,
                bits_a: l.entry.bits_a,
            }
        })
        .collect();
    sweep_jobs(param, values, &jobs, cfg)
}

/// Parses a sweep range: either a comma list (`1e2,1e3,1e4`) or
/// `start:stop:factor` for a geometric progression (`4:1024:2`).
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let bad = || ErqError::validation(format!("invalid sweep range '{text}'"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 3 {
        let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let factor: f64 = parts[2].trim().parse().map_err(|_| bad())?;
        if !(start > 0.0 && factor > 1.0 && stop >= start) {
            return Err(bad());
        }
        let mut out = Vec::new();
        let mut v = start;
        while v <= stop * (1.0 + 1e-12) {
            out.push(v);
            v *= factor;
        }
        return Ok(out);
    }
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}

pub fn write_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<()> {
    let sink: Box<dyn std::io::Write> = match path {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| ErqError::io(format!("creating {}", p.display()), e))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r).map_err(|e| ErqError::validation(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| ErqError::io("flushing csv", e))
}
