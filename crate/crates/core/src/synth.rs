//! Deterministic synthetic layers and layer chains for desk-scale runs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ErqError, Result};
use crate::pipeline::{quantize_layer, write_json, LayerJob, RunConfig, Stages};
use crate::quant::Family;
use crate::tensor_store::{write_tensor, LayerManifestEntry, Manifest, TensorFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Identity,
    Gelu,
    Softmax,
}

impl Nonlinearity {
    pub fn apply(self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Nonlinearity::Identity => m.clone(),
            Nonlinearity::Gelu => m.map(gelu),
            Nonlinearity::Softmax => {
                let mut out = m.clone();
                for mut row in out.row_iter_mut() {
                    let max = row.max();
                    row.apply(|v| *v = (*v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                out
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Per-channel Gaussian activations: channel `c` has mean `μ_c ~ N(0, mean_spread²)`
/// and standard deviation `scale · exp(scale_spread · z_c)`; channels share
/// `factors` latent directions carrying a `correlation` share of the variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationDist {
    Gaussian {
        mean_spread: f64,
        scale: f64,
        scale_spread: f64,
        correlation: f64,
        factors: usize,
    },
    /// Two-component mixture per row: with probability `outlier_prob` the
    /// row is shifted by `outlier_shift` standard deviations.
    Mixture {
        mean_spread: f64,
        scale: f64,
        scale_spread: f64,
        outlier_prob: f64,
        outlier_shift: f64,
    },
}

impl Default for ActivationDist {
    fn default() -> Self {
        ActivationDist::Gaussian {
            mean_spread: 1.0,
            scale: 1.0,
            scale_spread: 0.5,
            correlation: 0.5,
            factors: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// `(D_out, D_in)` per layer.
    pub layers: Vec<(usize, usize)>,
    pub n_rows: usize,
    #[serde(default)]
    pub activation: ActivationDist,
    /// Applied between consecutive layers; one entry per layer boundary.
    #[serde(default)]
    pub chain: Vec<Nonlinearity>,
}

impl SynthSpec {
    pub fn single(seed: u64, d_out: usize, d_in: usize, n_rows: usize) -> Self {
        Self {
            seed,
            layers: vec![(d_out, d_in)],
            n_rows,
            activation: ActivationDist::default(),
            chain: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(ErqError::validation("synthetic spec has no layers"));
        }
        if self.n_rows < 2 {
            return Err(ErqError::validation("synthetic spec needs at least 2 rows"));
        }
        if self.layers.iter().any(|&(o, i)| o == 0 || i == 0) {
            return Err(ErqError::validation("synthetic layer dimensions must be positive"));
        }
        if self.chain.len() + 1 != self.layers.len() && !(self.layers.len() == 1 && self.chain.is_empty()) {
            return Err(ErqError::validation(format!(
                "{} layers need {} nonlinearities, got {}",
                self.layers.len(),
                self.layers.len() - 1,
                self.chain.len()
            )));
        }
        for (idx, w) in self.layers.windows(2).enumerate() {
            if w[0].0 != w[1].1 {
                return Err(ErqError::validation(format!(
                    "layer {idx} outputs {} features but layer {} takes {}",
                    w[0].0,
                    idx + 1,
                    w[1].1
                )));
            }
        }
        Ok(())
    }

    /// Activation quantizer family feeding layer `index`.
    pub fn act_family(&self, index: usize) -> Family {
        match index.checked_sub(1).and_then(|i| self.chain.get(i)) {
            Some(Nonlinearity::Softmax) => Family::LogSqrt2,
            _ => Family::Uniform,
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Weight of layer `index`, entries `N(0, 1/D_in)`.
pub fn generate_weight(spec: &SynthSpec, index: usize) -> DMatrix<f64> {
    let (d_out, d_in) = spec.layers[index];
    let mut rng = spec.rng(2 * index as u64);
    let std = (d_in as f64).sqrt().recip();
    DMatrix::from_fn(d_out, d_in, |_, _| std * normal(&mut rng))
}

/// `n × d` activation batch drawn from `dist`.
pub fn generate_activations(dist: &ActivationDist, n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    match *dist {
        ActivationDist::Gaussian {
            mean_spread,
            scale,
            scale_spread,
            correlation,
            factors,
        } => {
            let mu = DVector::from_fn(d, |_, _| mean_spread * normal(rng));
            let sd = DVector::from_fn(d, |_, _| scale * (scale_spread * normal(rng)).exp());
            let rho = correlation.clamp(0.0, 1.0);
            let r = factors.max(1);
            let mut loading = DMatrix::from_fn(d, r, |_, _| normal(rng));
            for mut row in loading.row_iter_mut() {
                let norm = row.norm().max(1e-12);
                row /= norm;
            }
            let latent = DMatrix::from_fn(n, r, |_, _| normal(rng));
            let shared = latent * loading.transpose();
            DMatrix::from_fn(n, d, |i, j| {
                let z = (1.0 - rho).sqrt() * normal(rng) + rho.sqrt() * shared[(i, j)];
                mu[j] + sd[j] * z
            })
        }
        ActivationDist::Mixture {
            mean_spread,
            scale,
            scale_spread,
            outlier_prob,
            outlier_shift,
        } => {
            let mu = DVector::from_fn(d, |_, _| mean_spread * normal(rng));
            let sd = DVector::from_fn(d, |_, _| scale * (scale_spread * normal(rng)).exp());
            let mut out = DMatrix::zeros(n, d);
            for i in 0..n {
                let shift = if rng.random::<f64>() < outlier_prob { outlier_shift } else { 0.0 };
                for j in 0..d {
                    out[(i, j)] = mu[j] + sd[j] * (normal(rng) + shift);
                }
            }
            out
        }
    }
}

/// Weight and a standalone calibration batch for layer `index`.
pub fn generate_layer(spec: &SynthSpec, index: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let w = generate_weight(spec, index);
    let mut rng = spec.rng(2 * index as u64 + 1);
    let a = generate_activations(&spec.activation, spec.n_rows, spec.layers[index].1, &mut rng);
    (w, a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLayerReport {
    pub index: usize,
    pub act_quant: Family,
    pub mse_baseline: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainVariant {
    pub name: String,
    pub stages: Stages,
    pub layers: Vec<ChainLayerReport>,
    pub end_to_end_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    /// Mean squared norm of the full-precision chain output.
    pub signal_power: f64,
    pub variants: Vec<ChainVariant>,
}

impl ChainReport {
    pub fn variant(&self, name: &str) -> Option<&ChainVariant> {
        self.variants.iter().find(|v| v.name == name)
    }
}

pub const CHAIN_VARIANTS: [(&str, Stages); 4] = [
    ("rtn", Stages::NONE),
    ("aqer_only", Stages { aqer: true, wqer_rounding: false, wqer_ridge: false }),
    ("wqer_only", Stages { aqer: false, wqer_rounding: true, wqer_ridge: true }),
    ("erq", Stages::ALL),
];

/// Runs one stage set down the chain. Layer `l` is calibrated on the
/// (not yet activation-quantized) output of the quantized layer `l-1`
/// after the nonlinearity.
pub fn run_chain_variant(spec: &SynthSpec, cfg: &RunConfig, stages: Stages) -> Result<(Vec<ChainLayerReport>, f64, f64)> {
    spec.validate()?;
    let mut rng = spec.rng(1);
    let input = generate_activations(&spec.activation, spec.n_rows, spec.layers[0].1, &mut rng);
    let cfg = RunConfig { stages, ..cfg.clone() };
    let mut fp = input.clone();
    let mut q = input;
    let mut reports = Vec::with_capacity(spec.layers.len());
    for index in 0..spec.layers.len() {
        let w = generate_weight(spec, index);
        let family = spec.act_family(index);
        let job = LayerJob {
            layer_id: format!("layer{index}"),
            weight: &w,
            calib: &q,
            eval: None,
            act_quant: family,
            bits_w: cfg.bits_w.unwrap_or(4),
            bits_a: cfg.bits_a.unwrap_or(4),
        };
        let outcome = quantize_layer(&job, &cfg)?;
        let y_fp = &fp * w.transpose();
        let y_q = &outcome.act_quantized * outcome.weight_dequant.transpose();
        reports.push(ChainLayerReport {
            index,
            act_quant: family,
            mse_baseline: outcome.report.mse_baseline,
            mse: outcome.report.mse_after_wqer,
        });
        match spec.chain.get(index) {
            Some(nl) => {
                fp = nl.apply(&y_fp);
                q = nl.apply(&y_q);
            }
            None => {
                fp = y_fp;
                q = y_q;
            }
        }
    }
    let n = fp.nrows() as f64;
    let e2e = (&fp - &q).norm_squared() / n;
    let power = fp.norm_squared() / n;
    Ok((reports, e2e, power))
}

/// Runs RTN, Aqer-only, Wqer-only and full ERQ down the same chain.
pub fn run_chain(spec: &SynthSpec, cfg: &RunConfig) -> Result<ChainReport> {
    let mut variants = Vec::with_capacity(CHAIN_VARIANTS.len());
    let mut signal_power = 0.0;
    for (name, stages) in CHAIN_VARIANTS {
        let (layers, e2e, power) = run_chain_variant(spec, cfg, stages)?;
        signal_power = power;
        variants.push(ChainVariant {
            name: name.to_string(),
            stages,
            layers,
            end_to_end_mse: e2e,
        });
    }
    Ok(ChainReport {
        signal_power,
        variants,
    })
}

/// Writes each layer of `spec` as `<dir>/layer<i>.weight.npy` and
/// `<dir>/layer<i>.calib.npy` plus a `manifest.json` referencing them.
/// Layers fed by a softmax get softmax-normalized calibration rows and the
/// log√2 activation quantizer.
pub fn write_manifest(spec: &SynthSpec, dir: &Path, bits_w: u32, bits_a: u32) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| ErqError::io(format!("creating {}", dir.display()), e))?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for index in 0..spec.layers.len() {
        let (w, mut a) = generate_layer(spec, index);
        let act_quant = spec.act_family(index);
        if act_quant == Family::LogSqrt2 {
            a = Nonlinearity::Softmax.apply(&a);
        }
        let weight_path = PathBuf::from(format!("layer{index}.weight.npy"));
        let calib_path = PathBuf::from(format!("layer{index}.calib.npy"));
        write_tensor(dir.join(&weight_path), &TensorFile::from_matrix_f32(&w))?;
        write_tensor(dir.join(&calib_path), &TensorFile::from_matrix_f32(&a))?;
        layers.push(LayerManifestEntry {
            layer_id: format!("layer{index}"),
            weight_path,
            calib_path,
            act_quant,
            bits_w,
            bits_a,
        });
    }
    let path = dir.join("manifest.json");
    write_json(&path, &Manifest { layers })?;
    Ok(path)
}
