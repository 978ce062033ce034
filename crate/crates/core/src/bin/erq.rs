use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use erq::pipeline::{self, RunConfig, Stages, SweepParam};
use erq::synth::{self, SynthSpec};
use erq::verify::{self, VerifyOptions};
use erq::{ErqError, Result};

#[derive(Parser)]
#[command(name = "erq", version, about = "Post-training quantization with activation and weight error reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize every layer of a manifest and write codes and reports.
    Quantize {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the built-in verification suites.
    Verify {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run all eight stage combinations and emit an ablation CSV.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sweep one parameter and emit one CSV row per value.
    Sweep {
        /// lambda (couples lambda1 = lambda2), k, or n_images.
        #[arg(long)]
        param: SweepParam,
        /// Comma list (`1e2,1e3`) or geometric `start:stop:factor`.
        #[arg(long)]
        range: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic manifest and its tensors.
    Synth {
        /// JSON synthetic spec; overrides the shape flags below.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        d_out: usize,
        #[arg(long, default_value_t = 128)]
        d_in: usize,
        #[arg(long, default_value_t = 2048)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        bits_w: u32,
        #[arg(long, default_value_t = 4)]
        bits_a: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON run configuration; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of aqer,wqer_rounding,wqer_ridge (or all/none).
    #[arg(long)]
    stages: Option<Stages>,
    #[arg(long)]
    bits_w: Option<u32>,
    #[arg(long)]
    bits_a: Option<u32>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(jobs, seed, stages, lambda1, lambda2, k, max_iter);
        if self.bits_w.is_some() {
            cfg.bits_w = self.bits_w;
        }
        if self.bits_a.is_some() {
            cfg.bits_a = self.bits_a;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| ErqError::validation("--manifest is required"))
    }
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<Option<PathBuf>> {
    match &cfg.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| ErqError::io(format!("creating {}", dir.display()), e))?;
            Ok(Some(dir.join(name)))
        }
        None => Ok(None),
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Quantize { run } => {
            let cfg = run.config()?;
            let out = cfg
                .out
                .clone()
                .ok_or_else(|| ErqError::validation("--out is required"))?;
            let report = pipeline::cmd_quantize(run.manifest()?, &cfg, &out)?;
            for l in &report.layers {
                println!(
                    "{}: mse {:.6e} -> {:.6e} ({:+.2}%)",
                    l.layer_id,
                    l.mse_baseline,
                    l.mse_after_wqer,
                    -100.0 * l.reduction_ratio.cumulative
                );
            }
            for f in &report.failures {
                eprintln!("{}: FAILED: {}", f.layer_id, f.error);
            }
            Ok(report.exit_code())
        }
        Command::Verify { run } => {
            let cfg = run.config()?;
            let summary = verify::run_all(&VerifyOptions {
                seed: cfg.seed,
                ..VerifyOptions::default()
            });
            let text = serde_json::to_string_pretty(&summary)?;
            println!("{text}");
            if let Some(path) = out_file(&cfg, "verify.json")? {
                pipeline::write_json(&path, &summary)?;
            }
            if summary.passed {
                Ok(0)
            } else {
                let failed: Vec<&str> = summary.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
                Err(ErqError::Verification(failed.join(", ")))
            }
        }
        Command::Ablate { run } => {
            let cfg = run.config()?;
            let rows = pipeline::cmd_ablate(run.manifest()?, &cfg)?;
            pipeline::write_csv(out_file(&cfg, "ablation.csv")?.as_deref(), &rows)?;
            Ok(0)
        }
        Command::Sweep { param, range, run } => {
            let cfg = run.config()?;
            let values = pipeline::parse_range(&range)?;
            let rows = pipeline::cmd_sweep(param, &values, run.manifest()?, &cfg)?;
            pipeline::write_csv(out_file(&cfg, &format!("sweep_{param}.csv"))?.as_deref(), &rows)?;
            Ok(0)
        }
        Command::Synth {
            spec,
            seed,
            d_out,
            d_in,
            rows,
            bits_w,
            bits_a,
            out,
        } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| ErqError::io(format!("reading {}", path.display()), e))?;
                    serde_json::from_str::<SynthSpec>(&text)
                        .map_err(|e| ErqError::validation(format!("synth spec {}: {e}", path.display())))?
                }
                None => SynthSpec::single(seed, d_out, d_in, rows),
            };
            let manifest = synth::write_manifest(&spec, &out, bits_w, bits_a)?;
            println!("{}", manifest.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
