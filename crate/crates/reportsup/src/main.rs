use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use reportsup::commands::{
    read_json, run_ball_mask, run_gradcheck, run_volume_loss, write_json, BallMaskOutputs, GradModule, OrganInputs,
};
use reportsup::core::ball_loss::BallLossConfig;
use reportsup::core::metrics::DetectionRule;
use reportsup::core::volume_loss::VolumeLossConfig;
use reportsup::evaluate::{evaluate_cohort, read_cohort, EvalOptions, MetricSet};
use reportsup::phantom_io::{load_batch, write_batch};
use reportsup::vocab::vocabulary_or_default;

/// Report-supervised losses, pseudo-masks, phantoms and metrics for 3D
/// tumor segmentation.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Organ vocabulary JSON (defaults to the built-in vocabulary).
    #[arg(long, global = true)]
    vocab: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OrganArgs {
    /// Tumor probability grid (f32).
    #[arg(long)]
    probs: PathBuf,
    /// Binary organ mask (u8) on the same grid.
    #[arg(long)]
    organ_mask: PathBuf,
    /// Report JSON or JSONL file.
    #[arg(long)]
    report: PathBuf,
    /// Record to use when the report file holds several.
    #[arg(long)]
    ct_id: Option<String>,
    /// Organ or sub-segment id.
    #[arg(long)]
    organ: String,
}

impl OrganArgs {
    fn inputs(&self) -> OrganInputs {
        OrganInputs {
            probs: self.probs.clone(),
            organ_mask: self.organ_mask.clone(),
            report: self.report.clone(),
            ct_id: self.ct_id.clone(),
            organ: self.organ.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Volume Loss of one organ; prints {l_forg, l_bkg, l_vol, v_s_mm3, ...}.
    VolumeLoss {
        #[command(flatten)]
        organ: OrganArgs,
        /// Relative volume tolerance of the dead zone.
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        /// Volume smoothing constant E in mm³.
        #[arg(long, default_value_t = 500.0)]
        e: f64,
        /// Where to write dl_vol/dt (f32 grid).
        #[arg(long)]
        grad_out: Option<PathBuf>,
    },
    /// Ball-Loss pseudo-mask of one organ.
    BallMask {
        #[command(flatten)]
        organ: OrganArgs,
        /// Pseudo-mask output (u8 grid).
        #[arg(long)]
        out: PathBuf,
        /// Cross-entropy weights output (f32 grid).
        #[arg(long)]
        weights_out: Option<PathBuf>,
        /// Placement manifest JSON output.
        #[arg(long)]
        manifest_out: Option<PathBuf>,
        /// Ball-Loss config JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Renders phantoms to grid files, reports.jsonl and manifest.jsonl.
    Phantom {
        /// Phantom spec, spec list or random batch JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cohort DSC, NSD and detection F1.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        truth_dir: PathBuf,
        /// Cohort JSONL with ct_id, pred, truth and optional organ_mask.
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated subset of f1,dsc,nsd.
        #[arg(long, default_value = "f1,dsc,nsd")]
        metrics: MetricSet,
        #[arg(long, default_value_t = 2.0)]
        nsd_tolerance_mm: f64,
        /// Probability threshold of the detection rule.
        #[arg(long, default_value_t = 0.5)]
        prob_threshold: f64,
        /// Minimum component volume of the detection rule, mm³.
        #[arg(long, default_value_t = 50.0)]
        min_volume_mm3: f64,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic loss gradients.
    Gradcheck {
        #[arg(long, value_enum)]
        module: GradModule,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest fixture side length.
        #[arg(long, default_value_t = 16)]
        max_dim: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

/// Writes pretty JSON to stdout; a closed pipe (e.g. `| head`) is not an error.
fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let vocabulary = vocabulary_or_default(cli.vocab.as_deref())?;
    match cli.command {
        Command::VolumeLoss { organ, tau, e, grad_out } => {
            let cfg = VolumeLossConfig { e_mm3: e, tau, ..Default::default() };
            let out = run_volume_loss(&organ.inputs(), &cfg, grad_out.as_deref(), &vocabulary)?;
            if out.excluded {
                log::warn!("organ {} is excluded: the report mentions a tumor without size", out.organ);
            }
            print_json(&out)?;
        }
        Command::BallMask { organ, out, weights_out, manifest_out, config } => {
            let cfg: BallLossConfig = match config {
                Some(path) => read_json(&path)?,
                None => BallLossConfig::default(),
            };
            let outputs = BallMaskOutputs { mask: out, weights: weights_out, manifest: manifest_out };
            let manifest = run_ball_mask(&organ.inputs(), &cfg, &outputs, &vocabulary)?;
            for w in &manifest.warnings {
                log::warn!("{w:?}");
            }
            if outputs.manifest.is_none() {
                print_json(&manifest)?;
            }
        }
        Command::Phantom { spec, out_dir } => {
            let batch = load_batch(&spec)?;
            let entries = write_batch(&batch, &vocabulary, &out_dir)
                .with_context(|| format!("writing phantoms to {}", out_dir.display()))?;
            log::info!("wrote {} phantoms to {}", entries.len(), out_dir.display());
        }
        Command::Evaluate {
            pred_dir,
            truth_dir,
            manifest,
            metrics,
            nsd_tolerance_mm,
            prob_threshold,
            min_volume_mm3,
            json_out,
        } => {
            let opts = EvalOptions { metrics, nsd_tolerance_mm, rule: DetectionRule { prob_threshold, min_volume_mm3 } };
            let cases = read_cohort(&manifest)?;
            let report = evaluate_cohort(&cases, &pred_dir, &truth_dir, &opts)?;
            if let Some(e) = &report.f1_error {
                log::warn!("F1 unavailable: {e}");
            }
            match json_out {
                Some(path) => write_json(&path, &report)?,
                None => print_json(&report)?,
            }
        }
        Command::Gradcheck { module, trials, tol, seed, max_dim, step } => {
            let out = run_gradcheck(module, trials, tol, seed, max_dim, step)?;
            print_json(&out)?;
            if !out.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
