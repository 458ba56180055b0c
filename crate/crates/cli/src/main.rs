//! `gsf`: command-line front end for the spectral forgery detector.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsf_core::pipeline::{self, parse_spectrum_kinds, RunConfig, Stage};
use gsf_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "gsf",
    version,
    about = "Training-free graph-spectral forgery detection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Manifest CSV with columns image_id,label,split,path.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "GSF_JOBS")]
    jobs: Option<usize>,
    /// raw, laplacian or both.
    #[arg(long, global = true)]
    spectrum: Option<String>,
    /// Skip images whose matrices fail to load instead of aborting.
    #[arg(long, global = true)]
    continue_on_error: bool,
    /// Extra config override, repeatable: --set k=3
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenspectra and graph controls for every (image, layer).
    Spectra,
    /// Spectral features against the authentic reference sketches.
    Features,
    /// Reference statistics and sketches, saved as JSON.
    Reference,
    /// Layer scores, fused image scores and calibrated decisions.
    Score,
    /// Per-layer scorecards with the composite ranking score.
    Fsel,
    /// Full run with metrics, ROC and PR curves.
    Evaluate,
    /// Null controls: label shuffle, block scramble, weight shuffle.
    Falsify,
    /// Synthetic copy-move severity sweep.
    Sweep,
    /// Grid over spectrum, bundle, z_mode, k and weighting.
    Ablate,
    /// Generate a synthetic dataset with a manifest.
    Synth,
}

fn load_config(
    common: &Common,
    grid: bool,
) -> Result<(RunConfig, std::collections::BTreeMap<String, Vec<String>>)> {
    let (mut cfg, grid_keys) = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
                path: path.clone(),
                message: format!("cannot read config: {e}"),
            })?;
            if grid {
                RunConfig::parse_with_grid(&text)?
            } else {
                (RunConfig::parse(&text)?, Default::default())
            }
        }
        None => (RunConfig::default(), Default::default()),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(m) = &common.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = &common.spectrum {
        cfg.spectrum_kinds = parse_spectrum_kinds(s)?;
    }
    if common.continue_on_error {
        cfg.continue_on_error = true;
    }
    Ok((cfg, grid_keys))
}

fn run(cli: Cli) -> Result<()> {
    let is_ablate = matches!(cli.command, Command::Ablate);
    let (cfg, grid) = load_config(&cli.common, is_ablate)?;
    let jobs = cli
        .common
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let command = cli.command;
    pipeline::with_jobs(jobs, move || -> Result<()> {
        let stage = match command {
            Command::Spectra => Some(Stage::Spectra),
            Command::Features => Some(Stage::Features),
            Command::Reference => Some(Stage::Reference),
            Command::Score => Some(Stage::Score),
            Command::Fsel => Some(Stage::Fsel),
            Command::Evaluate => Some(Stage::Evaluate),
            _ => None,
        };
        if let Some(stage) = stage {
            let out = pipeline::run_stages(cfg, stage)?;
            if stage == Stage::Evaluate {
                for (kind, o) in &out {
                    println!("{}", pipeline::summarize(*kind, &o.metrics));
                }
            }
            return Ok(());
        }
        match command {
            Command::Falsify => {
                for r in pipeline::cmd_falsify(cfg)? {
                    let a = r
                        .auroc
                        .map_or_else(|| "NA".to_string(), |a| format!("{a:.3}"));
                    println!("{} {}: AUROC {a} {}", r.spectrum, r.control, r.detail);
                }
            }
            Command::Sweep => {
                let (_, summaries) = pipeline::cmd_sweep(&cfg)?;
                for s in summaries {
                    let aurocs: Vec<String> = s
                        .mean_auroc
                        .iter()
                        .map(|(sev, a)| format!("{sev}:{a:.3}"))
                        .collect();
                    println!(
                        "{}: mean Spearman {:.3} over {} seeds; AUROC {}",
                        s.spectrum,
                        s.mean_spearman,
                        s.repeats,
                        aurocs.join(" ")
                    );
                }
            }
            Command::Ablate => {
                let rows = pipeline::cmd_ablation_grid(cfg, &grid)?;
                let failed = rows.iter().filter(|r| r.error.is_some()).count();
                println!("{} cells evaluated, {failed} failed", rows.len());
                if let Some(best) = pipeline::best_cell(&rows) {
                    let c = &best.cell;
                    println!(
                        "best: spectrum={} bundle={} z_mode={} k={} weighting={} AUROC {:.3}",
                        c.spectrum,
                        c.bundle,
                        c.z_mode,
                        c.k,
                        c.weighting,
                        best.metrics.as_ref().map_or(f64::NAN, |m| m.auroc)
                    );
                }
            }
            Command::Synth => {
                let path = pipeline::cmd_synth(&cfg)?;
                println!("{}", path.display());
            }
            _ => unreachable!(),
        }
        Ok(())
    })?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
