//! `commentary` CLI: meta-train commentaries, evaluate frozen
//! artifacts on fresh students, export metrics, and analyze artifacts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commentary_harness::analyze::analyze;
use commentary_harness::artifact::CommentaryArtifact;
use commentary_harness::config::ExperimentConfig;
use commentary_harness::export::{export, ExportKind};
use commentary_harness::metrics::MetricsLog;
use commentary_harness::runner::{run_eval, run_meta};

#[derive(Parser)]
#[command(name = "commentary", about = "Meta-learned commentary experiments")]
struct Cli {
    /// Override the meta seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output.dir` in the config and the
    /// COMMENTARY_OUT_DIR environment variable).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Svg,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a commentary and write the artifact + metrics.
    Meta {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train fresh students with a frozen commentary artifact, paired
    /// with a no-commentary baseline under the same seeds.
    Eval {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-export a metrics CSV as CSV or an SVG line plot.
    Export {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
    /// Family-specific analysis of an artifact against its dataset.
    Analyze {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

fn out_dir_for(cli_dir: &Option<PathBuf>, cfg_dir: Option<&PathBuf>) -> PathBuf {
    cli_dir
        .clone()
        .or_else(|| std::env::var("COMMENTARY_OUT_DIR").ok().map(PathBuf::from))
        .or_else(|| cfg_dir.cloned())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> commentary_harness::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.meta_seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> commentary_harness::Result<()> {
    match &cli.command {
        Command::Meta { config } => {
            let cfg = load_config(config, cli.seed)?;
            let dir = out_dir_for(&cli.out_dir, cfg.out_dir.as_ref());
            let (artifact, _) = run_meta(&cfg, &dir, cli.quiet)?;
            if !cli.quiet {
                println!(
                    "wrote {} ({} family, {} phi values)",
                    dir.join(commentary_harness::runner::ARTIFACT_FILE).display(),
                    artifact.commentary.family_tag(),
                    artifact.commentary.phi().total_dim()
                );
            }
        }
        Command::Eval { artifact, config } => {
            let cfg = load_config(config, cli.seed)?;
            let dir = out_dir_for(&cli.out_dir, cfg.out_dir.as_ref());
            let artifact = CommentaryArtifact::load(artifact)?;
            run_eval(&artifact, &cfg, &dir, cli.quiet)?;
            if !cli.quiet {
                println!(
                    "wrote {}",
                    dir.join(commentary_harness::runner::EVAL_METRICS_FILE).display()
                );
            }
        }
        Command::Export { metrics, format } => {
            let log = MetricsLog::load(metrics)?;
            let dir = out_dir_for(&cli.out_dir, None);
            std::fs::create_dir_all(&dir)?;
            let (kind, name) = match format {
                Format::Csv => (ExportKind::Csv, "export.csv"),
                Format::Svg => (ExportKind::Svg, "export.svg"),
            };
            let path = dir.join(name);
            export(&log, kind, &path)?;
            if !cli.quiet {
                println!("wrote {}", path.display());
            }
        }
        Command::Analyze { artifact, config } => {
            let cfg = load_config(config, cli.seed)?;
            let dir = out_dir_for(&cli.out_dir, cfg.out_dir.as_ref());
            let artifact = CommentaryArtifact::load(artifact)?;
            let dataset = commentary_harness::runner::build_dataset(&cfg)?.ok_or_else(|| {
                commentary_harness::HarnessError::ArtifactIncompatible(
                    "analysis needs a dataset-backed config".into(),
                )
            })?;
            let report = analyze(&artifact, &dataset, cfg.inner_steps, cfg.log_interval)?;
            report.save(&dir)?;
            if !cli.quiet {
                println!(
                    "wrote {} and {}",
                    dir.join(commentary_harness::analyze::ANALYSIS_CSV).display(),
                    dir.join(commentary_harness::analyze::ANALYSIS_SVG).display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
