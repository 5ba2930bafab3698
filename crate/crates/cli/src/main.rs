use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cloudflow::eval::{write_score_table, CvSpec};
use cloudflow::pipeline::dataset::{read_scene_spec, write_synthetic};
use cloudflow::pipeline::plot::plot_results;
use cloudflow::pipeline::{cross_validate_manifest, cv_spec_from_pairs, parse_pairs, run_pipeline, PipelineConfig};

#[derive(Parser)]
#[command(name = "cloudflow", version, about = "Wind velocity fields from thermal sky image sequences")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate wind fields for every frame of a manifest.
    Run {
        manifest: PathBuf,
        /// `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render a synthetic scene described by a JSON spec.
    Synth {
        spec: PathBuf,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
    /// Draw one SVG per row of a results.csv.
    Plot {
        results: PathBuf,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Cross-validate kernel and solver parameters on every frame.
    Cv {
        manifest: PathBuf,
        /// `cv_*` keys describing the grid.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "cv")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { manifest, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let report = run_pipeline(&manifest, &cfg, &out)?;
            println!(
                "{} result row(s), {} failed frame(s), written to {}",
                report.results.len(),
                report.failures.len(),
                out.display()
            );
        }
        Command::Synth { spec, out } => {
            let spec = read_scene_spec(&spec)?;
            let manifest = write_synthetic(&spec, &out)?;
            println!("{}", manifest.display());
        }
        Command::Plot { results, out } => {
            let written = plot_results(&results, &out)?;
            println!("{} figure(s) written to {}", written.len(), out.display());
        }
        Command::Cv {
            manifest,
            grid,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let text = fs::read_to_string(&grid).with_context(|| format!("reading grid {}", grid.display()))?;
            let base = CvSpec {
                solver: cfg.solver,
                seed: cfg.seed,
                ..CvSpec::default()
            };
            let spec = cv_spec_from_pairs(&parse_pairs(&text)?, base)?;
            let outcomes = cross_validate_manifest(&manifest, &cfg, &spec)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (frame, layer, o) in &outcomes {
                let path = out.join(format!("frame_{frame:04}_layer{layer}.csv"));
                let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                write_score_table(&o.table, BufWriter::new(file))?;
                println!(
                    "frame {frame} layer {layer}: kernel {} C {} epsilon {}",
                    o.best.kernel.name(),
                    o.best.c_reg,
                    o.best.epsilon
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
