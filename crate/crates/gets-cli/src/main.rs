//! Command-line front end for the calibration pipeline.
//!
//! Every subcommand reads the same JSON experiment config (see
//! README). `--seed` narrows the run to one seed, `--out` overrides the
//! config's output directory, `--force` allows overwriting an existing
//! dataset directory.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gets_core::data::{generate_sbm, save_dataset};
use gets_core::experiment::{
    prepare_run, report, run_pipeline, sweep_seeds, DatasetSource, ExperimentConfig,
};
use gets_core::models::evaluate_classifier;

#[derive(Parser)]
#[command(
    name = "gets",
    about = "GNN confidence calibration experiments",
    version
)]
struct Cli {
    /// Experiment config (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run only this seed, overriding the config's seed list
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the config's output_dir
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overwrite existing dataset files
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured SBM dataset and write it to --out
    GenSbm,
    /// Train the classifier for one seed and print its accuracy
    Train,
    /// Train, fit the configured calibrators for one seed, print rows
    Calibrate,
    /// Run every configured seed and write results.csv
    Sweep,
    /// Render the aggregate table for an existing results.csv
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config is required for this subcommand")?;
    let mut cfg = ExperimentConfig::from_json_file(path)
        .with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn single_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenSbm => {
            let cfg = load_config(&cli)?;
            let DatasetSource::Sbm(mut sbm) = cfg.dataset else {
                bail!("config dataset is a directory path; gen-sbm needs an sbm spec");
            };
            if let Some(seed) = cli.seed {
                sbm.seed = seed;
            }
            let out = cli.out.as_ref().context("--out is required for gen-sbm")?;
            let g = generate_sbm(&sbm)?;
            save_dataset(&g, out, cli.force)?;
            println!(
                "wrote {} ({} nodes, {} edges, {} classes) to {}",
                g.name,
                g.num_nodes,
                g.edges.len(),
                g.num_classes,
                out.display()
            );
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            let seed = single_seed(&cfg);
            let run = prepare_run(&cfg, seed)?;
            let acc = |mask: &[usize]| {
                evaluate_classifier(&run.classifier.logits, &run.graph.labels, mask)
            };
            println!(
                "{} seed {seed}: best epoch {}, val nll {:.6}, accuracy train {:.4} val {:.4} test {:.4}",
                run.graph.name,
                run.classifier.best_epoch,
                run.classifier.best_val_nll,
                acc(&run.splits.train),
                acc(&run.splits.val),
                acc(&run.splits.test),
            );
        }
        Command::Calibrate => {
            let cfg = load_config(&cli)?;
            let seed = single_seed(&cfg);
            let out = run_pipeline(&cfg, seed)?;
            println!("dataset,calibrator,seed,ece,accuracy,nll,var_ece");
            for row in &out.rows {
                println!(
                    "{},{},{},{},{},{},{}",
                    row.dataset,
                    row.calibrator,
                    row.seed,
                    row.ece,
                    row.accuracy,
                    row.nll,
                    row.var_ece
                );
            }
            for f in &out.failures {
                eprintln!(
                    "calibrator {} seed {} failed: {}",
                    f.calibrator, f.seed, f.message
                );
            }
            if !out.failures.is_empty() {
                bail!("{} calibrator(s) failed", out.failures.len());
            }
        }
        Command::Sweep => {
            let cfg = load_config(&cli)?;
            let out = sweep_seeds(&cfg)?;
            print!("{}", out.table);
            println!("wrote {}", cfg.output_dir.join("results.csv").display());
            for f in &out.failures {
                eprintln!(
                    "calibrator {} seed {} failed: {}",
                    f.calibrator, f.seed, f.message
                );
            }
            if !out.failures.is_empty() {
                bail!("{} calibrator run(s) failed", out.failures.len());
            }
        }
        Command::Report => {
            let dir = match (&cli.out, &cli.config) {
                (Some(dir), _) => dir.clone(),
                (None, Some(_)) => load_config(&cli)?.output_dir,
                (None, None) => bail!("report needs --out or --config to locate results.csv"),
            };
            let rendered = report(&dir.join("results.csv"))?;
            print!("{rendered}");
        }
    }
    Ok(())
}
