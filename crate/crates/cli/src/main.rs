use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glclef_cli::commands::{self, parse_lang_path, Split};
use glclef_cli::experiment::{run_experiment, write_experiment};
use glclef_cli::{exit_code, ExperimentConfig};

/// Zero-shot cross-lingual intent detection and slot filling with
/// contrastive code-switching.
#[derive(Parser)]
#[command(name = "glclef", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic pseudo-multilingual corpora and lexicons.
    GenData {
        /// Synthetic spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one code-switched positive per source utterance.
    Augment {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output TSV; a `.manifest.json` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Run seed whose switching stream is used [default: first config seed].
        #[arg(long)]
        seed: Option<u64>,
        /// Source split to augment.
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train once per config seed and summarize across seeds.
    Train {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Seeds trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Output directory [default: the config's `output`].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on test corpora.
    Eval {
        /// Checkpoint JSON written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test corpus as LANG=PATH; repeatable.
        #[arg(long, value_parser = parse_lang_path)]
        test: Vec<(String, PathBuf)>,
        /// Directory whose `<lang>.test.tsv` files are all evaluated.
        #[arg(long)]
        test_dir: Option<PathBuf>,
        /// Output directory for report.json and report.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Project sentence vectors onto two principal axes as `lang,x,y` CSV.
    Project {
        /// Checkpoint JSON written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus as LANG=PATH; repeatable.
        #[arg(long = "corpus", alias = "corpora", value_parser = parse_lang_path, required = true)]
        corpora: Vec<(String, PathBuf)>,
        /// Output CSV; a `.json` sidecar with the explained variance is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let m = commands::gen_data(&spec, &out)?;
            println!("wrote {} files to {}", m.files.len() + 1, out.display());
        }
        Command::Augment {
            config,
            out,
            seed,
            split,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = commands::augment(&cfg, seed, split, &out)?;
            println!("wrote {} positives to {}", m.rows, out.display());
        }
        Command::Train { config, jobs, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (mut cfg, data) = cfg.load_data()?;
            if let Some(out) = out {
                cfg.output = out;
            }
            let runs = run_experiment(&cfg, &data, jobs)?;
            let summary = write_experiment(&cfg.output, &cfg, &runs)?;
            print!("{}", summary.to_table());
        }
        Command::Eval {
            checkpoint,
            mut test,
            test_dir,
            out,
        } => {
            if let Some(dir) = test_dir {
                test.extend(commands::test_files_in(&dir)?);
            }
            let e = commands::eval(&checkpoint, &test, &out)?;
            print!("{}", e.report.to_table());
        }
        Command::Project {
            checkpoint,
            corpora,
            out,
        } => {
            let m = commands::project(&checkpoint, &corpora, &out)?;
            println!(
                "projected {} sentences, explained variance {:.4}",
                m.rows, m.explained
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
