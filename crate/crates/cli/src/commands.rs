use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use dail_core::datagen::{generate_corpus, SyntheticCorpus};
use dail_core::eval::evaluate;
use dail_core::gradcheck::{run_suite, DEFAULT_TOLERANCE};
use dail_core::numerics::PRNG_ALGORITHM;
use dail_core::trainer::{TrainConfig, TrainState, Trainer};

use crate::ablate::{run_ablation, summary_table};
use crate::checkpoint::Checkpoint;
use crate::config::SEED_ENV;
use crate::{CliError, RunConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_FILE: &str = "run.json";
/// `gradcheck` fails when any group exceeds this relative error.
pub const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "dail",
    version,
    about = "Dataset-aware training on merged synthetic corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-dataset corpus.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus written by `gen`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; metrics are appended.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Positive and negative pairs to draw (each).
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate all four loss modes over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_corpus(dir: &Path) -> Result<SyntheticCorpus, CliError> {
    SyntheticCorpus::load(dir)
        .map(|(c, _)| c)
        .map_err(|e| CliError::Failed(format!("cannot load corpus from {}: {e}", dir.display())))
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Gen { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = generate_corpus(&cfg.gen)?;
            corpus.save(&out, &cfg.gen)?;
            println!(
                "wrote {} samples, {} classes over {} datasets ({} shared identities) to {}",
                corpus.len(),
                corpus.num_classes(),
                corpus.num_datasets(),
                corpus.shared_identities().len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = load_corpus(&data)?;
            let state = match resume {
                Some(p) => {
                    let ck = Checkpoint::load(&p)?;
                    let same = TrainConfig {
                        total_steps: cfg.train.total_steps,
                        ..ck.meta.config.clone()
                    };
                    if same != cfg.train {
                        return Err(CliError::Invalid(
                            "resume config differs from the checkpoint's (only train.total_steps may change)".into(),
                        ));
                    }
                    Some(ck.restore(&corpus)?)
                }
                None => None,
            };
            let state = train_into(&out, &cfg.train, &corpus, state)?;
            println!(
                "trained to step {}; artifacts in {}",
                state.step,
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            pairs,
            config,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = pairs {
                cfg.eval.n_pos = n;
                cfg.eval.n_neg = n;
            }
            let corpus = load_corpus(&data)?;
            let state = Checkpoint::load(&checkpoint)?.restore(&corpus)?;
            let report = evaluate(&state.params, &corpus, &cfg.eval)?;
            for note in &report.notes {
                eprintln!("note: {note}");
            }
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(p) = out {
                fs::write(p, text + "\n")?;
            }
        }
        Command::Gradcheck { seed } => {
            let reports = run_suite(seed)?;
            let mut worst_by_group: Vec<(String, f64)> = Vec::new();
            for r in &reports {
                for g in &r.groups {
                    println!("{:40} {:7} {:.3e}", r.case, g.group, g.max_rel_error);
                    match worst_by_group.iter_mut().find(|w| w.0 == g.group) {
                        Some(w) => w.1 = w.1.max(g.max_rel_error),
                        None => worst_by_group.push((g.group.clone(), g.max_rel_error)),
                    }
                }
            }
            println!();
            for (group, err) in &worst_by_group {
                println!("max relative error {group:7} {err:.3e}");
            }
            let worst = worst_by_group.iter().map(|w| w.1).fold(0.0, f64::max);
            if worst > GRADCHECK_LIMIT {
                return Err(CliError::Failed(format!(
                    "gradient check failed: {worst:.3e} exceeds {GRADCHECK_LIMIT:e}"
                )));
            }
            if worst > DEFAULT_TOLERANCE {
                eprintln!("note: worst error {worst:.3e} is above {DEFAULT_TOLERANCE:e}");
            }
        }
        Command::Ablate { config, out, seeds } => {
            let cfg = load_config(config.as_deref())?;
            let seeds = seeds.unwrap_or(cfg.ablate_seeds);
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.render())?;
            let ablation = run_ablation(&cfg, seeds, Some(&out))?;
            print!("{}", summary_table(&ablation));
        }
    }
    Ok(())
}

/// Trains into `dir`: JSON-lines metrics, final checkpoint and a run summary.
/// When resuming, metrics are appended to the existing log.
pub fn train_into(
    dir: &Path,
    config: &TrainConfig,
    corpus: &SyntheticCorpus,
    resume: Option<TrainState>,
) -> Result<TrainState, CliError> {
    fs::create_dir_all(dir)?;
    let resuming = resume.is_some();
    let mut trainer = match resume {
        Some(state) => Trainer::resume(config.clone(), corpus, state)?,
        None => Trainer::new(config.clone(), corpus)?,
    };
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(dir.join(METRICS_FILE))?;
    let mut lines = String::new();
    trainer.run_until(config.total_steps, |m| {
        lines.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        lines.push('\n');
    })?;
    log.write_all(lines.as_bytes())?;
    let state = trainer.into_state();
    Checkpoint::from_state(&state, config).save(&dir.join(CHECKPOINT_FILE))?;
    let run = json!({
        "config": config,
        "final_step": state.step,
        "optimizer": "sgd_momentum",
        "prng_algorithm": PRNG_ALGORITHM,
        "num_samples": corpus.len(),
        "num_classes": corpus.num_classes(),
        "num_datasets": corpus.num_datasets(),
    });
    fs::write(
        dir.join(RUN_FILE),
        serde_json::to_string_pretty(&run)? + "\n",
    )?;
    Ok(state)
}
