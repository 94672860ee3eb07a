//! The four loss modes trained on one corpus over several seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use dail_core::datagen::{generate_corpus, SyntheticCorpus};
use dail_core::eval::{evaluate, EvalOptions};
use dail_core::trainer::{LossMode, TrainConfig};

use crate::commands::train_into;
use crate::{CliError, RunConfig};

pub const CELLS_CSV: &str = "ablation.csv";
pub const SUMMARY_CSV: &str = "ablation_summary.csv";
pub const SUMMARY_TXT: &str = "ablation.txt";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub mode: LossMode,
    pub seed: u64,
    pub verification_accuracy: f64,
    pub domain_probe_accuracy: Option<f64>,
    pub overlap_same_id_cosine: Option<f64>,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Stat {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: LossMode,
    pub runs: usize,
    pub verification_accuracy: Stat,
    pub domain_probe_accuracy: Option<Stat>,
    pub overlap_same_id_cosine: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ablation {
    pub cells: Vec<CellResult>,
    pub summary: Vec<ModeSummary>,
}

impl Ablation {
    pub fn mode(&self, mode: LossMode) -> &ModeSummary {
        self.summary
            .iter()
            .find(|s| s.mode == mode)
            .expect("every mode is summarized")
    }
}

fn run_cell(
    corpus: &SyntheticCorpus,
    train: &TrainConfig,
    eval: &EvalOptions,
    dir: Option<&Path>,
) -> Result<CellResult, CliError> {
    let state = match dir {
        Some(d) => train_into(d, train, corpus, None)?,
        None => dail_core::trainer::train(train, corpus)?.state,
    };
    let report = evaluate(&state.params, corpus, eval)?;
    if let Some(d) = dir {
        fs::write(d.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(CellResult {
        mode: train.loss_mode,
        seed: train.seed,
        verification_accuracy: report.verification_accuracy,
        domain_probe_accuracy: report.domain_probe_accuracy,
        overlap_same_id_cosine: report.overlap_same_id_cosine,
    })
}

/// Trains every loss mode with seeds `train.seed .. train.seed + seeds` on the
/// corpus described by `cfg.gen`. Cell `i` evaluates with `eval.seed + i`.
/// With `out`, each cell keeps its artifacts under `out/<mode>/seed-<s>/`.
pub fn run_ablation(
    cfg: &RunConfig,
    seeds: usize,
    out: Option<&Path>,
) -> Result<Ablation, CliError> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.gen)?;
    if let Some(o) = out {
        corpus.save(&o.join("corpus"), &cfg.gen)?;
    }
    let jobs: Vec<(LossMode, u64)> = LossMode::ALL
        .iter()
        .flat_map(|&m| (0..seeds as u64).map(move |i| (m, i)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(mode, i)| {
            let train = TrainConfig {
                loss_mode: mode,
                seed: cfg.train.seed + i,
                ..cfg.train.clone()
            };
            let eval = EvalOptions {
                seed: cfg.eval.seed + i,
                ..cfg.eval.clone()
            };
            let dir = out.map(|o| o.join(mode.as_str()).join(format!("seed-{}", train.seed)));
            run_cell(&corpus, &train, &eval, dir.as_deref())
        })
        .collect::<Result<Vec<_>, _>>()?;

    let summary = LossMode::ALL
        .iter()
        .map(|&mode| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.mode == mode).collect();
            let acc: Vec<f64> = mine.iter().map(|c| c.verification_accuracy).collect();
            let probe: Vec<f64> = mine
                .iter()
                .filter_map(|c| c.domain_probe_accuracy)
                .collect();
            let overlap: Vec<f64> = mine
                .iter()
                .filter_map(|c| c.overlap_same_id_cosine)
                .collect();
            ModeSummary {
                mode,
                runs: mine.len(),
                verification_accuracy: Stat::of(&acc).expect("seeds >= 1"),
                domain_probe_accuracy: Stat::of(&probe),
                overlap_same_id_cosine: Stat::of(&overlap),
            }
        })
        .collect();
    let ablation = Ablation { cells, summary };
    if let Some(o) = out {
        write_reports(&ablation, o)?;
    }
    Ok(ablation)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn stat_text(s: Option<Stat>, percent: bool) -> String {
    match s {
        Some(Stat { mean, std }) if percent => format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std),
        Some(Stat { mean, std }) => format!("{mean:.4} ± {std:.4}"),
        None => "n/a".into(),
    }
}

pub fn cells_csv(a: &Ablation) -> String {
    let mut s = String::from(
        "mode,seed,verification_accuracy,domain_probe_accuracy,overlap_same_id_cosine\n",
    );
    for c in &a.cells {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{}",
            c.mode,
            c.seed,
            c.verification_accuracy,
            opt(c.domain_probe_accuracy),
            opt(c.overlap_same_id_cosine)
        );
    }
    s
}

pub fn summary_csv(a: &Ablation) -> String {
    let mut s = String::from(
        "mode,runs,verification_accuracy_mean,verification_accuracy_std,domain_probe_accuracy_mean,domain_probe_accuracy_std,overlap_same_id_cosine_mean,overlap_same_id_cosine_std\n",
    );
    for m in &a.summary {
        let v = m.verification_accuracy;
        let p = m.domain_probe_accuracy;
        let o = m.overlap_same_id_cosine;
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{},{},{}",
            m.mode,
            m.runs,
            v.mean,
            v.std,
            opt(p.map(|x| x.mean)),
            opt(p.map(|x| x.std)),
            opt(o.map(|x| x.mean)),
            opt(o.map(|x| x.std))
        );
    }
    s
}

/// Aligned text table, accuracies in percent.
pub fn summary_table(a: &Ablation) -> String {
    let header = [
        "mode",
        "runs",
        "verification acc (%)",
        "domain probe (%)",
        "overlap cosine",
    ];
    let rows: Vec<[String; 5]> = a
        .summary
        .iter()
        .map(|m| {
            [
                m.mode.to_string(),
                m.runs.to_string(),
                stat_text(Some(m.verification_accuracy), true),
                stat_text(m.domain_probe_accuracy, true),
                stat_text(m.overlap_same_id_cosine, false),
            ]
        })
        .collect();
    let width = |i: usize| {
        rows.iter()
            .map(|r| r[i].chars().count())
            .chain([header[i].chars().count()])
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..header.len()).map(width).collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn write_reports(a: &Ablation, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CELLS_CSV), cells_csv(a))?;
    fs::write(dir.join(SUMMARY_CSV), summary_csv(a))?;
    fs::write(dir.join(SUMMARY_TXT), summary_table(a))?;
    Ok(())
}
