//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use dail_cli::ablate::run_ablation;
use dail_cli::checkpoint::Checkpoint;
use dail_cli::RunConfig;
use dail_core::datagen::{generate_corpus, GenConfig, SyntheticCorpus};
use dail_core::eval::{best_threshold, evaluate, EvalOptions};
use dail_core::gradcheck::{run_suite, STEP};
use dail_core::losses::{dataset_aware_loss, softmax_loss};
use dail_core::model::{
    backward, embed_forward, grl_backward, grl_forward, heads_forward, BatchLabels, ParamTensors,
    Stage,
};
use dail_core::registry::{build_class_table, crossing_dropout_mask, dataset_mask, ClassTable};
use dail_core::trainer::{train, LossMode, TrainConfig, Trainer};
use dail_core::{Matrix, Prng};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn core<T>(r: dail_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_table(rng: &mut Prng) -> ClassTable {
    let k = 1 + rng.below(6);
    let mut pairs = Vec::new();
    for d in 0..k {
        for _ in 0..1 + rng.below(8) {
            pairs.push(d);
        }
    }
    rng.shuffle(&mut pairs);
    build_class_table(pairs.into_iter().enumerate()).unwrap()
}

fn mask_correctness() -> Outcome {
    let mut rng = Prng::new(1);
    for t in 0..100 {
        let table = random_table(&mut rng);
        let masks: Vec<Vec<bool>> = (0..table.num_datasets())
            .map(|k| dataset_mask(&table, k).unwrap())
            .collect();
        for c in 0..table.num_classes() {
            let owners = masks.iter().filter(|m| m[c]).count();
            ensure(
                owners == 1,
                format!("table {t}: class {c} in {owners} masks"),
            )?;
        }
        for (k, m) in masks.iter().enumerate() {
            let pop = m.iter().filter(|&&b| b).count();
            ensure(
                pop == table.per_dataset_class_count()[k],
                format!("table {t}: dataset {k} popcount {pop}"),
            )?;
        }
    }
    Ok("100 tables partition exactly".into())
}

fn small_config(mode: LossMode) -> TrainConfig {
    TrainConfig {
        loss_mode: mode,
        batch_size: 32,
        total_steps: 200,
        stage2_start_step: 70,
        lr_decay_steps: vec![70, 117],
        ..TrainConfig::default()
    }
}

fn embed_and_class(p: &ParamTensors) -> ParamTensors {
    ParamTensors {
        domain: None,
        ..p.clone()
    }
}

fn lockstep(
    corpus: &SyntheticCorpus,
    a: TrainConfig,
    b: TrainConfig,
    whole: bool,
) -> Result<f64, String> {
    let steps = a.total_steps;
    let mut ta = core(Trainer::new(a, corpus))?;
    let mut tb = core(Trainer::new(b, corpus))?;
    let mut worst = 0.0f64;
    for _ in 0..steps {
        core(ta.step())?;
        core(tb.step())?;
        let (pa, pb) = (&ta.state().params.weights, &tb.state().params.weights);
        let d = if whole {
            pa.max_abs_diff(pb)
        } else {
            embed_and_class(pa).max_abs_diff(&embed_and_class(pb))
        };
        worst = worst.max(d);
    }
    Ok(worst)
}

fn single_dataset_equivalence() -> Outcome {
    let mut rng = Prng::new(2);
    let mut loss_gap = 0.0f64;
    for _ in 0..50 {
        let n = 1 + rng.below(6);
        let c = 2 + rng.below(8);
        let logits = core(Matrix::from_vec(
            n,
            c,
            (0..n * c).map(|_| 5.0 * rng.normal()).collect(),
        ))?;
        let targets: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let table = core(build_class_table((0..c).map(|j| (j, 0))))?;
        let masks = vec![core(dataset_mask(&table, 0))?; n];
        let a = core(dataset_aware_loss(&logits, &targets, &masks))?;
        let b = core(softmax_loss(&logits, &targets))?;
        loss_gap = loss_gap
            .max((a.loss - b.loss).abs())
            .max(a.grad_logits.max_abs_diff(&b.grad_logits));
    }
    ensure(loss_gap <= 1e-12, format!("loss gap {loss_gap:e}"))?;
    let corpus = core(generate_corpus(&GenConfig {
        num_datasets: 1,
        overlap_fraction: 0.0,
        ..GenConfig::default()
    }))?;
    let traj = lockstep(
        &corpus,
        small_config(LossMode::Naive),
        small_config(LossMode::DatasetAware),
        true,
    )?;
    ensure(traj <= 1e-12, format!("trajectory gap {traj:e}"))?;
    Ok(format!(
        "loss gap {loss_gap:.1e}, trajectory gap {traj:.1e}"
    ))
}

fn gradient_sparsity() -> Outcome {
    let corpus = core(generate_corpus(&GenConfig::default()))?;
    let cfg = TrainConfig {
        batch_size: 16,
        total_steps: 100,
        ..small_config(LossMode::DatasetAware)
    };
    let mut trainer = core(Trainer::new(cfg, &corpus))?;
    let table = &corpus.class_table;
    let mut rows_checked = 0;
    let mut overlap_entries = 0;
    for step in 0..50 {
        let batch = core(trainer.batch_for(step))?;
        let params = &trainer.state().params;
        let mut trace = core(embed_forward(params, &batch.x))?;
        let (logits, _) = core(heads_forward(params, &mut trace, &batch.targets))?;
        let out = core(dataset_aware_loss(&logits, &batch.targets, &batch.masks))?;
        for (i, &t) in batch.targets.iter().enumerate() {
            let identity = corpus.identity_of_class[t];
            for c in 0..table.num_classes() {
                if batch.masks[i][c] || c == t {
                    continue;
                }
                let g = out.grad_logits.get(i, c);
                ensure(
                    g == 0.0,
                    format!("batch {step}: sample {i} class {c} gradient {g}"),
                )?;
                if corpus.identity_of_class[c] == identity {
                    overlap_entries += 1;
                }
            }
        }
        // W_y rows: restrict the batch to one dataset so other datasets' rows are inactive
        let k = batch.dataset_ids[0];
        let keep: Vec<usize> = (0..batch.targets.len())
            .filter(|&i| batch.dataset_ids[i] == k)
            .collect();
        let x = batch.x.select_rows(&keep);
        let targets: Vec<usize> = keep.iter().map(|&i| batch.targets[i]).collect();
        let ids: Vec<usize> = keep.iter().map(|&i| batch.dataset_ids[i]).collect();
        let masks: Vec<Vec<bool>> = keep.iter().map(|&i| batch.masks[i].clone()).collect();
        let mut sub = core(embed_forward(params, &x))?;
        core(heads_forward(params, &mut sub, &targets))?;
        let labels = BatchLabels {
            targets: &targets,
            dataset_ids: &ids,
            masks: &masks,
        };
        let grads = core(backward(params, &sub, labels, Stage::Separate))?.grads;
        for c in 0..table.num_classes() {
            if masks.iter().all(|m| !m[c]) {
                let zero = grads.class_weight.row(c).iter().all(|&g| g == 0.0)
                    && grads.class_bias.as_ref().is_none_or(|b| b.get(0, c) == 0.0);
                ensure(zero, format!("batch {step}: W_y row {c} nonzero"))?;
                rows_checked += 1;
            }
        }
    }
    ensure(
        overlap_entries > 0,
        "no overlapping-identity labels encountered",
    )?;
    Ok(format!("{rows_checked} inactive W_y rows and {overlap_entries} overlapping-label logits exactly zero"))
}

fn gradient_checks() -> Outcome {
    let reports = core(run_suite(0))?;
    let worst = reports.iter().map(|r| r.worst()).fold(0.0, f64::max);
    let bad: Vec<&str> = reports
        .iter()
        .filter(|r| r.worst() > 1e-5)
        .map(|r| r.case.as_str())
        .collect();
    ensure(bad.is_empty(), format!("cases above 1e-5: {bad:?}"))?;
    ensure(STEP == 1e-6, "finite-difference step is not 1e-6")?;
    let status = Command::new(env!("CARGO_BIN_EXE_dail"))
        .arg("gradcheck")
        .output()
        .map_err(|e| e.to_string())?
        .status;
    ensure(
        status.success(),
        format!("`dail gradcheck` exited with {status}"),
    )?;
    Ok(format!(
        "{} cases, worst relative error {worst:.2e}; `dail gradcheck` exit 0",
        reports.len()
    ))
}

fn grl_semantics() -> Outcome {
    let mut rng = Prng::new(5);
    let x = core(Matrix::from_vec(
        7,
        5,
        (0..35).map(|_| rng.normal() * 1e3).collect(),
    ))?;
    let fwd = grl_forward(&x);
    ensure(
        fwd.as_slice()
            .iter()
            .zip(x.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()),
        "forward is not bitwise identity",
    )?;
    for lambda in [0.0, 0.1, 0.37, 2.0] {
        let back = grl_backward(&x, lambda);
        let exact = back
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .all(|(b, u)| b.to_bits() == (-lambda * u).to_bits());
        ensure(
            exact,
            format!("backward at lambda {lambda} differs from -lambda*upstream"),
        )?;
    }
    let corpus = core(generate_corpus(&GenConfig::default()))?;
    let stage2 = TrainConfig {
        lambda: 0.0,
        stage2_start_step: 0,
        lr_decay_steps: vec![0, 117],
        ..small_config(LossMode::DatasetAwareGrl)
    };
    let stage1 = TrainConfig {
        stage2_start_step: stage2.total_steps,
        ..stage2.clone()
    };
    let gap = lockstep(&corpus, stage2, stage1, false)?;
    ensure(gap <= 1e-12, format!("W_f/W_y gap {gap:e}"))?;
    Ok(format!(
        "bitwise forward/backward; lambda=0 stage-2 vs stage-1 gap {gap:.1e}"
    ))
}

fn crossing_dropout() -> Outcome {
    let mut rng = Prng::new(6);
    for _ in 0..20 {
        let table = random_table(&mut rng);
        for k in 0..table.num_datasets() {
            ensure(
                core(crossing_dropout_mask(&table, k, 0.0, &mut rng))?
                    == core(dataset_mask(&table, k))?,
                "p=0 differs from dataset mask",
            )?;
            ensure(
                core(crossing_dropout_mask(&table, k, 1.0, &mut rng))?
                    .iter()
                    .all(|&b| b),
                "p=1 is not all-ones",
            )?;
        }
    }
    let table = core(build_class_table((0..2000).map(|c| (c, c / 1000))))?;
    let mut active = 0usize;
    let mut draws = 0usize;
    let mut prng = Prng::new(11);
    for _ in 0..1000 {
        let m = core(crossing_dropout_mask(&table, 0, 0.01, &mut prng))?;
        active += m[1000..].iter().filter(|&&b| b).count();
        draws += 1000;
    }
    let frac = active as f64 / draws as f64;
    let band = 3.0 * (0.01f64 * 0.99 / 1e6).sqrt();
    ensure(draws == 1_000_000, "wrong draw count")?;
    ensure(
        (frac - 0.01).abs() <= band,
        format!("active fraction {frac} outside 0.01 ± {band:.6}"),
    )?;
    Ok(format!(
        "p=0/p=1 exact; active fraction {frac:.6} within 0.01 ± {band:.6}"
    ))
}

fn ablation_direction() -> Outcome {
    let a = run_ablation(&RunConfig::default(), 5, None).map_err(|e| e.to_string())?;
    let naive = a.mode(LossMode::Naive);
    let da = a.mode(LossMode::DatasetAware);
    let grl = a.mode(LossMode::DatasetAwareGrl);
    let (acc_n, acc_da, acc_grl) = (
        naive.verification_accuracy.mean,
        da.verification_accuracy.mean,
        grl.verification_accuracy.mean,
    );
    let probe_da = da.domain_probe_accuracy.ok_or("no probe for DA")?.mean;
    let probe_grl = grl.domain_probe_accuracy.ok_or("no probe for DA+GRL")?.mean;
    let detail = format!(
        "acc naive {:.2} / DA {:.2} / DA+GRL {:.2}; probe DA {:.2} / DA+GRL {:.2}",
        100.0 * acc_n,
        100.0 * acc_da,
        100.0 * acc_grl,
        100.0 * probe_da,
        100.0 * probe_grl
    );
    ensure(
        acc_da >= acc_n + 0.02,
        format!("DA < Naive + 2 points: {detail}"),
    )?;
    ensure(
        acc_grl >= acc_da - 0.005,
        format!("DA+GRL < DA - 0.5 points: {detail}"),
    )?;
    ensure(
        probe_grl <= probe_da - 0.10,
        format!("probe gap under 10 points: {detail}"),
    )?;
    Ok(detail)
}

fn overlap_healing() -> Outcome {
    let corpus = core(generate_corpus(&GenConfig {
        overlap_fraction: 0.5,
        ..GenConfig::default()
    }))?;
    let mut means = [0.0; 2];
    for (slot, mode) in [LossMode::Naive, LossMode::DatasetAware]
        .into_iter()
        .enumerate()
    {
        for i in 0..5u64 {
            let cfg = TrainConfig {
                loss_mode: mode,
                seed: i,
                ..TrainConfig::default()
            };
            let params = core(train(&cfg, &corpus))?.params;
            let report = core(evaluate(
                &params,
                &corpus,
                &EvalOptions {
                    seed: i,
                    ..EvalOptions::default()
                },
            ))?;
            means[slot] += report
                .overlap_same_id_cosine
                .ok_or("overlap score missing")?
                / 5.0;
        }
    }
    let gap = means[1] - means[0];
    ensure(
        gap >= 0.05,
        format!("DA - Naive overlap cosine {gap:.4} < 0.05"),
    )?;
    Ok(format!(
        "overlap cosine naive {:.4}, DA {:.4}, gap {gap:.4}",
        means[0], means[1]
    ))
}

fn determinism_and_persistence() -> Outcome {
    let corpus = core(generate_corpus(&GenConfig::default()))?;
    let cfg = TrainConfig {
        log_every: 1,
        ..small_config(LossMode::DatasetAwareGrlCd)
    };
    let cfg = TrainConfig { cd_p: 0.05, ..cfg };
    let lines = |o: &dail_core::trainer::TrainOutput| -> String {
        o.metrics
            .iter()
            .map(|m| m.deterministic_line() + "\n")
            .collect()
    };
    let a = core(train(&cfg, &corpus))?;
    let b = core(train(&cfg, &corpus))?;
    ensure(
        lines(&a).as_bytes() == lines(&b).as_bytes(),
        "metrics streams differ",
    )?;

    let mut t = core(Trainer::new(cfg.clone(), &corpus))?;
    core(t.run_until(83, |_| {}))?;
    let bytes = Checkpoint::from_state(t.state(), &cfg)
        .to_bytes()
        .map_err(|e| e.to_string())?;
    let restored = Checkpoint::from_bytes(&bytes)
        .and_then(|c| c.restore(&corpus))
        .map_err(|e| e.to_string())?;
    let mut resumed = core(Trainer::resume(cfg.clone(), &corpus, restored))?;
    core(resumed.run_until(cfg.total_steps, |_| {}))?;
    let gap = resumed
        .state()
        .params
        .weights
        .max_abs_diff(&a.params.weights);
    let mgap = resumed.state().momentum.max_abs_diff(&a.state.momentum);
    ensure(
        gap.max(mgap) <= 1e-12,
        format!("resume gap {gap:e} (momentum {mgap:e})"),
    )?;

    // the same through the binary
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        "train.total_steps = 150\ntrain.stage2_start_step = 50\ntrain.lr_decay_steps = 50, 90\n",
    )
    .map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let bin = env!("CARGO_BIN_EXE_dail");
    let run = |args: &[&std::ffi::OsStr]| {
        Command::new(bin)
            .args(args)
            .env_remove("DAIL_SEED")
            .output()
    };
    let ok =
        |o: std::io::Result<std::process::Output>| o.map(|o| o.status.success()).unwrap_or(false);
    ensure(
        ok(run(&["gen".as_ref(), "--out".as_ref(), data.as_os_str()])),
        "dail gen failed",
    )?;
    let mut logs = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        ensure(
            ok(run(&[
                "train".as_ref(),
                "--config".as_ref(),
                conf.as_os_str(),
                "--data".as_ref(),
                data.as_os_str(),
                "--out".as_ref(),
                out.as_os_str(),
            ])),
            "dail train failed",
        )?;
        let text = std::fs::read_to_string(out.join("metrics.jsonl")).map_err(|e| e.to_string())?;
        let stripped: Vec<String> = text
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v.to_string()
            })
            .collect();
        logs.push(stripped);
    }
    ensure(logs[0] == logs[1], "CLI metrics logs differ")?;
    Ok(format!(
        "byte-identical metrics; resume gap {:.1e}",
        gap.max(mgap)
    ))
}

fn brute_force(sims: &[f64], same: &[bool]) -> f64 {
    let mut sorted = sims.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut cands = vec![f64::NEG_INFINITY, f64::INFINITY];
    cands.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let best = cands
        .iter()
        .map(|&t| {
            sims.iter()
                .zip(same)
                .filter(|(&s, &y)| (s >= t) == y)
                .count()
        })
        .max()
        .unwrap();
    best as f64 / sims.len() as f64
}

fn verification_metric() -> Outcome {
    let mut rng = Prng::new(10);
    for set in 0..200 {
        let n = 2 + rng.below(60);
        let coarse = rng.below(3) == 0;
        let sims: Vec<f64> = (0..n)
            .map(|_| {
                let s = rng.uniform_range(-1.0, 1.0);
                if coarse {
                    (s * 5.0).round() / 5.0
                } else {
                    s
                }
            })
            .collect();
        let mut same: Vec<bool> = (0..n).map(|_| rng.below(2) == 0).collect();
        same[0] = true;
        same[1] = false;
        let (acc, _) = core(best_threshold(&sims, &same))?;
        let oracle = brute_force(&sims, &same);
        ensure(
            acc == oracle,
            format!("set {set}: {acc} vs brute force {oracle}"),
        )?;
    }
    Ok("200 pair sets match the brute-force oracle exactly".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("mask correctness", Duration::from_secs(1), mask_correctness),
        (
            "single-dataset equivalence",
            Duration::from_secs(10),
            single_dataset_equivalence,
        ),
        (
            "gradient sparsity",
            Duration::from_secs(5),
            gradient_sparsity,
        ),
        ("gradient checks", Duration::from_secs(30), gradient_checks),
        ("GRL semantics", Duration::from_secs(10), grl_semantics),
        (
            "crossing dropout",
            Duration::from_secs(10),
            crossing_dropout,
        ),
        (
            "ablation ordering",
            Duration::from_secs(600),
            ablation_direction,
        ),
        ("overlap healing", Duration::from_secs(600), overlap_healing),
        (
            "determinism and persistence",
            Duration::from_secs(60),
            determinism_and_persistence,
        ),
        (
            "verification metric",
            Duration::from_secs(5),
            verification_metric,
        ),
    ];
    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > *budget => {
                Err(format!("{d}; took {elapsed:.1?}, budget {budget:?}"))
            }
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL  {:>2}. {name}: {why} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failures} failed",
        criteria.len() - failures
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
