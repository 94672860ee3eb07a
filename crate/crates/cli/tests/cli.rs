use std::fs;
use std::path::Path;
use std::process::Command;

use dail_cli::checkpoint::Checkpoint;
use dail_cli::run_command;

const SMALL: &str = "\
gen.identities_per_dataset = 8
gen.samples_per_identity = 8
gen.input_dim = 5
train.total_steps = 60
train.stage2_start_step = 20
train.lr_decay_steps = 20, 35
train.batch_size = 16
train.log_every = 5
model.hidden = 12
model.embed_dim = 6
eval.n_pos = 100
eval.n_neg = 100
eval.probe_steps = 100
";

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["dail"];
    argv.extend_from_slice(args);
    run_command(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn strip_wall_clock(metrics: &str) -> Vec<serde_json::Value> {
    metrics
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    assert_eq!(run(&["gen", "--config", p(&cfg), "--out", p(&data)]), 0);
    assert!(data.join("corpus.csv").exists() && data.join("corpus.meta.json").exists());
    assert_eq!(
        run(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&out)
        ]),
        0
    );
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let records = strip_wall_clock(&metrics);
    assert_eq!(records.len(), 13);
    assert_eq!(records[0]["stage"], 1);
    assert_eq!(records.last().unwrap()["step"], 59);
    assert_eq!(records.last().unwrap()["stage"], 2);
    let report = dir.path().join("eval.json");
    assert_eq!(
        run(&[
            "eval",
            "--checkpoint",
            p(&out.join("checkpoint.bin")),
            "--data",
            p(&data),
            "--config",
            p(&cfg),
            "--out",
            p(&report)
        ]),
        0
    );
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let acc = r["verification_accuracy"].as_f64().unwrap();
    assert!((0.5..=1.0).contains(&acc));
    assert_eq!(r["n_neg"], 100);
    // a small pool caps the positives at what it holds
    assert!(r["n_pos"].as_u64().unwrap() <= 100);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, SMALL).unwrap();
    let short = dir.path().join("short.conf");
    fs::write(
        &short,
        SMALL.replace("train.total_steps = 60", "train.total_steps = 27"),
    )
    .unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["gen", "--config", p(&cfg), "--out", p(&data)]), 0);

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let r = dir.path().join("r");
    for out in [&a, &b] {
        assert_eq!(
            run(&[
                "train",
                "--config",
                p(&cfg),
                "--data",
                p(&data),
                "--out",
                p(out)
            ]),
            0
        );
    }
    let ma = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let mb = fs::read_to_string(b.join("metrics.jsonl")).unwrap();
    assert_eq!(strip_wall_clock(&ma), strip_wall_clock(&mb));
    assert_eq!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(b.join("checkpoint.bin")).unwrap()
    );

    assert_eq!(
        run(&[
            "train",
            "--config",
            p(&short),
            "--data",
            p(&data),
            "--out",
            p(&r)
        ]),
        0
    );
    let ck = r.join("checkpoint.bin");
    let ck_copy = dir.path().join("mid.bin");
    fs::copy(&ck, &ck_copy).unwrap();
    assert_eq!(Checkpoint::load(&ck_copy).unwrap().meta.step, 27);
    assert_eq!(
        run(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&r),
            "--resume",
            p(&ck_copy)
        ]),
        0
    );
    let full = Checkpoint::load(&a.join("checkpoint.bin")).unwrap();
    let resumed = Checkpoint::load(&r.join("checkpoint.bin")).unwrap();
    assert_eq!(full.meta, resumed.meta);
    for ((na, ma), (nb, mb)) in full.arrays.iter().zip(&resumed.arrays) {
        assert_eq!(na, nb);
        assert!(ma.max_abs_diff(mb) <= 1e-12, "{na}");
    }
    // the interrupted run also logged its own last step
    let mr = fs::read_to_string(r.join("metrics.jsonl")).unwrap();
    let mut resumed_log = strip_wall_clock(&mr);
    resumed_log.retain(|m| m["step"] != 26);
    assert_eq!(strip_wall_clock(&ma), resumed_log);

    // resuming under a different configuration is refused
    let other = dir.path().join("other.conf");
    fs::write(&other, format!("{SMALL}train.lambda = 0.3\n")).unwrap();
    assert_eq!(
        run(&[
            "train",
            "--config",
            p(&other),
            "--data",
            p(&data),
            "--out",
            p(&r),
            "--resume",
            p(&ck_copy)
        ]),
        2
    );
}

#[test]
fn single_dataset_corpus_evaluates_without_probe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, format!("{SMALL}gen.num_datasets = 1\ngen.overlap_fraction = 0\ntrain.loss_mode = dataset_aware\n")).unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    assert_eq!(run(&["gen", "--config", p(&cfg), "--out", p(&data)]), 0);
    assert_eq!(
        run(&[
            "train",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&out)
        ]),
        0
    );
    let output = Command::new(env!("CARGO_BIN_EXE_dail"))
        .args([
            "eval",
            "--checkpoint",
            p(&out.join("checkpoint.bin")),
            "--data",
            p(&data),
            "--pairs",
            "50",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("single dataset"), "{stderr}");
    let r: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(r["domain_probe_accuracy"].is_null());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["bogus"]), 1);
    assert_eq!(run(&["train", "--data", "x"]), 1);
    assert_eq!(run(&["--help"]), 0);
    let missing = dir.path().join("missing");
    assert_eq!(
        run(&[
            "train",
            "--data",
            p(&missing),
            "--out",
            p(&dir.path().join("o"))
        ]),
        2
    );
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "train.lambda = banana\n").unwrap();
    assert_eq!(
        run(&[
            "gen",
            "--config",
            p(&bad),
            "--out",
            p(&dir.path().join("g"))
        ]),
        2
    );
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"definitely not a checkpoint").unwrap();
    let data = dir.path().join("data");
    assert_eq!(run(&["gen", "--out", p(&data)]), 0);
    assert_eq!(
        run(&["eval", "--checkpoint", p(&junk), "--data", p(&data)]),
        2
    );
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dail"));
        cmd.args(["gen", "--out", p(&out)]).env_remove("DAIL_SEED");
        if let Some(s) = seed {
            cmd.env("DAIL_SEED", s);
        }
        assert!(cmd.status().unwrap().success());
        fs::read_to_string(out.join("corpus.csv")).unwrap()
    };
    let base = gen("a", None);
    assert_eq!(gen("b", Some("0")), base);
    assert_ne!(gen("c", Some("7")), base);
    let status = Command::new(env!("CARGO_BIN_EXE_dail"))
        .args(["gen", "--out", p(&dir.path().join("d"))])
        .env("DAIL_SEED", "seven")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn gradcheck_binary_passes() {
    let output = Command::new(env!("CARGO_BIN_EXE_dail"))
        .args(["gradcheck", "--seed", "5"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    for group in ["embed", "class", "domain"] {
        assert!(
            stdout.contains(&format!("max relative error {group}")),
            "{stdout}"
        );
    }
}

#[test]
fn ablate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("abl");
    assert_eq!(
        run(&[
            "ablate",
            "--config",
            p(&cfg),
            "--out",
            p(&out),
            "--seeds",
            "2"
        ]),
        0
    );
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mode,seed,verification_accuracy,domain_probe_accuracy,overlap_same_id_cosine"
    );
    assert_eq!(lines.count(), 8);
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    let modes: Vec<&str> = rows
        .iter()
        .map(|r| r.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(
        modes,
        [
            "naive",
            "dataset_aware",
            "dataset_aware_grl",
            "dataset_aware_grl_cd"
        ]
    );
    assert!(out
        .join("dataset_aware_grl")
        .join("seed-1")
        .join("checkpoint.bin")
        .exists());
    assert!(out.join("ablation_summary.csv").exists());
}
