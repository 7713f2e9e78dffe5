use std::path::{Path, PathBuf};
use std::process::Command;

use ngram_cli::bench::is_timing_column;
use ngram_core::model::{save_checkpoint, Checkpoint, ModelConfig, ModelParams, EOS};
use ngram_core::{MaskSpec, SeededRng};

const SMOKE: &[&str] = &[
    "--set",
    "train.steps=10",
    "--set",
    "train.dev_size=20",
    "--set",
    "train.eval_every=5",
    "--set",
    "task.max_len=6",
];

fn ngram(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ngram"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_smoke(out: &Path, extra: &[&str]) -> (i32, String, String) {
    let mut args = vec!["train", "--out", path(out)];
    args.extend_from_slice(SMOKE);
    args.extend_from_slice(extra);
    ngram(&args)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Compare against a golden file; `UPDATE_GOLDEN=1` rewrites it.
fn assert_golden(name: &str, actual: &str) {
    let file = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&file, actual).unwrap();
    }
    let expected =
        std::fs::read_to_string(&file).unwrap_or_else(|e| panic!("{}: {e}", file.display()));
    assert_eq!(actual, expected, "golden {name}");
}

/// CSV text with the timing columns removed.
fn strip_timing(csv: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !is_timing_column(header[i]))
        .collect();
    let mut out = String::new();
    for line in std::iter::once(header.join(",")).chain(lines.map(str::to_string)) {
        let cells: Vec<&str> = line.split(',').collect();
        let kept: Vec<&str> = keep.iter().map(|&i| cells[i]).collect();
        out.push_str(&kept.join(","));
        out.push('\n');
    }
    out
}

#[test]
fn missing_config_names_path() {
    let (code, _, err) = ngram(&["train", "--config", "/no/such/run.cfg"]);
    assert_eq!(code, 2);
    assert!(err.contains("/no/such/run.cfg"), "{err}");
}

#[test]
fn bad_config_keys_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "model.layers = 3\n").unwrap();
    let (code, _, err) = ngram(&["train", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("model.layers"), "{err}");
    let (code, _, _) = ngram(&["train", "--set", "train.steps=zero"]);
    assert_eq!(code, 2);
    let (code, _, _) = ngram(&["bench", "--set", "bench.repetitions=3"]);
    assert_eq!(code, 2);
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1);
}

#[test]
fn divergence_exits_three_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, _, err) = train_smoke(&out, &["--set", "train.lr=1e300"]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("diverged at step"), "{err}");
    assert!(!out.exists() || std::fs::read_dir(&out).unwrap().count() == 0);
}

#[test]
fn smoke_train_round_trips_and_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, stdout, err) = train_smoke(&out, &[]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("trained 10 steps"));
    for f in [
        "checkpoint.bin",
        "loss.csv",
        "dev_evals.csv",
        "train_summary.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpt: Checkpoint<f64> =
        ngram_core::model::load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    let mut again = Vec::new();
    ngram_core::model::write_checkpoint(&mut again, &ckpt).unwrap();
    assert_eq!(again, std::fs::read(out.join("checkpoint.bin")).unwrap());
    assert_eq!(ckpt.metadata["task.kind"], "mapped_translation");

    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss,tokens\n0,4.1588830833596"));
    assert_golden("smoke_loss.csv", &loss);
    assert_golden(
        "smoke_dev_evals.csv",
        &std::fs::read_to_string(out.join("dev_evals.csv")).unwrap(),
    );
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(train_smoke(&a, &["--seed", "5"]).0, 0);
    assert_eq!(train_smoke(&b, &["--seed", "5"]).0, 0);
    for f in [
        "checkpoint.bin",
        "loss.csv",
        "dev_evals.csv",
        "train_summary.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    assert_eq!(train_smoke(&c, &["--seed", "6"]).0, 0);
    assert_ne!(
        std::fs::read(a.join("loss.csv")).unwrap(),
        std::fs::read(c.join("loss.csv")).unwrap()
    );
}

const COPY: &[&str] = &[
    "--set",
    "task.kind=copy",
    "--set",
    "task.vocab_size=20",
    "--set",
    "model.vocab_size=20",
    "--set",
    "task.max_len=6",
    "--set",
    "train.lr=0.003",
];

#[test]
fn copy_model_eval_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", path(&run)];
    args.extend_from_slice(COPY);
    args.extend_from_slice(&[
        "--set",
        "train.steps=400",
        "--set",
        "train.eval_every=100",
        "--set",
        "train.dev_size=50",
    ]);
    let (code, _, err) = ngram(&args);
    assert_eq!(code, 0, "{err}");
    let ckpt = run.join("checkpoint.bin");

    let eval_args = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--checkpoint",
            path(&ckpt),
            "--out",
            path(out),
            "--set",
            "eval.size=50",
        ];
        args.extend_from_slice(COPY);
        args.extend_from_slice(extra);
        ngram(&args)
    };
    let (code, stdout, err) = eval_args(&dir.path().join("e1"), &[]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("token_accuracy"));
    let json = std::fs::read_to_string(dir.path().join("e1/eval.json")).unwrap();
    assert_golden("copy_eval.json", &json);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(report["token_accuracy"].as_f64().unwrap() > 0.9, "{json}");
    eval_args(&dir.path().join("e2"), &[]);
    assert_eq!(
        json,
        std::fs::read_to_string(dir.path().join("e2/eval.json")).unwrap()
    );

    let (code, _, err) = eval_args(&dir.path().join("e3"), &["--set", "task.vocab_size=40"]);
    assert_eq!(code, 2);
    assert!(err.contains("20") && err.contains("40"), "{err}");
    assert!(!dir.path().join("e3").exists());

    let mut args = vec![
        "decode",
        "--checkpoint",
        path(&ckpt),
        "--source",
        "5 7 9 11",
    ];
    args.extend_from_slice(COPY);
    let (code, stdout, err) = ngram(&args);
    assert_eq!(code, 0, "{err}");
    assert_eq!(stdout, "output   1 5 7 9 11 2\nexpected 1 5 7 9 11 2\n");
    assert_eq!(ngram(&args).1, stdout);

    let (code, _, err) = ngram(&["eval", "--checkpoint", "/no/ckpt.bin"]);
    assert_eq!(code, 2);
    assert!(err.contains("/no/ckpt.bin"));
}

fn eos_checkpoint(path: &Path) {
    let config = ModelConfig::tiny(MaskSpec::ngram(3).unwrap());
    let mut params = ModelParams::<f64>::init(&config, &mut SeededRng::new(1)).unwrap();
    let last = params.decoder.last_mut().unwrap();
    last.norm_ff.gain.fill(0.0);
    last.norm_ff.bias.fill(1.0);
    for r in 0..config.d_model {
        params.output.set(r, EOS, 1.0);
    }
    let ckpt = Checkpoint {
        config,
        params,
        metadata: Default::default(),
    };
    save_checkpoint(path, &ckpt).unwrap();
}

#[test]
fn decode_eos_checkpoint_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("eos.bin");
    eos_checkpoint(&ckpt);
    let (code, stdout, err) = ngram(&[
        "decode",
        "--checkpoint",
        path(&ckpt),
        "--source",
        "5 7 9",
        "--set",
        "task.kind=copy",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(stdout, "output   1 2\nexpected 1 5 7 9 2\n");
    let (code, again, _) = ngram(&[
        "decode",
        "--checkpoint",
        path(&ckpt),
        "--source",
        "5,7,9",
        "--set",
        "task.kind=copy",
    ]);
    assert_eq!((code, again), (0, stdout));
    let (code, _, err) = ngram(&["decode", "--checkpoint", path(&ckpt), "--source", "5 70"]);
    assert_eq!(code, 2);
    assert!(err.contains("70"), "{err}");
    let (code, _, _) = ngram(&["decode", "--checkpoint", path(&ckpt), "--source", "x"]);
    assert_eq!(code, 2);
}

#[test]
fn grad_check_exit_codes() {
    assert_eq!(ngram(&["grad-check"]).0, 0);
    let (code, _, err) = ngram(&["grad-check", "--set", "grad_check.inject_fault=true"]);
    assert_eq!(code, 1);
    assert!(err.contains("output["), "{err}");
    assert_eq!(ngram(&["grad-check", "--set", "grad_check.h=0"]).0, 2);
    assert_eq!(ngram(&["grad-check", "--set", "model.mask=ngram:3"]).0, 0);
}

#[test]
fn bench_structure_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        ngram(&[
            "bench",
            "--out",
            path(out),
            "--set",
            "bench.lengths=4,12",
            "--set",
            "bench.orders=2,5",
            "--set",
            "bench.repetitions=10",
        ])
    };
    let (code, _, err) = args(&dir.path().join("a"));
    assert_eq!(code, 0, "{err}");
    args(&dir.path().join("b"));
    for f in ["bench_positions.csv", "bench_summary.csv"] {
        let a = strip_timing(&std::fs::read_to_string(dir.path().join("a").join(f)).unwrap());
        let b = strip_timing(&std::fs::read_to_string(dir.path().join("b").join(f)).unwrap());
        assert_eq!(a, b);
        assert_golden(
            &format!(
                "bench_{}",
                f.trim_start_matches("bench_")
                    .replace(".csv", "_structure.csv")
            ),
            &a,
        );
    }
    let positions = std::fs::read_to_string(dir.path().join("a/bench_positions.csv")).unwrap();
    for line in positions.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let (n, path, k, keys): (usize, &str, usize, usize) = (
            c[1].parse().unwrap(),
            c[2],
            c[3].parse().unwrap(),
            c[4].parse().unwrap(),
        );
        let expected = if path == "ring_buffer" {
            k.min(n - 1)
        } else {
            k
        };
        assert_eq!(keys, expected, "{line}");
    }
}

#[test]
fn help_lists_subcommands() {
    let (code, stdout, _) = ngram(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["train", "eval", "decode", "grad-check", "bench"] {
        assert!(stdout.contains(sub), "{sub}");
    }
    assert_eq!(ngram(&["frobnicate"]).0, 2);
}
