use std::path::Path;
use std::process::{Command, Output};

use clap::CommandFactory;
use sambay::cli::{Cli, RunManifest, MANIFEST_FILE};

fn sambay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sambay")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_value(json(&dir.join(MANIFEST_FILE))).unwrap()
}

#[test]
fn plan_reports_aspect_ratio_and_count() {
    let o = sambay(&["plan", "SambaY", "16", "mupp"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("α=124"), "{s}");
    assert!(s.contains("986.3M"), "{s}");
}

#[test]
fn plan_sp_has_unit_multipliers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(sambay(&["--out", out, "plan", "Transformer++", "16", "sp"]).status.success());
    let plan = json(&dir.path().join("plan.json"));
    for g in plan["mup"].as_array().unwrap() {
        assert_eq!(g["lr_multiplier"], 1.0);
        assert_eq!(g["weight_multiplier"], 1.0);
    }
    assert_eq!(plan["residual_multiplier"], 1.0);
    assert_eq!(plan["logit_multiplier"], 1.0);
}

#[test]
fn invalid_depth_is_a_config_error() {
    let o = sambay(&["plan", "SambaY", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("divisible by 4"));
}

#[test]
fn solve_known_architectures() {
    for (arch, alpha) in [("SambaY", "124"), ("Samba+YOCO", "126"), ("MambaY", "120")] {
        let s = stdout(&sambay(&["solve", arch]));
        let line = s.lines().nth(1).unwrap();
        assert_eq!(line.split_whitespace().nth(1), Some(alpha), "{s}");
    }
    assert_eq!(sambay(&["solve", "NotAnArch"]).status.code(), Some(2));
}

fn write_csv(path: &Path, rows: &[(f64, f64)]) {
    let mut s = String::from("x,loss\n");
    for (x, l) in rows {
        s += &format!("{x:e},{l:.17e}\n");
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn fit_command_reports_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("points.csv");
    let pts: Vec<(f64, f64)> = (0..8)
        .map(|i| {
            let x = 1e18 * 10f64.powf(0.5 * i as f64);
            (x, 2.0 * (x / 1e18).powf(-0.5) + 0.58)
        })
        .collect();
    write_csv(&csv, &pts);
    let out = dir.path().join("out");
    let o = sambay(&["--out", out.to_str().unwrap(), "fit", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = json(&out.join("fit.json"));
    assert!((fit["b"].as_f64().unwrap() - 0.5).abs() < 1e-6);
    assert!((fit["c"].as_f64().unwrap() - 0.58).abs() < 1e-6);
    let a = fit["a"].as_f64().unwrap() / 1e18f64.powf(0.5);
    assert!((a - 2.0).abs() < 1e-6, "{fit}");

    write_csv(&csv, &[(1.0, 0.9), (2.0, 0.9), (3.0, 0.9), (4.0, 0.9)]);
    let s = stdout(&sambay(&["fit", csv.to_str().unwrap()]));
    assert!(s.contains("flat losses"), "{s}");

    write_csv(&csv, &pts[..3]);
    assert_eq!(sambay(&["fit", csv.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(sambay(&["fit", "/nonexistent.csv"]).status.code(), Some(2));
}

#[test]
fn every_flag_appears_in_help() {
    let root = Cli::command();
    let globals: Vec<String> = root.get_arguments().filter_map(|a| a.get_long()).map(|l| format!("--{l}")).collect();
    assert_eq!(globals, ["--seed", "--precision", "--out", "--config"]);
    for sub in root.get_subcommands() {
        let name = sub.get_name().to_string();
        let help = stdout(&sambay(&[&name, "--help"]));
        for arg in sub.get_arguments() {
            if let Some(l) = arg.get_long() {
                assert!(help.contains(&format!("--{l}")), "{name} help lacks --{l}");
            }
        }
        for g in ["--seed", "--precision", "--out", "--config"] {
            assert!(help.contains(g), "{name} help lacks {g}");
        }
    }
    let names: Vec<&str> = root.get_subcommands().map(|s| s.get_name()).collect();
    assert_eq!(names, ["plan", "solve", "fit", "train", "eval", "generate", "bench"]);
}

#[test]
fn manifests_replay_to_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 3] = [
        &["plan", "SambaY", "8"],
        &["solve"],
        &["generate", "--depth", "4", "--width", "64", "--prompt", "hello", "--tokens", "8", "--greedy"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let a = dir.path().join(format!("a{i}"));
        let mut argv = vec!["--out", a.to_str().unwrap(), "--seed", "3"];
        argv.extend_from_slice(args);
        assert!(sambay(&argv).status.success());
        let first = manifest(&a);
        assert_eq!(first.seed, if i == 2 { 3 } else { 0 });
        let files: Vec<_> = std::fs::read_dir(&a).unwrap().filter_map(|e| e.ok()).collect();
        assert_eq!(files.iter().filter(|f| f.file_name() == MANIFEST_FILE).count(), 1);
        assert_eq!(files.len(), first.outputs.len() + 1);

        // replay the recorded argv into a fresh directory
        let b = dir.path().join(format!("b{i}"));
        let replay: Vec<String> = first
            .argv
            .iter()
            .map(|s| if *s == a.to_str().unwrap() { b.to_str().unwrap().to_string() } else { s.clone() })
            .collect();
        let replay: Vec<&str> = replay.iter().map(String::as_str).collect();
        assert!(sambay(&replay).status.success());
        let second = manifest(&b);
        assert_eq!(first.artifact_hash, second.artifact_hash, "{args:?}");
        assert_eq!(first.config, second.config);
    }
}

fn tiny_train_config(dir: &Path, lr: f64) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "arch": "SambaY", "depth": 4, "width": 64, "n_heads": 2, "n_kv_heads": 1,
            "head_dim": 32, "mlp_width": 256, "window": 16, "vocab_size": 32,
            "parameterization": "mupp"
        },
        "task": {
            "kind": "associative_recall", "vocab_size": 32, "n_pairs": 4,
            "key_len": 1, "value_len": 1, "sequence_length": 16, "seed": 0
        },
        "steps": 6,
        "batch_size": 4,
        "lr": lr,
        "warmup_fraction": 0.0
    });
    let p = dir.join(format!("train_{lr}.json"));
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn train_eval_generate_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path(), 3e-3);
    let run = dir.path().join("run");
    let (cfg_s, run_s) = (cfg.to_str().unwrap(), run.to_str().unwrap());
    let o = sambay(&["--config", cfg_s, "--out", run_s, "train", "--eval-episodes", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 7);
    assert!(run.join("checkpoint").join("manifest.json").exists());
    let m = manifest(&run);
    assert_eq!(m.outputs, ["trace.csv", "checkpoint", "eval.json"]);

    // deterministic for a fixed seed
    let again = dir.path().join("again");
    sambay(&["--config", cfg_s, "--out", again.to_str().unwrap(), "train", "--eval-episodes", "8"]);
    assert_eq!(manifest(&again).artifact_hash, m.artifact_hash);

    let ckpt = run.join("checkpoint");
    let ev = dir.path().join("eval");
    let o = sambay(&["--config", cfg_s, "--out", ev.to_str().unwrap(), "eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&ev.join("eval.json"))["episodes"], 8);

    let o = sambay(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt-tokens", "3,4,5", "--tokens", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sambay(&["generate", "--checkpoint", ckpt.to_str().unwrap(), "--prompt-tokens", "99"]);
    assert_eq!(o.status.code(), Some(2));

    let b = dir.path().join("bench");
    let o = sambay(&["--out", b.to_str().unwrap(), "--precision", "f64", "bench", "--depth", "4", "--width", "64", "--window", "8", "--positions", "4,16", "--reps", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(b.join("bench.csv")).unwrap();
    assert!(csv.starts_with("position,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(dir.path(), 1e30);
    let o = sambay(&["--config", cfg.to_str().unwrap(), "train", "--steps", "40"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"arch": "SambaY"}, "steps": 1}"#).unwrap();
    assert_eq!(sambay(&["--config", bad.to_str().unwrap(), "train"]).status.code(), Some(2));
    assert_eq!(sambay(&["train"]).status.code(), Some(2));
    assert_eq!(sambay(&["--config", "/missing.json", "train"]).status.code(), Some(2));
    assert_eq!(sambay(&["plan", "--bogus-flag"]).status.code(), Some(2));
}
