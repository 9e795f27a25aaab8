use std::path::Path;
use std::process::{Command, Output};

fn pad(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pad"))
        .args(args)
        .env("PAD_OUT_DIR", out)
        .output()
        .expect("pad runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = pad(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(dir.path(), &["--help"]);
    for cmd in ["gen-data", "train", "decode", "eval", "verify", "Exit codes"] {
        assert!(top.contains(cmd), "{cmd}");
    }
    let decode = ok(dir.path(), &["decode", "--help"]);
    for flag in [
        "--beta",
        "--k",
        "--strategy",
        "--temperature",
        "--seed",
        "--prompts",
        "--trace",
        "--base-only",
        "--max-new-tokens",
        "--out-dir",
        "--config",
    ] {
        assert!(decode.contains(flag), "{flag}");
    }
    assert!(decode.contains("decode.beta = 1.0") && decode.contains("decode.k = 10"));
    let eval = ok(dir.path(), &["eval", "--help"]);
    for flag in ["--sweep", "--betas", "--ks", "--preference", "--output"] {
        assert!(eval.contains(flag), "{flag}");
    }
    assert!(ok(dir.path(), &["train", "--help"]).contains("[default: all]"));
    assert!(ok(dir.path(), &["verify", "--help"]).contains("--instances"));
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[decode]\nbetta = 1.0\n").unwrap();
    assert_eq!(
        pad(dir.path(), &["--config", bad.to_str().unwrap(), "gen-data"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(pad(dir.path(), &["train", "--stage", "3"]).status.code(), Some(2));

    let missing = pad(dir.path(), &["train"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("pairs.jsonl"));
    let no_config = pad(
        dir.path(),
        &["--config", dir.path().join("nope.toml").to_str().unwrap(), "verify"],
    );
    assert_eq!(no_config.status.code(), Some(3));

    ok(dir.path(), &["gen-data"]);
    let early = pad(dir.path(), &["train", "--stage", "2"]);
    assert_eq!(early.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&early.stderr).contains("stage 1"));

    ok(dir.path(), &["train"]);
    assert_eq!(
        pad(dir.path(), &["decode", "--preference", "rude"]).status.code(),
        Some(2)
    );
}

#[test]
fn out_dir_flag_and_env_are_honoured() {
    let env_dir = tempfile::tempdir().unwrap();
    let nested = env_dir.path().join("a/b");
    let s = ok(&nested, &["gen-data"]);
    assert!(s.contains("pairs: 600"));
    assert!(nested.join("corpus.jsonl").exists());

    let flag_dir = env_dir.path().join("flag");
    ok(&nested, &["--out-dir", flag_dir.to_str().unwrap(), "gen-data"]);
    assert_eq!(
        std::fs::read(nested.join("pairs.jsonl")).unwrap(),
        std::fs::read(flag_dir.join("pairs.jsonl")).unwrap()
    );
}

#[test]
fn config_file_drives_commands_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[eval]\nheldout_prompts = 7\n\n[decode]\nmax_new_tokens = 16\n").unwrap();
    let c = cfg.to_str().unwrap();
    ok(dir.path(), &["-c", c, "gen-data"]);
    ok(dir.path(), &["-c", c, "train"]);
    ok(
        dir.path(),
        &["-c", c, "decode", "-p", "markerful", "--k", "3", "--trace"],
    );
    let trace = std::fs::read_to_string(dir.path().join("reports/generations_markerful.trace.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(header["meta"]["k"], 3);
    assert_eq!(header["meta"]["max_new_tokens"], 16);
    assert_eq!(trace.lines().count(), 8);

    ok(dir.path(), &["-c", c, "decode", "--base-only"]);
    ok(
        dir.path(),
        &[
            "-c",
            c,
            "decode",
            "-p",
            "markerful",
            "--beta",
            "0",
            "-o",
            dir.path().join("b0.jsonl").to_str().unwrap(),
        ],
    );
    assert_eq!(
        std::fs::read(dir.path().join("b0.jsonl")).unwrap(),
        std::fs::read(dir.path().join("reports/generations_base.jsonl")).unwrap()
    );

    let out = ok(
        dir.path(),
        &[
            "-c",
            c,
            "eval",
            "--sweep",
            "-p",
            "markerful",
            "--betas",
            "0,1",
            "--ks",
            "2",
        ],
    );
    assert!(out.contains("beta 0") && out.contains("k 2"));
    let beta_table = std::fs::read_to_string(dir.path().join("reports/sweep_beta.csv")).unwrap();
    assert_eq!(beta_table.lines().count(), 3);
}

#[test]
fn eval_of_a_run_against_itself_is_even() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["train"]);
    ok(dir.path(), &["decode", "-p", "polite"]);
    let run = dir.path().join("reports/generations_polite.jsonl");
    let r = run.to_str().unwrap();
    let out = ok(dir.path(), &["eval", r, r, "-p", "polite"]);
    assert!(out.contains("win rate 0.5000"), "{out}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/eval_polite.json")).unwrap()).unwrap();
    assert_eq!(json["report"]["win_rate"], 0.5);
    assert!(json["config_hash"].is_string() && json["seed"].is_u64());
}

#[test]
fn verify_runs_requested_instance_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["verify", "--instances", "40", "--seed", "3"]);
    assert!(out.contains("instances=40"));
    assert!(out.contains("PASS") && !out.contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/verify.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["report"]["theorem"]["reports"].as_array().unwrap().len(), 40);
    assert_eq!(report["report"]["passed"], true);
}
