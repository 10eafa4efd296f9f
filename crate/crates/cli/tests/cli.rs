use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vishape_cli::{demos, run_config, Config, COMMANDS};

const SOLVE: &str = r#"
command = "solve-vi"

[mesh]
kind = "square"
n = 8

[problem]
lambda = 1
density = "u - 8*exp(-10*((x-0.5)^2 + (y-0.5)^2))"
obstacle = "0.2 + 0.1*x"
"#;

fn vishape(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vishape")).args(args).env("VISHAPE_THREADS", threads).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn error_json(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap_or_else(|| panic!("no stderr"));
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"))
}

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn solve_vi_writes_a_complementary_solution() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "solve.toml", SOLVE);
    let out_dir = tmp.path().join("out");
    let out = vishape(&["solve-vi", "--config", &cfg, "--out", out_dir.to_str().unwrap()], "1");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["max_residual"].as_f64().unwrap() <= 1e-8);
    assert!(summary["active"].as_u64().unwrap() > 0);
    let csv = std::fs::read_to_string(out_dir.join("solution.csv")).unwrap();
    assert!(csv.starts_with("node,x,y,u,psi,multiplier,active\n"));
    assert_eq!(csv.lines().count(), 82);
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "solve.toml", SOLVE);
    let mut seen = Vec::new();
    for (k, threads) in ["1", "1", "4"].iter().enumerate() {
        let dir = tmp.path().join(format!("out{k}"));
        let out = vishape(&["solve-vi", "--config", &cfg, "--out", dir.to_str().unwrap()], threads);
        assert!(out.status.success());
        seen.push(read_dir(&dir));
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(seen[0], seen[2]);
}

#[test]
fn missing_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &SOLVE.replace("lambda = 1\n", ""));
    let out = vishape(&["solve-vi", "--config", &cfg, "--out", tmp.path().to_str().unwrap()], "1");
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"], "config");
    assert_eq!(e["key"], "problem.lambda");
}

#[test]
fn unknown_and_mistyped_keys_are_rejected() {
    let extra = run_config(None, &format!("{SOLVE}lamda = 2\n")).unwrap_err();
    assert!(extra.to_string().contains("problem.lamda"), "{extra}");
    let typed = run_config(None, &SOLVE.replace("n = 8", "n = \"eight\"")).unwrap_err();
    assert!(typed.to_string().contains("mesh.n"), "{typed}");
    let syntax = Config::parse("[mesh]\nn = 8\n[problem\n").unwrap_err();
    assert!(syntax.to_string().contains("line 3"), "{syntax}");
    let md = demos::find("material-derivative").unwrap().config;
    let rule = run_config(None, &format!("{md}\n[cone]\nbiactive = \"bogus\"\n")).unwrap_err();
    assert!(rule.to_string().contains("cone.biactive"), "{rule}");
    let act = run_config(None, &format!("{md}\n[cone]\ntol_act = -1\n")).unwrap_err();
    assert!(act.to_string().contains("cone.tol_act"), "{act}");
    let wrong = run_config(Some("damage-run"), SOLVE).unwrap_err();
    assert_eq!(wrong.exit_code(), 2);
}

#[test]
fn solver_failure_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SOLVE.replace("u - 8*exp(-10*((x-0.5)^2 + (y-0.5)^2))", "-u^3");
    let cfg = write(tmp.path(), "bad.toml", &text);
    let out = vishape(&["solve-vi", "--config", &cfg, "--out", tmp.path().to_str().unwrap()], "1");
    assert_eq!(out.status.code(), Some(3));
    let e = error_json(&out);
    assert_eq!(e["error"], "solver");
    assert_eq!(e["module"], "vi");
}

#[test]
fn missing_file_and_bad_arguments_exit_with_two() {
    let out = vishape(&["solve-vi", "--config", "/nonexistent/config.toml"], "1");
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "io");
    let out = vishape(&["no-such-command"], "1");
    assert_eq!(out.status.code(), Some(2));
    let out = vishape(&["list-demos"], "zero");
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["key"], "VISHAPE_THREADS");
}

#[test]
fn demos_are_listed_and_well_formed() {
    let out = vishape(&["list-demos"], "1");
    assert!(out.status.success());
    let listing = String::from_utf8(out.stdout).unwrap();
    assert!(listing.lines().count() >= 7);
    for d in demos::DEMOS {
        assert!(listing.contains(d.name));
        assert!(!d.description().is_empty(), "{}", d.name);
        let cfg = Config::parse(d.config).unwrap();
        let command = cfg.command().unwrap().unwrap();
        assert!(COMMANDS.contains(&command.as_str()), "{}", d.name);
    }
    let out = vishape(&["run-demo", "no-such-demo"], "1");
    assert_eq!(out.status.code(), Some(2));
}
