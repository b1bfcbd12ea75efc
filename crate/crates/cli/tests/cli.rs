use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread;

fn fedot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedot"))
}

fn run(args: &[&str]) -> Output {
    fedot().args(args).output().expect("spawn fedot")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A small synthetic benchmark; returns the path of its generated config.
fn small_synth(dir: &Path, domains: usize) -> String {
    let out = dir.to_str().unwrap();
    let o = run(&[
        "synth", "--out", out, "--dim", "8", "--classes", "3", "--domains", &domains.to_string(), "--per-domain", "60",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("config.toml").to_str().unwrap().to_string()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(dir.path(), 3);
    let o = run(&["run", "--config", &cfg, "--rounds", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("generalization = "));
    let out = dir.path().join("run");
    for f in ["report.json", "metrics.csv", "diagnostics.csv", "config.toml"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let echo = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.starts_with("tau = "), "{echo}");
    assert!(echo.contains("rounds = 4"), "flag must override the file: {echo}");
    assert!(echo.contains("learning_rate = 0.001"), "file must override defaults: {echo}");
    let r = report(&out);
    assert_eq!(r["acc_matrix"]["values"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("fold,client,role,accuracy\n"));
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(dir.path(), 3);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["run", "--config", &cfg, "--rounds", "4", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("manifest.json");
    let o = run(&["run", "--manifest", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn indivisible_blocks_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(dir.path(), 2);
    let o = run(&["run", "--config", &cfg, "--blocks", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("blocks"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn bad_config_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "rounds = 3\nunknown = 1\n").unwrap();
    assert_eq!(run(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&cfg, "tau = -1.0\n").unwrap();
    assert_eq!(run(&["run", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["run", "--variant", "fedprox"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn diag_reports_unit_condition_for_orthogonal_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(dir.path(), 3);
    let o = run(&["run", "--config", &cfg, "--rounds", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = run(&["diag", dir.path().join("run").to_str().unwrap()]);
    assert!(d.status.success(), "{}", stderr(&d));
    let text = stdout(&d);
    assert!(text.lines().any(|l| l == "max κ = 1.000000"), "{text}");
    assert!(text.starts_with("tau = 100"), "{text}");
}

fn field(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.contains(key)).unwrap_or_else(|| panic!("no '{key}' in {text}"));
    line.rsplit("= ").next().unwrap().trim().parse().unwrap()
}

#[test]
fn serve_and_client_match_the_in_process_fold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(dir.path(), 2);
    let o = run(&["run", "--config", &cfg, "--rounds", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = report(&dir.path().join("run"));
    // Row 1 is the fold holding out domain1; column 0 is the lone client.
    let row = &r["acc_matrix"]["values"][1];

    let mut server = fedot()
        .args(["serve", "--config", &cfg, "--rounds", "6", "--listen", "127.0.0.1:0", "--hold-out", "domain1"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.split_whitespace().nth(2).unwrap().to_string();
    let c = run(&["client", "--config", &cfg, "--rounds", "6", "--connect", &addr, "--domain", "domain0", "--hold-out", "domain1"]);
    assert!(c.status.success(), "{}", stderr(&c));
    let rest: Vec<String> = lines.map(|l| l.unwrap()).collect();
    assert!(server.wait().unwrap().success());
    let server_text = rest.join("\n");

    assert_eq!(field(&server_text, "server accuracy on domain1"), row[1].as_f64().unwrap());
    assert_eq!(field(&stdout(&c), ") accuracy"), row[0].as_f64().unwrap());
}

#[test]
fn client_rejects_a_server_speaking_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(dir.path(), 2);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let fake = thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut hello = [0u8; 28];
        s.read_exact(&mut hello).unwrap();
        s.write_all(&[0xde, 0xad, 0xbe, 0xef, 1, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
    });
    let o = run(&["client", "--config", &cfg, "--connect", &addr, "--domain", "domain0"]);
    fake.join().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("protocol error"), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    small_synth(a.path(), 2);
    small_synth(b.path(), 2);
    for f in ["domain0.femb", "domain1.femb", "classifier.fcls"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
    let bad = run(&["synth", "--out", a.path().to_str().unwrap(), "--per-domain", "10"]);
    assert_eq!(bad.status.code(), Some(2));
}
