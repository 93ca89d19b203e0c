use std::path::Path;
use std::process::{Command, Output};

fn opes(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_opes"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn opes");
    assert!(
        out.status.success(),
        "opes {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "synth.blocks=3",
    "--set",
    "synth.nodes_per_block=40",
    "--set",
    "synth.p_intra=0.15",
    "--set",
    "synth.p_inter=0.04",
    "--clients",
    "3",
    "--layers",
    "2",
    "--fanout",
    "4,4",
    "--hidden",
    "8",
    "--epochs",
    "2",
    "--rounds",
    "3",
];

fn with_small<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).chain(tail).copied().collect()
}

#[test]
fn synth_then_partition_writes_client_directories() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("graph");
    let parts = dir.path().join("parts");
    let out = opes(&with_small(&["synth"], &["--out", p(&graph)]));
    assert!(stdout(&out).contains("120 vertices"));
    let out = opes(&with_small(
        &["partition"],
        &["--dataset", p(&graph), "--out", p(&parts)],
    ));
    assert!(stdout(&out).contains("3 clients"));
    for k in 0..3 {
        assert!(parts.join(format!("client{k}")).is_dir());
    }
    assert!(parts.join("manifest.bin").is_file());
    assert!(parts.join("parts.txt").is_file());
}

#[test]
fn run_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    for (name, mode) in [("vanilla", "vanilla"), ("embc", "embc"), ("opes", "opes")] {
        let out_dir = dir.path().join(name);
        let out = opes(&with_small(
            &["run"],
            &["--mode", mode, "--retain", "2", "--output", p(&out_dir)],
        ));
        let text = stdout(&out);
        assert!(text.contains("peak test accuracy"), "{text}");
        let m = out_dir.join("metrics.csv");
        assert!(m.is_file());
        assert!(out_dir.join("config.txt").is_file());
        metrics.push(m);
    }

    let files: Vec<&str> = metrics.iter().map(|m| p(m)).collect();
    let mut args = vec!["tta"];
    args.extend(&files);
    let text = stdout(&opes(&args));
    assert!(text.contains("nominal accuracy"), "{text}");
    assert_eq!(text.lines().count(), 2 + files.len());

    args.extend(["--target", "1.01"]);
    let text = stdout(&opes(&args));
    assert!(text.contains("nominal accuracy: 1.0100"), "{text}");
    assert_eq!(text.matches("unreached").count(), files.len());

    let mut args = vec!["footprint"];
    args.extend(&files);
    let text = stdout(&opes(&args));
    let vanilla = text.lines().find(|l| l.contains("vanilla")).unwrap();
    let cols: Vec<&str> = vanilla.split_whitespace().collect();
    assert_eq!(&cols[1..3], ["0", "0"], "{text}");
    let embc = text.lines().find(|l| l.contains("embc")).unwrap();
    assert_ne!(embc.split_whitespace().nth(1), Some("0"), "{text}");
}

#[test]
fn config_file_and_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# small run\nrounds = 1\nclients = 2\nsynth.blocks = 2\nsynth.nodes_per_block = 30\n\
         layers = 2\nfanout = 3,3\nhidden = 4\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    opes(&["run", "--config", p(&cfg), "--output", p(&out_dir)]);
    let resolved = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(resolved.contains("rounds = 1"), "{resolved}");

    let bad = Command::new(env!("CARGO_BIN_EXE_opes"))
        .args(["run", "--set", "no_such_key=1"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no_such_key"));
}
