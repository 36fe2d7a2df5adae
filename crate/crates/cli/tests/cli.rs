//! Black-box tests of the command surface: output formats, exit codes, the
//! CSV contract, and the single-line error contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nwrs() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nwrs"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = nwrs().args(args).current_dir(dir).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(str::to_string)
        .collect()
}

struct Pipeline {
    dir: tempfile::TempDir,
}

impl Pipeline {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        run_ok(&["gen-model", "--out", "m.nwrs", "--seed", "0"], dir.path());
        Pipeline { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn permute_then_resync_prints_full_psi() {
    let p = Pipeline::new();
    run_ok(
        &[
            "permute",
            "--in",
            "m.nwrs",
            "--layer",
            "1",
            "--seed",
            "5",
            "--out",
            "mp.nwrs",
            "--perm-out",
            "p.json",
        ],
        p.dir.path(),
    );
    let out = run_ok(
        &[
            "resync",
            "--ref",
            "m.nwrs",
            "--suspect",
            "mp.nwrs",
            "--method",
            "greedy",
            "--true-perm",
            "p.json",
            "--out",
            "fixed.nwrs",
            "--report",
            "r.json",
        ],
        p.dir.path(),
    );
    assert_eq!(stdout_lines(&out), vec!["psi=100.0"]);

    // a perfect recovery reproduces the reference byte for byte
    let reference = std::fs::read(p.path("m.nwrs")).unwrap();
    let fixed = std::fs::read(p.path("fixed.nwrs")).unwrap();
    assert_eq!(reference, fixed);

    // report schema: pinned key names
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.path("r.json")).unwrap()).unwrap();
    assert_eq!(report["overallPsi"], 100.0);
    assert_eq!(report["method"], "GreedyGlobal");
    let first = &report["layers"][0];
    for key in ["layer", "perm", "psi", "margin", "ties"] {
        assert!(!first[key].is_null(), "missing key {key}");
    }
}

#[test]
fn resync_without_true_perm_is_structural() {
    let p = Pipeline::new();
    run_ok(
        &[
            "permute", "--in", "m.nwrs", "--seed", "3", "--out", "mp.nwrs",
        ],
        p.dir.path(),
    );
    let out = run_ok(
        &[
            "resync",
            "--ref",
            "m.nwrs",
            "--suspect",
            "mp.nwrs",
            "--report",
            "r.json",
        ],
        p.dir.path(),
    );
    assert!(stdout_lines(&out).is_empty());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.path("r.json")).unwrap()).unwrap();
    assert!(report["overallPsi"].is_null());
}

#[test]
fn perturbed_pipeline_still_recovers() {
    let p = Pipeline::new();
    run_ok(
        &[
            "permute",
            "--in",
            "m.nwrs",
            "--layer",
            "1",
            "--seed",
            "9",
            "--out",
            "mp.nwrs",
            "--perm-out",
            "p.json",
        ],
        p.dir.path(),
    );
    for (kind, param) in [
        ("gauss", "0.5"),
        ("quant", "8"),
        ("prune", "0.3"),
        ("finetune", "10"),
    ] {
        run_ok(
            &[
                "perturb", "--in", "mp.nwrs", "--kind", kind, "--param", param, "--layer", "1",
                "--seed", "4", "--out", "mq.nwrs",
            ],
            p.dir.path(),
        );
        let out = run_ok(
            &[
                "resync",
                "--ref",
                "m.nwrs",
                "--suspect",
                "mq.nwrs",
                "--true-perm",
                "p.json",
            ],
            p.dir.path(),
        );
        assert_eq!(stdout_lines(&out), vec!["psi=100.0"], "kind {kind}");
    }
}

#[test]
fn all_layers_pruning_runs_globally() {
    let p = Pipeline::new();
    run_ok(
        &[
            "perturb",
            "--in",
            "m.nwrs",
            "--kind",
            "prune",
            "--param",
            "0.5",
            "--all-layers",
            "--out",
            "global.nwrs",
        ],
        p.dir.path(),
    );
    // still loadable and resyncable afterwards
    let out = run_ok(
        &[
            "resync",
            "--ref",
            "m.nwrs",
            "--suspect",
            "global.nwrs",
            "--report",
            "r.json",
        ],
        p.dir.path(),
    );
    assert!(out.status.success());
}

#[test]
fn kl_prints_value_then_mc_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(&["kl", "--k", "0", "--relu"], dir.path());
    let lines = stdout_lines(&out);
    assert_eq!(lines[0], "0.0");
    assert_eq!(lines[1], "mc=0.0");

    let out = run_ok(&["kl", "--k", "1", "--samples", "200000"], dir.path());
    let lines = stdout_lines(&out);
    assert_eq!(lines[0], "0.3181471805599453");
    let mc: f64 = lines[1].strip_prefix("mc=").unwrap().parse().unwrap();
    assert!((mc - 0.3181).abs() < 0.01, "mc {mc}");

    // domain violation is a clean error
    let out = nwrs().args(["kl", "--k", "-2"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: domain:"), "stderr: {err}");
}

#[test]
fn verify_exit_codes_follow_the_verdict() {
    let p = Pipeline::new();
    // clean copy
    std::fs::copy(p.path("m.nwrs"), p.path("same.nwrs")).unwrap();
    let out = nwrs()
        .args([
            "verify",
            "--ref",
            "m.nwrs",
            "--suspect",
            "same.nwrs",
            "--layer",
            "1",
        ])
        .current_dir(p.dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let verdict: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(verdict["layerVerdict"], "Clean");

    // scaled neuron -> 2, and --correct restores the original
    run_ok(
        &[
            "perturb", "--in", "m.nwrs", "--kind", "scalar", "--param", "0.1", "--neuron", "3",
            "--layer", "1", "--out", "ms.nwrs",
        ],
        p.dir.path(),
    );
    let out = nwrs()
        .args([
            "verify",
            "--ref",
            "m.nwrs",
            "--suspect",
            "ms.nwrs",
            "--layer",
            "1",
            "--correct",
            "--out",
            "fixed.nwrs",
        ])
        .current_dir(p.dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let verdict: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(verdict["layerVerdict"], "ScaledNeuron");
    assert_eq!(verdict["perNeuron"][3]["flag"], "ScaledNeuron");
    let out = nwrs()
        .args([
            "verify",
            "--ref",
            "m.nwrs",
            "--suspect",
            "fixed.nwrs",
            "--layer",
            "1",
        ])
        .current_dir(p.dir.path())
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "correction did not clean the layer"
    );

    // broad modification -> 3
    run_ok(
        &[
            "perturb", "--in", "m.nwrs", "--kind", "gauss", "--param", "0.5", "--layer", "1",
            "--seed", "7", "--out", "mn.nwrs",
        ],
        p.dir.path(),
    );
    let out = nwrs()
        .args([
            "verify",
            "--ref",
            "m.nwrs",
            "--suspect",
            "mn.nwrs",
            "--layer",
            "1",
        ])
        .current_dir(p.dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_emits_one_row_per_cell_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep",
        "--kind",
        "gauss",
        "--params",
        "0,0.25,0.5",
        "--seeds",
        "2",
        "--csv",
        "s.csv",
    ];
    let first = {
        nwrs()
            .args(args)
            .env("NWRS_THREADS", "4")
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    assert!(first.status.success());
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kind,param,seed,psi,metric");
    assert_eq!(lines.len(), 1 + 3 * 2, "rows: {csv}");
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], "gauss");
        let param: f64 = fields[1].parse().unwrap();
        let seed: u64 = fields[2].parse().unwrap();
        assert_eq!(param, [0.0, 0.25, 0.5][i / 2], "row order");
        assert_eq!(seed, (i % 2) as u64, "row order");
        let psi: f64 = fields[3].parse().unwrap();
        if param == 0.0 {
            assert_eq!(psi, 100.0);
        }
    }

    // identical output regardless of thread cap
    let rerun = nwrs()
        .args([
            "sweep",
            "--kind",
            "gauss",
            "--params",
            "0,0.25,0.5",
            "--seeds",
            "2",
            "--csv",
            "s2.csv",
        ])
        .env("NWRS_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(rerun.status.success());
    let second = std::fs::read_to_string(dir.path().join("s2.csv")).unwrap();
    assert_eq!(csv, second);
}

#[test]
fn sweep_param_zero_is_full_psi_for_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["gauss", "prune", "finetune", "scalar"] {
        run_ok(
            &[
                "sweep", "--kind", kind, "--params", "0", "--seeds", "2", "--csv", "k.csv",
            ],
            dir.path(),
        );
        let csv = std::fs::read_to_string(dir.path().join("k.csv")).unwrap();
        for line in csv.lines().skip(1) {
            let psi: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
            assert_eq!(psi, 100.0, "kind {kind}: {line}");
        }
    }
}

#[test]
fn watermark_embed_extract_attack_cycle() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            "wm",
            "embed",
            "--out",
            "wm.nwrs",
            "--seed",
            "0",
            "--conv",
            "--bits",
            "64",
            "--lambda",
            "0.05",
            "--mark-out",
            "mark.json",
        ],
        dir.path(),
    );
    let out = run_ok(
        &["wm", "extract", "--in", "wm.nwrs", "--mark", "mark.json"],
        dir.path(),
    );
    let lines = stdout_lines(&out);
    assert!(lines[0].starts_with("pearson="), "{lines:?}");
    assert_eq!(lines[1], "ber=0.0");

    // the model file itself carries no bits
    let bytes = std::fs::read(dir.path().join("wm.nwrs")).unwrap();
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest: serde_json::Value =
        serde_json::from_slice(&bytes[16..16 + manifest_len]).unwrap();
    let stamp = &manifest["metadata"]["watermark"];
    assert_eq!(stamp["bit_count"], 64);
    assert!(stamp.get("bits").is_none(), "bits leaked into the bundle");

    run_ok(
        &[
            "permute",
            "--in",
            "wm.nwrs",
            "--layer",
            "1",
            "--seed",
            "2",
            "--out",
            "wmp.nwrs",
            "--perm-out",
            "wp.json",
        ],
        dir.path(),
    );
    run_ok(
        &[
            "resync",
            "--ref",
            "wm.nwrs",
            "--suspect",
            "wmp.nwrs",
            "--true-perm",
            "wp.json",
            "--out",
            "wmfixed.nwrs",
        ],
        dir.path(),
    );
    let out = run_ok(
        &[
            "wm",
            "extract",
            "--in",
            "wmfixed.nwrs",
            "--mark",
            "mark.json",
        ],
        dir.path(),
    );
    assert_eq!(stdout_lines(&out)[1], "ber=0.0");
}

#[test]
fn commands_are_reproducible_from_flags_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &["gen-model", "--out", "a.nwrs", "--seed", "11"],
        dir.path(),
    );
    run_ok(
        &["gen-model", "--out", "b.nwrs", "--seed", "11"],
        dir.path(),
    );
    let a = std::fs::read(dir.path().join("a.nwrs")).unwrap();
    let b = std::fs::read(dir.path().join("b.nwrs")).unwrap();
    assert_eq!(a, b);
    run_ok(
        &["gen-model", "--out", "c.nwrs", "--seed", "12"],
        dir.path(),
    );
    let c = std::fs::read(dir.path().join("c.nwrs")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn failures_are_single_machine_parsable_lines() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["gen-model", "--out", "m.nwrs", "--seed", "0"], dir.path());
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (
            vec!["resync", "--ref", "missing.nwrs", "--suspect", "also.nwrs"],
            "error: io:",
        ),
        (vec!["kl", "--k", "-1", "--relu"], "error: domain:"),
        (
            vec![
                "perturb", "--in", "m.nwrs", "--kind", "quant", "--param", "8.5", "--out", "y.nwrs",
            ],
            "error: domain:",
        ),
        (
            vec![
                "perturb", "--in", "x.nwrs", "--kind", "bogus", "--param", "1", "--out", "y.nwrs",
            ],
            "error: usage:",
        ),
        (vec!["gen-model"], "error: usage:"),
    ];
    for (args, prefix) in cases {
        let out = nwrs().args(&args).current_dir(dir.path()).output().unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&out.stderr);
        let lines: Vec<&str> = err.lines().collect();
        assert_eq!(lines.len(), 1, "{args:?} stderr not single-line: {err}");
        assert!(lines[0].starts_with(prefix), "{args:?} stderr: {err}");
    }

    // corrupt container -> structured corruption error
    let path = dir.path().join("bad.nwrs");
    std::fs::write(&path, b"NWRS\x01\x00\x00\x00ZZZZZZZZgarbage").unwrap();
    let out = nwrs()
        .args(["resync", "--ref", "bad.nwrs", "--suspect", "bad.nwrs"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: corruption:"), "stderr: {err}");
}
