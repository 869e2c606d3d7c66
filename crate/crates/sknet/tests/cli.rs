//! Command-line contract: exit codes, output routing, and the shapes
//! of the emitted reports.

use std::path::Path;
use std::process::{Command, Output};

use sknet::arch::{self, ArchSpec, BlockKind, StageSpec, StemKind, StemSpec};
use sknet::sk::{Aggregation, PathSpec, SkSettings};

fn sknet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sknet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

#[test]
fn presets_lists_every_architecture_and_nothing_else() {
    let out = sknet(&["presets"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    assert_eq!(names, arch::PRESET_NAMES);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&sknet(&["--help"])), 0);
    assert_eq!(code(&sknet(&["--version"])), 0);
    assert_eq!(code(&sknet(&["count", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    // Unknown flag, unknown subcommand, missing required argument.
    assert_eq!(code(&sknet(&["count", "--bogus"])), 1);
    assert_eq!(code(&sknet(&["frobnicate"])), 1);
    assert_eq!(code(&sknet(&["count"])), 1);
    assert_eq!(code(&sknet(&["count", "--arch", "sknet26", "--format", "yaml"])), 1);
}

#[test]
fn runtime_errors_exit_two() {
    assert_eq!(code(&sknet(&["count", "--arch", "nosucharch"])), 2);
    assert_eq!(code(&sknet(&["gradcheck", "--unit", "bogus"])), 2);
    assert_eq!(code(&sknet(&["gradcheck", "--unit", "sk", "--channels", "0"])), 2);
    // analyze needs an architecture from somewhere.
    assert_eq!(code(&sknet(&["analyze", "--dataset", "synthetic"])), 2);
    // cifar training without a data directory has nothing to read.
    assert_eq!(
        code(&sknet(&["train", "--arch", "sknet29-tiny", "--dataset", "cifar10"])),
        2
    );
}

#[test]
fn count_json_matches_the_library_and_respects_out() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("report.json");
    let out = sknet(&[
        "count",
        "--arch",
        "sknet26",
        "--format",
        "json",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    // With --out, data goes to the file and stdout stays clean.
    assert!(stdout(&out).is_empty(), "stdout not empty: {:?}", stdout(&out));
    let text = std::fs::read_to_string(&path).expect("report file");
    // One architecture emits a bare report object, several an array.
    let report: serde_json::Value = serde_json::from_str(&text).expect("valid json");
    let want = sknet::cost::count(&arch::preset("sknet26").unwrap(), 224).unwrap();
    assert_eq!(report["total_params"].as_u64(), Some(want.total_params));
    assert_eq!(report["total_madds"].as_u64(), Some(want.total_madds));
    assert_eq!(report["resolution"].as_u64(), Some(224));

    // Without --out the same payload lands on stdout.
    let direct = sknet(&["count", "--arch", "sknet26", "--format", "json"]);
    assert_eq!(code(&direct), 0);
    assert_eq!(stdout(&direct), text);
}

#[test]
fn count_csv_compares_architectures_against_the_first() {
    let out = sknet(&[
        "count",
        "--arch",
        "resnext50,sknet50",
        "--format",
        "csv",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("arch,params,madds,gflops,params_ratio,madds_ratio")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "resnext50");
    assert_eq!(rows[1][0], "sknet50");
    let params_ratio: f64 = rows[1][4].parse().expect("ratio parses");
    let madds_ratio: f64 = rows[1][5].parse().expect("ratio parses");
    assert!((params_ratio - 1.0985).abs() < 1e-3, "params ratio {params_ratio}");
    assert!((madds_ratio - 1.0549).abs() < 1e-3, "madds ratio {madds_ratio}");
}

#[test]
fn count_table_holds_every_requested_arch() {
    let out = sknet(&["count", "--arch", "resnext50,senet50,sknet50", "--format", "table"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for name in ["resnext50", "senet50", "sknet50"] {
        assert!(text.contains(name), "table misses {name}:\n{text}");
    }
}

#[test]
fn count_accepts_a_spec_file() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("tiny.toml");
    let spec = arch::preset("sknet29-tiny").unwrap();
    std::fs::write(&path, spec.to_toml_string().unwrap()).unwrap();
    let out = sknet(&["count", "--arch", path.to_str().unwrap(), "--format", "json"]);
    assert_eq!(code(&out), 0);
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).expect("valid json");
    let want = sknet::cost::count(&spec, 224).unwrap();
    assert_eq!(parsed["total_params"].as_u64(), Some(want.total_params));
}

/// The documented check: full SK unit at 32 channels, seed 7.
#[test]
fn gradcheck_meets_tolerance_at_the_documented_setting() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("report.json");
    let out = sknet(&[
        "gradcheck",
        "--unit",
        "sk",
        "--channels",
        "32",
        "--seed",
        "7",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).expect("report file"))
            .expect("valid json");
    let max = parsed["max_rel_err"].as_f64().expect("max_rel_err");
    assert!(max < 1e-5, "max relative error {max:.3e} (limit 1e-5)");
    assert_eq!(parsed["step"].as_f64(), Some(1e-5));
}

fn naive_spec_file(path: &Path) {
    let spec = ArchSpec {
        name: "naive-tiny".into(),
        stem: StemSpec { kind: StemKind::Compact, out: 4 },
        block: BlockKind::SelectiveKernel,
        groups: 1,
        sk: Some(SkSettings {
            paths: vec![PathSpec::new(3, 1), PathSpec::new(1, 1)],
            groups: 2,
            reduction: 2,
            min_dim: 2,
            aggregation: Aggregation::NaiveSum,
        }),
        se_reduction: None,
        stages: vec![StageSpec { blocks: 1, width: 4, out: 8, stride: 1 }],
        classes: 4,
    };
    std::fs::write(path, spec.to_toml_string().unwrap()).unwrap();
}

#[test]
fn analyze_rejects_networks_without_attention() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("naive.toml");
    naive_spec_file(&path);
    let out = sknet(&["analyze", "--arch", path.to_str().unwrap(), "--dataset", "synthetic"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:"), "stderr should explain the failure: {err}");
}
