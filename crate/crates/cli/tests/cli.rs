//! End-to-end checks of the `dsse` binary: exit codes, emitted files, and
//! the reproducibility contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dsse"))
}

fn case_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases/baranwu33.txt")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dsse_cli_{}_{tag}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn missing_case_file_is_a_config_error() {
    let out = bin()
        .args(["run", "--case", "/nonexistent/case.txt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not found"), "{stderr}");
}

#[test]
fn unknown_flag_is_a_config_error() {
    let out = bin().args(["run", "--warp-speed"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = temp_dir("badcfg");
    let cfg = dir.join("bad.cfg");
    fs::write(&cfg, "[run]\nbogus_key = 1\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "{stderr}");
}

#[test]
fn validate_passes_on_the_shipped_case() {
    let out = bin()
        .args(["validate", "--case"])
        .arg(case_path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in [
        "case_parse",
        "power_flow",
        "plan_grl3",
        "plan_grl2.769",
        "jacobian_fd",
        "chi2_table",
    ] {
        assert!(stdout.contains(&format!("PASS {name}")), "{stdout}");
    }
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn validate_fails_on_an_unobservable_case() {
    // Two buses, one branch: d = 7 < N... the plan builder rejects it
    // before the numeric check, still a validation failure (exit 1).
    let dir = temp_dir("badcase");
    let case = dir.join("tiny.txt");
    fs::write(
        &case,
        "BASE_MVA 10\nBUS 1 3 0 0\nBUS 2 1 0.1 0.05\nBRANCH 1 2 0.02 0.04 0.0 1\n",
    )
    .unwrap();
    let out = bin()
        .args(["validate", "--case"])
        .arg(&case)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn run_emits_metrics_and_rerunnable_manifest() {
    let dir1 = temp_dir("run1");
    let dir2 = temp_dir("run2");
    let out = bin()
        .args(["run", "--horizon", "8", "--seed", "11", "--case"])
        .arg(case_path())
        .arg("--output-dir")
        .arg(&dir1)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let csv1 = fs::read_to_string(dir1.join("metrics_run.csv")).unwrap();
    assert!(csv1.starts_with("tick,j_cme,threshold,detected,se_error,cum_se_error\n"));
    assert!(csv1.lines().count() > 1);

    // Re-running the emitted manifest reproduces the CSV byte for byte.
    let out2 = bin()
        .args(["run", "--config"])
        .arg(dir1.join("run_manifest.txt"))
        .args(["--case"])
        .arg(case_path())
        .arg("--output-dir")
        .arg(&dir2)
        .output()
        .unwrap();
    assert_eq!(out2.status.code(), Some(0), "{out2:?}");
    let csv2 = fs::read_to_string(dir2.join("metrics_run.csv")).unwrap();
    assert_eq!(csv1, csv2);
}

#[test]
fn sweep_covers_the_grid_and_report_reads_it_back() {
    let dir = temp_dir("sweep");
    let cfg = dir.join("sweep.cfg");
    fs::write(
        &cfg,
        format!(
            "[case]\npath = {}\n[schedule]\nscada_periods = 1, 2\n\
             [run]\nmodes = traditional, proposed\nseeds = 5\nhorizon = 8\noutput_dir = {}\n",
            case_path().display(),
            dir.display()
        ),
    )
    .unwrap();
    let out = bin()
        .args(["sweep", "--jobs", "2", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let summary = fs::read_to_string(dir.join("fpr_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5, "{summary}");
    for label in [
        "grl3_traditional_1s_seed5",
        "grl3_traditional_2s_seed5",
        "grl3_proposed_1s_seed5",
        "grl3_proposed_2s_seed5",
    ] {
        assert!(dir.join(format!("metrics_{label}.csv")).is_file());
        assert!(
            summary.contains(
                label
                    .rsplit_once("_seed")
                    .unwrap()
                    .0
                    .split_once('_')
                    .unwrap()
                    .0
            ),
            "{summary}"
        );
    }

    let rep = bin()
        .args(["report", "--output-dir"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(rep.status.code(), Some(0), "{rep:?}");
    let stdout = String::from_utf8_lossy(&rep.stdout);
    assert!(stdout.contains("grl3_proposed_1s_seed5"), "{stdout}");
    assert!(stdout.contains("false-positive rates"), "{stdout}");
}

#[test]
fn report_on_empty_directory_is_a_config_error() {
    let dir = temp_dir("empty");
    let out = bin()
        .args(["report", "--output-dir"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}
