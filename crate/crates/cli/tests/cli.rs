//! End-to-end tests against the compiled `srsmc` binary: exit codes,
//! output bundles, seed precedence (flags vs. `SRSMC_SEED`), and the
//! oracle-check negative controls.

use std::path::Path;
use std::process::{Command, Output};

fn srsmc(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_srsmc"));
    // Keep the ambient environment from contaminating seed provenance.
    cmd.env_remove("SRSMC_SEED");
    cmd.args(args);
    cmd
}

fn write_toy_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("toy.json");
    std::fs::write(
        &path,
        r#"{
  "chain": {"init": [0.6, 0.4], "trans": [[0.7, 0.3], [0.2, 0.8]]},
  "len": 4,
  "steps": 4,
  "particles": 3,
  "seed": 7
}"#,
    )
    .unwrap();
    path
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_succeeds_and_writes_the_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = srsmc(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--samples",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(out_dir.join("sequences.jsonl").is_file());
    assert!(out_dir.join("trace_0.jsonl").is_file());
    assert!(out_dir.join("trace_1.jsonl").is_file());
    assert!(out_dir.join("metrics.csv").is_file());
    assert!(out_dir.join("manifest.json").is_file());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = srsmc(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--particles",
        "5",
        "--seed",
        "21",
        "--out",
        out_dir.to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["particles"], 5);
    assert_eq!(manifest["config_seed"], 21);
    assert_eq!(manifest["effective_seed"], 21);
}

#[test]
fn env_seed_outranks_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = srsmc(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "21",
        "--out",
        out_dir.to_str().unwrap(),
    ])
    .env("SRSMC_SEED", "99")
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    // Both the pre-override and the effective seed are recorded.
    assert_eq!(manifest["config_seed"], 21);
    assert_eq!(manifest["effective_seed"], 99);
    assert_eq!(manifest["config"]["seed"], 99);
}

#[test]
fn unparseable_env_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let out = srsmc(&["generate", "--config", config.to_str().unwrap()])
        .env("SRSMC_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("SRSMC_SEED"), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_config_keys_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"foo": 1}"#).unwrap();
    let out = srsmc(&["generate", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("foo"), "stderr: {}", stderr_of(&out));
}

#[test]
fn usage_errors_exit_one() {
    let out = srsmc(&["generate", "--definitely-not-a-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = srsmc(&["no-such-subcommand"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_still_exits_zero() {
    let out = srsmc(&["--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout_of(&out).contains("generate"));
}

#[test]
fn unreachable_remote_backend_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = srsmc(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--backend",
        "remote",
        // Reserved port on localhost; nothing listens there.
        "--endpoint",
        "http://127.0.0.1:9",
        "--out",
        out_dir.to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    // The manifest still records the failed run.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert!(manifest["error"].as_str().unwrap().contains("backend"));
}

#[test]
fn sweep_writes_the_paired_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = srsmc(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--axis",
        "particles",
        "--values",
        "1,2",
        "--seeds",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

#[test]
fn sweep_rejects_malformed_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let out = srsmc(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--axis",
        "particles",
        "--values",
        "1,two",
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("two"));
}

#[test]
fn oracle_check_passes_on_an_enumerable_toy() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("oracle.json");
    std::fs::write(
        &config,
        r#"{
  "chain": {"init": [0.6, 0.4], "trans": [[0.7, 0.3], [0.2, 0.8]]},
  "len": 2,
  "steps": 2,
  "particles": 4,
  "seed": 5
}"#,
    )
    .unwrap();
    let out = srsmc(&[
        "oracle-check",
        "--config",
        config.to_str().unwrap(),
        "--runs",
        "1500",
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(0), "stdout: {}", stdout_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("PASS proposal_mass"));
    assert!(text.contains("PASS ratio_vs_product"));
    assert!(text.contains("PASS zhat_unbiased"));
    assert!(text.contains("PASS terminal_tv"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn corrupted_weights_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("oracle.json");
    std::fs::write(
        &config,
        r#"{
  "chain": {"init": [0.6, 0.4], "trans": [[0.7, 0.3], [0.2, 0.8]]},
  "len": 2,
  "steps": 2,
  "seed": 5
}"#,
    )
    .unwrap();
    let out = srsmc(&[
        "oracle-check",
        "--config",
        config.to_str().unwrap(),
        "--runs",
        "50",
        "--corrupt-weights",
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(3), "stdout: {}", stdout_of(&out));
    assert!(stdout_of(&out).contains("FAIL ratio_vs_product"));
}

#[test]
fn oracle_check_refuses_configs_beyond_the_path_cap() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("big.json");
    // Six-token vocabulary (five real states), length 8: the worst-case
    // path count exceeds the enumeration cap by orders of magnitude.
    std::fs::write(
        &config,
        r#"{
  "chain": {
    "init": [0.2, 0.2, 0.2, 0.2, 0.2],
    "trans": [
      [0.2, 0.2, 0.2, 0.2, 0.2],
      [0.2, 0.2, 0.2, 0.2, 0.2],
      [0.2, 0.2, 0.2, 0.2, 0.2],
      [0.2, 0.2, 0.2, 0.2, 0.2],
      [0.2, 0.2, 0.2, 0.2, 0.2]
    ]
  },
  "len": 8,
  "steps": 8
}"#,
    )
    .unwrap();
    let out = srsmc(&["oracle-check", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "stdout: {}", stdout_of(&out));
    assert!(stderr_of(&out).contains("shrink the config"), "stderr: {}", stderr_of(&out));
}

#[test]
fn trace_subcommand_renders_a_saved_trace() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = srsmc(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ])
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let out = srsmc(&["trace", out_dir.join("trace_0.jsonl").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("3 particles"));
    let out = srsmc(&["trace", dir.path().join("missing.jsonl").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_determinism_holds_across_worker_pools_via_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_toy_config(dir.path());
    let mut bytes = Vec::new();
    for (label, workers) in [("w1", "1"), ("w8", "8")] {
        let out_dir = dir.path().join(label);
        let out = srsmc(&[
            "generate",
            "--config",
            config.to_str().unwrap(),
            "--samples",
            "6",
            "--workers",
            workers,
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
        bytes.push(std::fs::read(out_dir.join("sequences.jsonl")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "sequence files must be byte-identical");
}
