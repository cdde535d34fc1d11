//! End-to-end pipeline behavior: resumable indexing over gapped fixtures,
//! operator-facing exit codes through the installed binary, and the bundled
//! demo run against its frozen summary.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use beacon_mer::analyzer::{AnalyzerError, Store};
use beacon_mer::cli::{self, cmd_analyze, cmd_full, CliError, Overrides, ProviderKind};
use beacon_mer::rewards::WeightParams;
use beacon_mer::sim::{EntityShare, SimConfig, TipRange};
use beacon_mer::snapshot::state_file_name;
use beacon_mer::source::{write_sim_fixture, MockServer};
use common::assert_same_file;

const BIN: &str = env!("CARGO_BIN_EXE_beacon-mer");

fn small_config(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        validator_count: 64,
        epochs: 10,
        p_missed_block: 0.08,
        p_missed_head: 0.05,
        p_missed_source: 0.01,
        p_missed_target: 0.01,
        p_sync_miss: 0.02,
        el_tip_distribution: TipRange::new(500, 20_000),
        entities: vec![
            EntityShare { name: "pool-a".into(), share: 0.4 },
            EntityShare { name: "pool-b".into(), share: 0.25 },
        ],
        ..SimConfig::default()
    }
}

fn analyze_files_config(states: &Path, out: &Path) -> cli::RunConfig {
    cli::RunConfig {
        provider: ProviderKind::Files,
        state_dir: Some(states.to_path_buf()),
        out_dir: out.to_path_buf(),
        sim: small_config(1804),
        ..cli::RunConfig::default()
    }
}

#[test]
fn gapped_fixture_fails_resumably_and_resumes_to_the_same_ledger() {
    let params = WeightParams::default();
    let cfg = small_config(1804);
    let tmp = tempfile::tempdir().unwrap();
    let states = tmp.path().join("states");
    write_sim_fixture(cfg.clone(), params, &states).unwrap();

    // Reference: one uninterrupted pass.
    let reference_out = tmp.path().join("reference");
    let report = cmd_analyze(&analyze_files_config(&states, &reference_out)).unwrap();
    assert!(report.passed());

    // Punch a hole at the end of epoch 6 and analyze into a fresh store.
    let hole = states.join(state_file_name(6 * 32 + 31));
    let parked = tmp.path().join("parked.json");
    fs::rename(&hole, &parked).unwrap();
    let resumed_out = tmp.path().join("resumed");
    let err = cmd_analyze(&analyze_files_config(&states, &resumed_out)).unwrap_err();
    match err {
        CliError::Analyzer(AnalyzerError::MissingState { slot, last_indexed }) => {
            assert_eq!(slot, 6 * 32 + 31);
            assert_eq!(last_indexed, Some(4), "epochs 0..=4 were complete");
        }
        other => panic!("expected a missing-state failure, got {other:?}"),
    }

    // The partial ledger and its checkpoint must already be on disk.
    let partial = Store::load(&resumed_out).unwrap();
    assert_eq!(partial.last_indexed_epoch(), Some(4));
    let checkpoint = partial.checkpoint().expect("checkpoint persisted");
    assert_eq!(checkpoint.last_fully_indexed_epoch, 4);

    // Restore the state and resume into the same run directory: the final
    // ledger matches the uninterrupted pass byte for byte.
    fs::rename(&parked, &hole).unwrap();
    let report = cmd_analyze(&analyze_files_config(&states, &resumed_out)).unwrap();
    assert!(report.passed());
    assert_same_file(&reference_out.join("ledger.csv"), &resumed_out.join("ledger.csv"));
    assert_same_file(&reference_out.join("proposals.csv"), &resumed_out.join("proposals.csv"));
}

#[test]
fn rerunning_analysis_over_a_complete_store_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let states = tmp.path().join("states");
    write_sim_fixture(small_config(222), WeightParams::default(), &states).unwrap();
    let out = tmp.path().join("out");
    let cfg = analyze_files_config(&states, &out);

    let first = cmd_analyze(&cfg).unwrap();
    let ledger_once = fs::read(out.join("ledger.csv")).unwrap();
    let second = cmd_analyze(&cfg).unwrap();
    assert!(first.passed() && second.passed());
    assert_eq!(ledger_once, fs::read(out.join("ledger.csv")).unwrap());
}

fn run_bin(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write_demo_toml(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        r#"
seed = 31
validator_count = 64
epochs = 8
p_missed_block = 0.05
p_missed_head = 0.04
el_tip_distribution = { min = 100, max = 9000 }

[[entities]]
name = "pool-a"
share = 0.5
"#,
    )
    .unwrap();
    path
}

#[test]
fn binary_full_run_exits_zero_and_writes_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_demo_toml(tmp.path());
    let out = tmp.path().join("run");
    let output = run_bin(&[
        "full",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--split-epoch",
        "3",
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("audits passed"), "stdout: {stdout}");
    for artifact in
        ["states/state_0.json", "ledger.csv", "reports/summary.txt", "reports/metrics.json"]
    {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }

    // A second report pass over the existing ledger also succeeds.
    let output = run_bin(&["report", "--out", out.to_str().unwrap()]);
    assert!(output.status.success());
}

#[test]
fn binary_analyze_reaches_an_http_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let states = tmp.path().join("states");
    write_sim_fixture(small_config(31), WeightParams::default(), &states).unwrap();
    let server = MockServer::serve(&states).unwrap();

    let out = tmp.path().join("run");
    let config = write_demo_toml(tmp.path());
    let output = run_bin(&[
        "analyze",
        "--config",
        config.to_str().unwrap(),
        "--provider",
        "http",
        "--base-url",
        &server.base_url(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(out.join("ledger.csv").exists());
}

#[test]
fn binary_rejects_bad_inputs_with_exit_two_and_a_field_message() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "p_missed_head = 1.5\n").unwrap();
    let output = run_bin(&["analyze", "--config", bad.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("p_missed_head"), "stderr: {stderr}");

    // Reporting without a ledger names the missing step.
    let empty = tmp.path().join("empty");
    let output = run_bin(&["report", "--out", empty.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("analyze"));

    // Clap-level misuse also exits with the conventional usage code.
    let output = run_bin(&["analyze", "--no-such-flag"]);
    assert_eq!(output.status.code(), Some(2));

    let output = run_bin(&["--help"]);
    assert_eq!(output.status.code(), Some(0));
}

#[test]
fn bundled_demo_summary_is_stable() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let demo_toml = manifest.join("fixtures/demo.toml");
    let frozen = manifest.join("fixtures/demo_summary.txt");

    let tmp = tempfile::tempdir().unwrap();
    let overrides = Overrides {
        config: Some(demo_toml),
        out: Some(tmp.path().join("run")),
        ..Overrides::default()
    };
    let cfg = cli::load_config(&overrides).unwrap();
    let (_, report, _) = cmd_full(&cfg).unwrap();
    assert!(report.passed());

    let produced = fs::read_to_string(tmp.path().join("run/reports/summary.txt")).unwrap();
    let summary = fs::read_to_string(&frozen).expect("frozen demo summary is bundled");
    assert_eq!(produced, summary, "demo summary drifted from the frozen copy");

    // The summary genuinely reports the headline numbers.
    for needle in ["reward ratio", "Missed", "share", "%"] {
        assert!(summary.contains(needle), "summary lost {needle:?}:\n{summary}");
    }
}
