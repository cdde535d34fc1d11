//! Operator entry point: one TOML run configuration, four subcommands
//! (`simulate`, `analyze`, `report`, `full`), flags overriding file values.
//!
//! Every artifact lands under the run's `--out` directory, named by the user
//! and free of timestamps, so two runs with the same seed diff clean.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use thiserror::Error;

use crate::analyzer::{self, AnalyzerError, AnalyzerOptions, AuditReport, Store};
use crate::entities::{self, EntityError, EntityMap};
use crate::metrics::{self, MetricsBundle, METRIC_NAMES};
use crate::rewards::{RewardError, WeightParams};
use crate::sim::{SimConfig, SimError, Simulator};
use crate::snapshot::{self, SnapshotError};
use crate::source::{
    FilesProvider, HttpProvider, SimProvider, SlotRange, SourceError, StateProvider,
};

/// Errors surfaced to the operator with a non-zero exit.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config file {path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Entity(#[from] EntityError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Where snapshots come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// In-process deterministic simulation.
    Sim,
    /// Directory of `state_{slot}.json` files.
    Files,
    /// HTTP endpoint exposing `/states/{slot}` and `/range`.
    Http,
}

/// One run's full configuration. The TOML file carries the simulation knobs
/// at top level (they are the fields of [`SimConfig`]), the reward
/// parameters under `[params]`, and the plumbing keys below.
#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub provider: ProviderKind,
    /// Run directory for every artifact.
    pub out_dir: PathBuf,
    /// Snapshot fixture directory; defaults to `{out_dir}/states`.
    pub state_dir: Option<PathBuf>,
    /// Endpoint for the http provider.
    pub base_url: Option<String>,
    /// Attribution inputs; default to `{out_dir}/deposits.csv` and
    /// `{out_dir}/entities.csv` when present. Named `*_file` because the
    /// bare `entities` key is the simulation's entity share list.
    pub deposits_file: Option<PathBuf>,
    pub entities_file: Option<PathBuf>,
    pub first_epoch: u64,
    /// Defaults to the newest epoch whose attestation flags are final in
    /// the provider's range.
    pub last_epoch: Option<u64>,
    pub split_epoch: Option<u64>,
    pub checkpoint_every: u64,
    /// Metric selection for `report`; empty means all.
    pub reports: Vec<String>,
    #[serde(flatten)]
    pub sim: SimConfig,
    pub params: WeightParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            provider: ProviderKind::Sim,
            out_dir: PathBuf::from("out"),
            state_dir: None,
            base_url: None,
            deposits_file: None,
            entities_file: None,
            first_epoch: 0,
            last_epoch: None,
            split_epoch: None,
            checkpoint_every: 10,
            reports: Vec::new(),
            sim: SimConfig::default(),
            params: WeightParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate()?;
        self.params.validate()?;
        if let Some(last) = self.last_epoch {
            if last < self.first_epoch {
                return Err(CliError::Config(format!(
                    "last_epoch {last} is before first_epoch {}",
                    self.first_epoch
                )));
            }
        }
        for name in &self.reports {
            if name != "all" && !METRIC_NAMES.contains(&name.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown report {name:?}; valid names: all, {}",
                    METRIC_NAMES.join(", ")
                )));
            }
        }
        if self.provider == ProviderKind::Http && self.base_url.is_none() {
            return Err(CliError::Config(
                "provider \"http\" needs base_url (--base-url)".into(),
            ));
        }
        Ok(())
    }

    fn states_dir(&self) -> PathBuf {
        self.state_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("states"))
    }
}

/// Flag overrides; any flag given wins over the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML run configuration to start from.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Simulation seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Initial validator count.
    #[arg(long, global = true, value_name = "N")]
    pub validators: Option<usize>,
    /// Epochs to simulate.
    #[arg(long, global = true, value_name = "N")]
    pub epochs: Option<u64>,
    /// Epoch splitting the block-rate comparison.
    #[arg(long, global = true, value_name = "N")]
    pub split_epoch: Option<u64>,
    /// Run directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Snapshot source backend.
    #[arg(long, global = true, value_enum, value_name = "KIND")]
    pub provider: Option<ProviderKind>,
    /// Endpoint for the http provider.
    #[arg(long, global = true, value_name = "URL")]
    pub base_url: Option<String>,
    /// Validator-to-address CSV.
    #[arg(long, global = true, value_name = "PATH")]
    pub deposits: Option<PathBuf>,
    /// Address-to-entity CSV.
    #[arg(long, global = true, value_name = "PATH")]
    pub entities: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(
    name = "beacon-mer",
    version,
    about = "Consensus reward simulator, ledger indexer, and report generator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Run the simulation and write the snapshot fixture plus attribution
    /// CSVs.
    Simulate,
    /// Index an epoch range into the ledger store, auditing as it goes.
    Analyze,
    /// Compute metrics from the stored ledger and write reports.
    Report,
    /// Simulate, analyze, and report in sequence.
    Full,
}

/// Loads the config file (if any) and applies flag overrides.
pub fn load_config(overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match &overrides.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.display().to_string(),
                source,
            })?;
            toml::from_str(&text).map_err(|source| CliError::Toml {
                path: path.display().to_string(),
                source: Box::new(source),
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.sim.seed = seed;
    }
    if let Some(v) = overrides.validators {
        cfg.sim.validator_count = v;
    }
    if let Some(e) = overrides.epochs {
        cfg.sim.epochs = e;
    }
    if let Some(s) = overrides.split_epoch {
        cfg.split_epoch = Some(s);
    }
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.clone();
    }
    if let Some(p) = overrides.provider {
        cfg.provider = p;
    }
    if let Some(url) = &overrides.base_url {
        cfg.base_url = Some(url.clone());
    }
    if let Some(d) = &overrides.deposits {
        cfg.deposits_file = Some(d.clone());
    }
    if let Some(e) = &overrides.entities {
        cfg.entities_file = Some(e.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// What `simulate` produced.
#[derive(Debug)]
pub struct SimulateOutcome {
    pub states_dir: PathBuf,
    pub range: SlotRange,
    pub deposits_csv: PathBuf,
    pub entities_csv: PathBuf,
}

/// Runs the configured simulation, writing one `state_{slot}.json` per slot
/// plus the synthetic attribution CSVs.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutcome, CliError> {
    let states_dir = cfg.states_dir();
    let mut sim = Simulator::new(cfg.sim.clone(), cfg.params.clone())?;
    let last = sim.last_run_slot();
    while sim.next_slot() <= last {
        let snap = sim.step()?;
        snapshot::write_state_file(&snap, &states_dir)?;
    }

    fs::create_dir_all(&cfg.out_dir).map_err(|source| CliError::Io {
        path: cfg.out_dir.display().to_string(),
        source,
    })?;
    let deposits_csv = cfg.out_dir.join("deposits.csv");
    let entities_csv = cfg.out_dir.join("entities.csv");
    entities::write_deposits_csv(&deposits_csv, &sim.deposit_rows())?;
    entities::write_entities_csv(&entities_csv, &sim.entity_rows())?;

    Ok(SimulateOutcome {
        states_dir,
        range: SlotRange { first_slot: 0, last_slot: last },
        deposits_csv,
        entities_csv,
    })
}

fn existing(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

fn load_entity_map(cfg: &RunConfig) -> Result<EntityMap, CliError> {
    let deposits = cfg
        .deposits_file
        .clone()
        .or_else(|| existing(cfg.out_dir.join("deposits.csv")));
    let entity_file = cfg
        .entities_file
        .clone()
        .or_else(|| existing(cfg.out_dir.join("entities.csv")));
    match (deposits, entity_file) {
        (Some(d), Some(e)) => Ok(entities::build_map(&d, &e)?),
        (None, None) => Ok(EntityMap::default()),
        (Some(d), None) => Err(CliError::Config(format!(
            "deposits file {} given without an entities file",
            d.display()
        ))),
        (None, Some(e)) => Err(CliError::Config(format!(
            "entities file {} given without a deposits file",
            e.display()
        ))),
    }
}

fn make_provider(cfg: &RunConfig) -> Result<Box<dyn StateProvider>, CliError> {
    Ok(match cfg.provider {
        ProviderKind::Sim => {
            Box::new(SimProvider::new(cfg.sim.clone(), cfg.params.clone())?)
        }
        ProviderKind::Files => Box::new(FilesProvider::new(cfg.states_dir())),
        ProviderKind::Http => {
            let url = cfg
                .base_url
                .as_ref()
                .expect("validated: http provider has base_url");
            Box::new(HttpProvider::new(url.clone()))
        }
    })
}

/// Latest epoch whose rows are resolvable from a provider range: flags for
/// epoch `n` need the end state of `n + 1`.
fn derive_last_epoch(range: SlotRange, cfg: &RunConfig) -> Result<u64, CliError> {
    let spe = cfg.params.slots_per_epoch;
    let full_epochs = (range.last_slot + 1) / spe;
    if full_epochs < cfg.first_epoch + 2 {
        return Err(CliError::Config(format!(
            "provider covers {full_epochs} full epoch(s); indexing from epoch {} needs at least {}",
            cfg.first_epoch,
            cfg.first_epoch + 2
        )));
    }
    Ok(full_epochs - 2)
}

/// Indexes the configured epoch range into `{out_dir}`, resuming from any
/// checkpoint already there.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<AuditReport, CliError> {
    let entity_map = load_entity_map(cfg)?;
    let mut provider = make_provider(cfg)?;
    let last_epoch = match cfg.last_epoch {
        Some(l) => l,
        None => derive_last_epoch(provider.range()?, cfg)?,
    };
    let mut store = if cfg.out_dir.exists() {
        Store::load(&cfg.out_dir)?
    } else {
        Store::default()
    };
    let opts = AnalyzerOptions {
        scaled_penalties: cfg.sim.scaled_penalties,
        checkpoint_every: cfg.checkpoint_every,
        out_dir: Some(cfg.out_dir.clone()),
    };
    let report = analyzer::process_range(
        provider.as_mut(),
        &entity_map,
        &cfg.params,
        cfg.first_epoch,
        last_epoch,
        &opts,
        &mut store,
    )?;
    Ok(report)
}

/// Computes all selected metrics from the stored ledger and writes reports
/// under `{out_dir}/reports`.
pub fn cmd_report(cfg: &RunConfig) -> Result<(MetricsBundle, Vec<PathBuf>), CliError> {
    let store = Store::load(&cfg.out_dir)?;
    if store.row_count() == 0 {
        return Err(CliError::Config(format!(
            "no ledger rows under {}; run analyze first",
            cfg.out_dir.display()
        )));
    }
    let bundle = metrics::compute_all(&store, cfg.split_epoch);
    let report_dir = cfg.out_dir.join("reports");
    let written = metrics::export_reports(&report_dir, &bundle, &cfg.reports).map_err(
        |source| CliError::Io { path: report_dir.display().to_string(), source },
    )?;
    Ok((bundle, written))
}

/// `simulate` (for the sim provider), then `analyze`, then `report`.
pub fn cmd_full(
    cfg: &RunConfig,
) -> Result<(Option<SimulateOutcome>, AuditReport, MetricsBundle), CliError> {
    let simulated = if cfg.provider == ProviderKind::Sim {
        Some(cmd_simulate(cfg)?)
    } else {
        None
    };
    let audit = cmd_analyze(cfg)?;
    let (bundle, _) = cmd_report(cfg)?;
    Ok((simulated, audit, bundle))
}

fn describe_audit(report: &AuditReport) -> String {
    let mut s = format!(
        "indexed {} epoch(s); conservation audited over {} epoch(s)",
        report.epochs_indexed, report.conservation_epochs
    );
    if let Some(r) = report.mer_ratio {
        s.push_str(&format!("; aggregate reward ratio {:.4}", r));
    }
    if report.passed() {
        s.push_str("; audits passed");
    } else {
        s.push_str(&format!(
            "; AUDIT FAILURES: {} conservation, {} dominance",
            report.conservation_violations.len(),
            report.dominance_violations.len()
        ));
    }
    s
}

fn audit_exit(report: &AuditReport) -> i32 {
    if report.passed() {
        0
    } else {
        for v in &report.conservation_violations {
            eprintln!(
                "conservation: epoch {} validator {} moved {} Gwei, duties explain {}",
                v.epoch, v.validator, v.actual_delta, v.expected_delta
            );
        }
        for v in &report.dominance_violations {
            eprintln!(
                "dominance: epoch {} validator {} attained {} of maximum {}",
                v.epoch, v.validator, v.attained, v.maximum
            );
        }
        1
    }
}

/// Parses `argv` and runs the chosen command, returning the process exit
/// code. Exit 0 means artifacts were written and every audit passed.
pub fn run<I, T>(argv: I) -> Result<i32, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and exit clean; usage errors
            // go to stderr with the conventional code.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return Ok(code);
        }
    };
    let cfg = load_config(&cli.overrides)?;
    match cli.command {
        Command::Simulate => {
            let outcome = cmd_simulate(&cfg)?;
            println!(
                "wrote slots {}..={} under {} (attribution: {}, {})",
                outcome.range.first_slot,
                outcome.range.last_slot,
                outcome.states_dir.display(),
                outcome.deposits_csv.display(),
                outcome.entities_csv.display(),
            );
            Ok(0)
        }
        Command::Analyze => {
            let report = cmd_analyze(&cfg)?;
            println!("{}", describe_audit(&report));
            Ok(audit_exit(&report))
        }
        Command::Report => {
            let (bundle, written) = cmd_report(&cfg)?;
            println!(
                "wrote {} report file(s) under {}",
                written.len(),
                cfg.out_dir.join("reports").display()
            );
            if let Some(r) = bundle.overall_mer {
                println!("aggregate reward ratio {:.4}", r);
            }
            Ok(0)
        }
        Command::Full => {
            let (_, report, _) = cmd_full(&cfg)?;
            println!("{}", describe_audit(&report));
            println!("artifacts under {}", cfg.out_dir.display());
            Ok(audit_exit(&report))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_override_config_file() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.toml");
        fs::write(
            &path,
            r#"
seed = 11
validator_count = 96
epochs = 9
out_dir = "from-file"
provider = "sim"

[params]
"#,
        )
        .unwrap();
        let cli = parse(&[
            "beacon-mer",
            "analyze",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "99",
            "--out",
            "from-flag",
        ]);
        let cfg = load_config(&cli.overrides).unwrap();
        assert_eq!(cfg.sim.seed, 99, "flag wins");
        assert_eq!(cfg.sim.validator_count, 96, "file value survives");
        assert_eq!(cfg.sim.epochs, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("from-flag"));
    }

    #[test]
    fn config_accepts_fault_schedules_and_entities() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.toml");
        fs::write(
            &path,
            r#"
seed = 3
validator_count = 64
epochs = 6
el_tip_distribution = { min = 10, max = 500 }

[[fault_windows]]
first_epoch = 2
last_epoch = 3
p_missed_block = 0.5

[[fault_groups]]
first_index = 0
last_index = 15
p_missed_head = 1.0

[[entities]]
name = "pool-a"
share = 0.25

[[slashings]]
slot = 40
validator = 7
"#,
        )
        .unwrap();
        let cli = parse(&["beacon-mer", "simulate", "--config", path.to_str().unwrap()]);
        let cfg = load_config(&cli.overrides).unwrap();
        assert_eq!(cfg.sim.fault_windows.len(), 1);
        assert_eq!(cfg.sim.fault_windows[0].p_missed_block, Some(0.5));
        assert_eq!(cfg.sim.fault_groups[0].p_missed_head, Some(1.0));
        assert_eq!(cfg.sim.entities[0].name, "pool-a");
        assert_eq!(cfg.sim.slashings[0].validator, 7);
        assert_eq!(cfg.sim.el_tip_distribution.max, 500);
    }

    #[test]
    fn http_provider_requires_base_url() {
        let cli = parse(&["beacon-mer", "analyze", "--provider", "http"]);
        match load_config(&cli.overrides) {
            Err(CliError::Config(msg)) => assert!(msg.contains("base_url"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_report_selection_is_rejected() {
        let cfg = RunConfig { reports: vec!["nonsense".into()], ..RunConfig::default() };
        match cfg.validate() {
            Err(CliError::Config(msg)) => assert!(msg.contains("nonsense")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn full_run_writes_every_artifact_and_passes_audits() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let mut cfg = RunConfig { out_dir: out.clone(), split_epoch: Some(2), ..RunConfig::default() };
        cfg.sim.epochs = 5;
        cfg.sim.p_missed_head = 0.1;
        cfg.sim.p_missed_block = 0.1;
        cfg.sim.el_tip_distribution = crate::sim::TipRange::new(100, 900);
        cfg.sim.entities = vec![crate::sim::EntityShare { name: "pool-a".into(), share: 0.5 }];

        let (simulated, audit, bundle) = cmd_full(&cfg).unwrap();
        assert!(audit.passed());
        let sim_outcome = simulated.unwrap();
        assert_eq!(sim_outcome.range.last_slot, 5 * 32 - 1);

        for artifact in [
            "states/state_0.json",
            "states/state_159.json",
            "deposits.csv",
            "entities.csv",
            "ledger.csv",
            "proposals.csv",
            "checkpoint.json",
            "reports/summary.txt",
            "reports/metrics.json",
            "reports/missed_flags.csv",
            "reports/entity_mer.json",
            "reports/blocks_comparison.csv",
        ] {
            assert!(out.join(artifact).exists(), "missing {artifact}");
        }
        // Epochs 0..=3 are resolvable from a 5-epoch run.
        assert_eq!(bundle.epochs, vec![0, 1, 2, 3]);
        assert!(bundle.entity_mer.iter().any(|e| e.entity == "pool-a"));
    }

    #[test]
    fn report_without_ledger_is_a_clear_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig { out_dir: tmp.path().join("empty"), ..RunConfig::default() };
        match cmd_report(&cfg) {
            Err(CliError::Config(msg)) => assert!(msg.contains("analyze"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn derive_last_epoch_needs_two_full_epochs() {
        let cfg = RunConfig::default();
        let short = SlotRange { first_slot: 0, last_slot: 40 };
        assert!(derive_last_epoch(short, &cfg).is_err());
        let ok = SlotRange { first_slot: 0, last_slot: 159 };
        assert_eq!(derive_last_epoch(ok, &cfg).unwrap(), 3);
    }
}
