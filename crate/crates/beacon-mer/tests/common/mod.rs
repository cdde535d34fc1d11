//! Helpers shared by the integration suites.
//!
//! Each suite compiles its own copy, so helpers unused by one binary are
//! expected; dead-code analysis is off for the whole tree.
#![allow(dead_code)]

pub mod oracle;

use std::path::Path;

use beacon_mer::analyzer::{self, AnalyzerOptions, AuditReport, Store};
use beacon_mer::entities::EntityMap;
use beacon_mer::rewards::WeightParams;
use beacon_mer::sim::SimConfig;
use beacon_mer::snapshot::BeaconStateSnapshot;
use beacon_mer::source::SimProvider;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded RNG for test-local sampling, independent of the simulator's
/// domain-separated streams.
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A quiet baseline configuration tests specialise per scenario.
pub fn base_config(seed: u64, validators: usize, epochs: u64) -> SimConfig {
    SimConfig {
        seed,
        validator_count: validators,
        epochs,
        ..SimConfig::default()
    }
}

/// Runs the analyzer over a simulated chain entirely in memory.
pub fn analyze_sim(
    cfg: &SimConfig,
    params: &WeightParams,
    first_epoch: u64,
    last_epoch: u64,
) -> (Store, AuditReport) {
    let mut provider = SimProvider::new(cfg.clone(), params.clone()).expect("valid sim config");
    let mut store = Store::default();
    let report = analyzer::process_range(
        &mut provider,
        &EntityMap::default(),
        params,
        first_epoch,
        last_epoch,
        &AnalyzerOptions::default(),
        &mut store,
    )
    .expect("analysis completes");
    (store, report)
}

/// Sum of all validator balances in a snapshot.
pub fn total_balance(snap: &BeaconStateSnapshot) -> u128 {
    snap.balances.iter().map(|&b| b as u128).sum()
}

/// Reads a file fully, panicking with the path on error.
pub fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

/// Asserts two files are byte-identical.
pub fn assert_same_file(a: &Path, b: &Path) {
    let left = read_bytes(a);
    let right = read_bytes(b);
    assert!(
        left == right,
        "{} and {} differ ({} vs {} bytes)",
        a.display(),
        b.display(),
        left.len(),
        right.len()
    );
}
