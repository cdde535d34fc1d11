//! Indexes a simulated chain into the per-validator per-epoch ledger,
//! with the conservation and dominance audits on, then prints a few rows.
//! Run with `cargo run --example analyze_ledger`.

use std::path::PathBuf;

use beacon_mer::analyzer::{self, AnalyzerOptions, Store};
use beacon_mer::entities::EntityMap;
use beacon_mer::rewards::WeightParams;
use beacon_mer::sim::{SimConfig, TipRange};
use beacon_mer::source::SimProvider;

fn out_dir() -> PathBuf {
    let workspace = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .expect("crate sits two levels below the workspace root");
    workspace.join("target/example_out/analyze_ledger")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SimConfig {
        seed: 99,
        validator_count: 64,
        epochs: 8,
        p_missed_head: 0.08,
        p_missed_source: 0.02,
        p_missed_target: 0.02,
        p_sync_miss: 0.05,
        el_tip_distribution: TipRange::new(1_000, 20_000),
        ..SimConfig::default()
    };
    let params = WeightParams::default();

    let mut provider = SimProvider::new(cfg, params.clone())?;
    let mut store = Store::default();
    let opts = AnalyzerOptions { out_dir: Some(out_dir()), ..AnalyzerOptions::default() };
    // Epoch 6 is the newest whose attestation flags are final in an 8-epoch
    // chain: flags for epoch n are read from the end state of n + 1.
    let report = analyzer::process_range(
        &mut provider,
        &EntityMap::default(),
        &params,
        0,
        6,
        &opts,
        &mut store,
    )?;

    println!(
        "indexed {} epochs, {} ledger rows, audits {}",
        report.epochs_indexed,
        store.row_count(),
        if report.passed() { "passed" } else { "FAILED" }
    );
    if let Some(ratio) = report.mer_ratio {
        println!("aggregate reward ratio: {ratio:.4}");
    }

    println!("\nvalidator 5, epoch by epoch:");
    println!("epoch  flags  att_reward  att_penalty  att_max  sync  proposer  tips");
    for epoch in store.indexed_epochs() {
        let row = &store.epoch_rows(epoch).unwrap()[5];
        let flags = format!(
            "{}{}{}",
            if row.flag_source { 'S' } else { '-' },
            if row.flag_target { 'T' } else { '-' },
            if row.flag_head { 'H' } else { '-' },
        );
        println!(
            "{epoch:>5}  {flags:>5}  {:>10}  {:>11}  {:>7}  {:>4}  {:>8}  {:>4}",
            row.att_reward,
            row.att_penalty,
            row.att_max,
            row.sync_reward,
            row.proposer_reward,
            row.el_reward
        );
    }

    let checkpoint = store.checkpoint().expect("saved after a successful run");
    println!(
        "\nledger persisted under {} (checkpoint: epoch {}, next slot {})",
        out_dir().display(),
        checkpoint.last_fully_indexed_epoch,
        checkpoint.next_slot
    );
    Ok(())
}
