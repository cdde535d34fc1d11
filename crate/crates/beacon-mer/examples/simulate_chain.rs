//! Runs the deterministic chain simulation and writes a snapshot fixture:
//! one JSON state per slot, the shape the file and HTTP providers serve.
//! Run with `cargo run --example simulate_chain`.

use std::path::PathBuf;

use beacon_mer::rewards::WeightParams;
use beacon_mer::sim::{SimConfig, Simulator, SlashingEvent, TipRange};
use beacon_mer::source::write_sim_fixture;

fn out_dir() -> PathBuf {
    let workspace = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .expect("crate sits two levels below the workspace root");
    workspace.join("target/example_out/simulate_chain")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SimConfig {
        seed: 7,
        validator_count: 64,
        epochs: 6,
        p_missed_block: 0.08,
        p_missed_head: 0.05,
        p_sync_miss: 0.02,
        el_tip_distribution: TipRange::new(1_000, 30_000),
        slashings: vec![SlashingEvent { slot: 70, validator: 12, whistleblower: None }],
        ..SimConfig::default()
    };
    let params = WeightParams::default();

    // Stream the chain once to gather headline numbers.
    let mut sim = Simulator::new(cfg.clone(), params.clone())?;
    let mut blocks = 0u64;
    let mut slots = 0u64;
    let mut tips = 0u64;
    for snap in sim.snapshots() {
        let snap = snap?;
        slots += 1;
        let slot_meta = snap.meta.slots.last().expect("every snapshot carries its slot");
        blocks += u64::from(slot_meta.block_proposed);
        tips += slot_meta.el_tips;
    }
    println!("simulated {slots} slots: {blocks} blocks proposed, {tips} Gwei in tips");

    // Write the same chain as a fixture directory (same seed, same bytes).
    let states = out_dir().join("states");
    let range = write_sim_fixture(cfg, params, &states)?;
    println!(
        "fixture written: slots {}..={} under {}",
        range.first_slot,
        range.last_slot,
        states.display()
    );
    println!("inspect one with: python3 -m json.tool {}/state_70.json", states.display());
    Ok(())
}
