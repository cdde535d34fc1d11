//! Runs the same network twice, once healthy and once with injected faults,
//! and compares the resulting reward ratios, missed-duty rates, and income
//! mix. Run with `cargo run --example fault_scenarios`.

use beacon_mer::analyzer::{process_range, AnalyzerOptions, Store};
use beacon_mer::entities::EntityMap;
use beacon_mer::metrics;
use beacon_mer::rewards::WeightParams;
use beacon_mer::sim::{FaultGroup, FaultWindow, SimConfig, TipRange};
use beacon_mer::source::SimProvider;

const EPOCHS: u64 = 14;

fn run(label: &str, cfg: SimConfig) -> Result<Store, Box<dyn std::error::Error>> {
    let params = WeightParams::default();
    let mut provider = SimProvider::new(cfg, params.clone())?;
    let mut store = Store::default();
    let report = process_range(
        &mut provider,
        &EntityMap::default(),
        &params,
        0,
        EPOCHS - 2,
        &AnalyzerOptions::default(),
        &mut store,
    )?;
    println!(
        "{label}: {} epochs indexed, audits {}",
        report.epochs_indexed,
        if report.passed() { "passed" } else { "FAILED" },
    );
    Ok(store)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clean = SimConfig {
        seed: 400,
        validator_count: 128,
        epochs: EPOCHS,
        p_missed_block: 0.01,
        p_missed_head: 0.02,
        el_tip_distribution: TipRange::new(1_000, 30_000),
        ..SimConfig::default()
    };

    // Same network, plus a rough patch: every proposer struggles during
    // epochs 4..=7, and the last quarter of the registry misses most head
    // votes and a third of its sync duties throughout.
    let mut degraded = clean.clone();
    degraded.p_missed_source = 0.02;
    degraded.p_missed_target = 0.02;
    degraded.fault_windows = vec![FaultWindow {
        first_epoch: 4,
        last_epoch: 7,
        p_missed_block: Some(0.30),
        p_offline: None,
    }];
    degraded.fault_groups = vec![FaultGroup {
        first_index: 96,
        last_index: 127,
        p_missed_source: None,
        p_missed_target: None,
        p_missed_head: Some(0.60),
        p_sync_miss: Some(0.33),
        p_offline: None,
    }];

    let clean_store = run("clean", clean)?;
    let degraded_store = run("degraded", degraded)?;

    println!("\n{:<28}{:>12}{:>12}", "metric", "clean", "degraded");
    let mer = |s: &Store| metrics::compute_all(s, None).overall_mer.unwrap_or(f64::NAN);
    println!(
        "{:<28}{:>12.4}{:>12.4}",
        "overall reward ratio",
        mer(&clean_store),
        mer(&degraded_store),
    );

    let mean_missed = |s: &Store| {
        let series = metrics::missed_flags_series(s);
        let n = series.len() as f64;
        let (src, head) = series
            .iter()
            .fold((0.0, 0.0), |(a, b), p| (a + p.missed_source, b + p.missed_head));
        (src / n, head / n)
    };
    let (clean_src, clean_head) = mean_missed(&clean_store);
    let (deg_src, deg_head) = mean_missed(&degraded_store);
    println!("{:<28}{:>12.4}{:>12.4}", "mean missed source", clean_src, deg_src);
    println!("{:<28}{:>12.4}{:>12.4}", "mean missed head", clean_head, deg_head);

    let comparison = |s: &Store| metrics::missed_blocks_compare(s, 8).expect("split in range");
    let cb = comparison(&clean_store);
    let db = comparison(&degraded_store);
    println!("{:<28}{:>12.4}{:>12.4}", "missed blocks before e8", cb.before_ratio, db.before_ratio);
    println!("{:<28}{:>12.4}{:>12.4}", "missed blocks after e8", cb.after_ratio, db.after_ratio);

    let mix = |s: &Store| metrics::reward_decomposition(s);
    let cm = mix(&clean_store);
    let dm = mix(&degraded_store);
    println!("{:<28}{:>11.2}%{:>11.2}%", "attestation share", 100.0 * cm.attestation_share, 100.0 * dm.attestation_share);
    println!("{:<28}{:>11.2}%{:>11.2}%", "proposer share", 100.0 * cm.proposer_share, 100.0 * dm.proposer_share);
    println!("{:<28}{:>11.2}%{:>11.2}%", "execution tip share", 100.0 * cm.el_share, 100.0 * dm.el_share);
    Ok(())
}
