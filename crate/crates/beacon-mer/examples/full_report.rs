//! Drives the whole pipeline the way the binary does: load the bundled demo
//! configuration, simulate, index, audit, and export every report, then print
//! the human-readable summary. Run with `cargo run --example full_report`.

use std::fs;
use std::path::PathBuf;

use beacon_mer::cli::{self, Overrides};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let workspace = manifest
        .ancestors()
        .nth(2)
        .expect("crate sits two levels below the workspace root");
    let out = workspace.join("target/example_out/full_report");

    // Same precedence as the binary: the TOML file first, flags on top.
    let overrides = Overrides {
        config: Some(manifest.join("fixtures/demo.toml")),
        out: Some(out.clone()),
        ..Overrides::default()
    };
    let cfg = cli::load_config(&overrides)?;

    let (simulated, audit, bundle) = cli::cmd_full(&cfg)?;
    if let Some(sim) = simulated {
        println!(
            "simulated slots {}..={} into {}",
            sim.range.first_slot,
            sim.range.last_slot,
            sim.states_dir.display(),
        );
    }
    println!(
        "audits {}; {} ledger epochs in the bundle",
        if audit.passed() { "passed" } else { "FAILED" },
        bundle.epochs.len(),
    );

    println!("\nartifacts under {}:", out.display());
    let mut names: Vec<String> = fs::read_dir(out.join("reports"))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in &names {
        println!("  reports/{name}");
    }

    let summary = fs::read_to_string(out.join("reports/summary.txt"))?;
    println!("\n{summary}");
    Ok(())
}
