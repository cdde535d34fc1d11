//! Serves a simulated state directory over HTTP with the bundled mock server,
//! then reads it back through [`HttpProvider`], including a transient-failure
//! retry. Run with `cargo run --example http_provider`.

use std::fs;
use std::path::PathBuf;

use beacon_mer::rewards::WeightParams;
use beacon_mer::sim::SimConfig;
use beacon_mer::source::{self, HttpProvider, MockServer, RetryPolicy, StateProvider};

fn out_dir() -> PathBuf {
    let workspace = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .expect("crate sits two levels below the workspace root");
    workspace.join("target/example_out/http_provider")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let states = out_dir().join("states");
    fs::create_dir_all(&states)?;

    // Bake a small fixture: 64 validators for 3 epochs.
    let cfg = SimConfig { seed: 11, validator_count: 64, epochs: 3, ..SimConfig::default() };
    let params = WeightParams::default();
    let range = source::write_sim_fixture(cfg, params, &states)?;
    println!("fixture on disk: slots {}..={}", range.first_slot, range.last_slot);

    // The mock server exposes GET /range and GET /states/{slot} over a local
    // port picked by the OS.
    let server = MockServer::serve(&states)?;
    println!("mock server listening at {}", server.base_url());

    let mut provider = HttpProvider::with_retry(server.base_url(), RetryPolicy::immediate(4));
    let served = provider.range()?;
    assert_eq!(served, range);

    let snap = provider.get_state(range.last_slot)?;
    println!(
        "slot {} over HTTP: epoch {}, {} validators, proposer {}",
        snap.slot,
        snap.meta.epoch,
        snap.balances.len(),
        snap.proposer_index,
    );

    // Two injected 500s are absorbed by the retry policy; the third attempt
    // succeeds without the caller noticing.
    let before = server.request_count();
    server.fail_next(2);
    let again = provider.get_state(range.last_slot)?;
    assert_eq!(again.slot, snap.slot);
    println!(
        "after 2 injected failures the same read took {} requests",
        server.request_count() - before,
    );

    // A slot past the fixture is a clean not-found, not a retry loop.
    match provider.get_state(range.last_slot + 1) {
        Err(e) => println!("slot {}: {e}", range.last_slot + 1),
        Ok(_) => unreachable!("slot past the fixture cannot exist"),
    }
    Ok(())
}
