//! Shows the two-file entity attribution: validator-to-deposit-address and
//! address-to-entity CSVs joined into one lookup, with unknown validators
//! falling back to "Other". Run with `cargo run --example entity_mapping`.

use std::fs;
use std::path::PathBuf;

use beacon_mer::entities::{self, EntityError};

fn out_dir() -> PathBuf {
    let workspace = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .expect("crate sits two levels below the workspace root");
    workspace.join("target/example_out/entity_mapping")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = out_dir();
    fs::create_dir_all(&dir)?;

    // Validators 0..3 deposited from two pool addresses; 4 is unmapped.
    let deposits = dir.join("deposits.csv");
    let entity_file = dir.join("entities.csv");
    entities::write_deposits_csv(
        &deposits,
        &[
            (0, "0x00000000000000000000000000000000000000a1".into()),
            (1, "0x00000000000000000000000000000000000000a1".into()),
            (2, "0x00000000000000000000000000000000000000b2".into()),
            (3, "0x00000000000000000000000000000000000000b2".into()),
            (4, "0x00000000000000000000000000000000000000c3".into()),
        ],
    )?;
    entities::write_entities_csv(
        &entity_file,
        &[
            // Addresses match case-insensitively; this one is restated in
            // uppercase on purpose.
            ("0x00000000000000000000000000000000000000A1".into(), "pool-a".into()),
            ("0x00000000000000000000000000000000000000b2".into(), "pool-b".into()),
        ],
    )?;

    let map = entities::build_map(&deposits, &entity_file)?;
    println!("known entities: {:?}", map.known_entities());
    println!("mapped validators: {}", map.mapped_validators());
    for v in 0..6u64 {
        println!("validator {v} belongs to {}", map.entity_of(v));
    }

    // Conflicting claims are rejected, not silently resolved.
    let conflicted = dir.join("conflicted.csv");
    fs::write(
        &conflicted,
        "deposit_address,entity_name\n\
         0x00000000000000000000000000000000000000a1,pool-a\n\
         0x00000000000000000000000000000000000000a1,pool-z\n",
    )?;
    match entities::build_map(&deposits, &conflicted) {
        Err(EntityError::ConflictingEntity { address, first, second }) => {
            println!("\nconflict detected as designed: {address} claimed by {first} and {second}");
        }
        other => println!("\nunexpected outcome: {other:?}"),
    }
    Ok(())
}
