//! Validator-to-entity attribution via deposit addresses.
//!
//! Two CSV inputs: `deposits.csv` maps `validator_index,deposit_address` and
//! `entities.csv` maps `deposit_address,entity_name`. The join is an exact
//! match on the lowercased hex address. Validators whose address has no
//! entity row, or which have no deposit row at all, fall back to
//! [`OTHER_ENTITY`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

/// Catch-all bucket for validators without a known operator.
pub const OTHER_ENTITY: &str = "Other";

/// Errors from loading and joining the attribution CSVs.
#[derive(Debug, Error)]
pub enum EntityError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: u64, reason: String },
    #[error(
        "validator {validator} listed with two deposit addresses: {first} and {second}"
    )]
    ConflictingDeposit { validator: u64, first: String, second: String },
    #[error("deposit address {address} mapped to two entities: {first} and {second}")]
    ConflictingEntity { address: String, first: String, second: String },
}

/// Resolved attribution: validator index to entity name, plus the set of
/// entity names that appeared in `entities.csv`.
#[derive(Debug, Clone, Default)]
pub struct EntityMap {
    by_validator: BTreeMap<u64, String>,
    known: Vec<String>,
}

impl EntityMap {
    /// Entity name for a validator; unmapped validators are
    /// [`OTHER_ENTITY`].
    pub fn entity_of(&self, validator: u64) -> &str {
        self.by_validator
            .get(&validator)
            .map(String::as_str)
            .unwrap_or(OTHER_ENTITY)
    }

    /// Entity names seen in `entities.csv`, sorted and deduplicated. Does not
    /// include [`OTHER_ENTITY`].
    pub fn known_entities(&self) -> &[String] {
        &self.known
    }

    /// Number of validators with an explicit (non-fallback) attribution.
    pub fn mapped_validators(&self) -> usize {
        self.by_validator.len()
    }
}

#[derive(Debug, Deserialize)]
struct DepositRow {
    validator_index: u64,
    deposit_address: String,
}

#[derive(Debug, Deserialize)]
struct EntityRow {
    deposit_address: String,
    entity_name: String,
}

/// Lowercases and validates a `0x`-prefixed hex address.
fn normalize_address(raw: &str) -> Result<String, String> {
    let addr = raw.trim().to_ascii_lowercase();
    let digits = addr
        .strip_prefix("0x")
        .ok_or_else(|| format!("address {raw:?} does not start with 0x"))?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(format!("address {raw:?} is not hex"));
    }
    Ok(addr)
}

fn csv_line(err: &csv::Error) -> u64 {
    err.position().map(|p| p.line()).unwrap_or(0)
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(u64, T)>, EntityError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| EntityError::Io {
        path: display.clone(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows = Vec::new();
    let mut iter = reader.deserialize::<T>();
    loop {
        // Capture the line before pulling the record so errors point at the
        // offending row, not the one after it.
        let line = iter.reader().position().line();
        match iter.next() {
            None => break,
            Some(Ok(row)) => rows.push((line, row)),
            Some(Err(e)) => {
                return Err(EntityError::Malformed {
                    path: display,
                    line: csv_line(&e).max(line),
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(rows)
}

/// Loads both CSVs and joins them into an [`EntityMap`].
///
/// Duplicate rows are allowed when they restate the same fact and rejected
/// when they conflict. Addresses are compared after lowercasing.
pub fn build_map(deposits_path: &Path, entities_path: &Path) -> Result<EntityMap, EntityError> {
    let deposit_rows: Vec<(u64, DepositRow)> = read_rows(deposits_path)?;
    let entity_rows: Vec<(u64, EntityRow)> = read_rows(entities_path)?;

    let mut by_address: BTreeMap<String, String> = BTreeMap::new();
    let mut known = Vec::new();
    for (line, row) in entity_rows {
        let address = normalize_address(&row.deposit_address).map_err(|reason| {
            EntityError::Malformed {
                path: entities_path.display().to_string(),
                line,
                reason,
            }
        })?;
        if row.entity_name.is_empty() {
            return Err(EntityError::Malformed {
                path: entities_path.display().to_string(),
                line,
                reason: "empty entity_name".into(),
            });
        }
        if let Some(existing) = by_address.get(&address) {
            if *existing != row.entity_name {
                return Err(EntityError::ConflictingEntity {
                    address,
                    first: existing.clone(),
                    second: row.entity_name,
                });
            }
        } else {
            by_address.insert(address, row.entity_name.clone());
        }
        known.push(row.entity_name);
    }
    known.sort();
    known.dedup();

    let mut deposits: BTreeMap<u64, String> = BTreeMap::new();
    for (line, row) in deposit_rows {
        let address = normalize_address(&row.deposit_address).map_err(|reason| {
            EntityError::Malformed {
                path: deposits_path.display().to_string(),
                line,
                reason,
            }
        })?;
        if let Some(existing) = deposits.get(&row.validator_index) {
            if *existing != address {
                return Err(EntityError::ConflictingDeposit {
                    validator: row.validator_index,
                    first: existing.clone(),
                    second: address,
                });
            }
        } else {
            deposits.insert(row.validator_index, address);
        }
    }

    let by_validator = deposits
        .into_iter()
        .filter_map(|(validator, address)| {
            by_address.get(&address).map(|name| (validator, name.clone()))
        })
        .collect();

    Ok(EntityMap { by_validator, known })
}

/// Writes `deposits.csv` in the schema [`build_map`] reads.
pub fn write_deposits_csv(
    path: &Path,
    rows: &[(u64, String)],
) -> Result<(), EntityError> {
    let display = path.display().to_string();
    let io = |source: std::io::Error| EntityError::Io { path: display.clone(), source };
    let mut file = File::create(path).map_err(io)?;
    writeln!(file, "validator_index,deposit_address").map_err(io)?;
    for (validator, address) in rows {
        writeln!(file, "{validator},{address}").map_err(io)?;
    }
    Ok(())
}

/// Writes `entities.csv` in the schema [`build_map`] reads.
pub fn write_entities_csv(
    path: &Path,
    rows: &[(String, String)],
) -> Result<(), EntityError> {
    let display = path.display().to_string();
    let io = |source: std::io::Error| EntityError::Io { path: display.clone(), source };
    let mut file = File::create(path).map_err(io)?;
    writeln!(file, "deposit_address,entity_name").map_err(io)?;
    for (address, name) in rows {
        writeln!(file, "{address},{name}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(path: &Path, content: &str) {
        fs::write(path, content).unwrap();
    }

    #[test]
    fn join_attributes_validators_and_defaults_to_other() {
        let tmp = tempfile::tempdir().unwrap();
        let deposits = tmp.path().join("deposits.csv");
        let entities = tmp.path().join("entities.csv");
        write(
            &deposits,
            "validator_index,deposit_address\n0,0x0000000000000000000000000000000000000001\n1,0x0000000000000000000000000000000000000001\n2,0x00000000000000000000000000000000000000ff\n",
        );
        write(
            &entities,
            "deposit_address,entity_name\n0x0000000000000000000000000000000000000001,Pool A\n",
        );
        let map = build_map(&deposits, &entities).unwrap();
        assert_eq!(map.entity_of(0), "Pool A");
        assert_eq!(map.entity_of(1), "Pool A");
        assert_eq!(map.entity_of(2), OTHER_ENTITY, "address without entity row");
        assert_eq!(map.entity_of(99), OTHER_ENTITY, "validator without deposit row");
        assert_eq!(map.known_entities(), ["Pool A"]);
        assert_eq!(map.mapped_validators(), 2);
    }

    #[test]
    fn address_match_ignores_hex_case() {
        let tmp = tempfile::tempdir().unwrap();
        let deposits = tmp.path().join("deposits.csv");
        let entities = tmp.path().join("entities.csv");
        write(&deposits, "validator_index,deposit_address\n7,0xABCDEF0123\n");
        write(&entities, "deposit_address,entity_name\n0xabcdef0123,Mixed Case Pool\n");
        let map = build_map(&deposits, &entities).unwrap();
        assert_eq!(map.entity_of(7), "Mixed Case Pool");
    }

    #[test]
    fn restated_rows_are_fine_conflicts_are_not() {
        let tmp = tempfile::tempdir().unwrap();
        let deposits = tmp.path().join("deposits.csv");
        let entities = tmp.path().join("entities.csv");
        write(
            &deposits,
            "validator_index,deposit_address\n0,0xaa\n0,0xAA\n",
        );
        write(&entities, "deposit_address,entity_name\n0xaa,P\n0xaa,P\n");
        assert_eq!(build_map(&deposits, &entities).unwrap().entity_of(0), "P");

        write(&deposits, "validator_index,deposit_address\n0,0xaa\n0,0xbb\n");
        match build_map(&deposits, &entities) {
            Err(EntityError::ConflictingDeposit { validator: 0, first, second }) => {
                assert_eq!((first.as_str(), second.as_str()), ("0xaa", "0xbb"));
            }
            other => panic!("expected deposit conflict, got {other:?}"),
        }

        write(&deposits, "validator_index,deposit_address\n0,0xaa\n");
        write(&entities, "deposit_address,entity_name\n0xaa,P\n0xAA,Q\n");
        match build_map(&deposits, &entities) {
            Err(EntityError::ConflictingEntity { address, first, second }) => {
                assert_eq!(address, "0xaa");
                assert_eq!((first.as_str(), second.as_str()), ("P", "Q"));
            }
            other => panic!("expected entity conflict, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let tmp = tempfile::tempdir().unwrap();
        let deposits = tmp.path().join("deposits.csv");
        let entities = tmp.path().join("entities.csv");
        write(&entities, "deposit_address,entity_name\n0xaa,P\n");

        // Line 3 has a non-numeric index.
        write(
            &deposits,
            "validator_index,deposit_address\n0,0xaa\nnot_a_number,0xbb\n",
        );
        match build_map(&deposits, &entities) {
            Err(EntityError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }

        // Line 2 has a non-hex address.
        write(&deposits, "validator_index,deposit_address\n0,zzz\n");
        match build_map(&deposits, &entities) {
            Err(EntityError::Malformed { line: 2, reason, .. }) => {
                assert!(reason.contains("0x"), "reason: {reason}");
            }
            other => panic!("expected malformed error, got {other:?}"),
        }

        // Wrong column count on line 2 of entities.csv.
        write(&deposits, "validator_index,deposit_address\n0,0xaa\n");
        write(&entities, "deposit_address,entity_name\n0xaa\n");
        match build_map(&deposits, &entities) {
            Err(EntityError::Malformed { line: 2, .. }) => {}
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn header_only_files_yield_all_other() {
        let tmp = tempfile::tempdir().unwrap();
        let deposits = tmp.path().join("deposits.csv");
        let entities = tmp.path().join("entities.csv");
        write(&deposits, "validator_index,deposit_address\n");
        write(&entities, "deposit_address,entity_name\n");
        let map = build_map(&deposits, &entities).unwrap();
        assert_eq!(map.entity_of(0), OTHER_ENTITY);
        assert!(map.known_entities().is_empty());
    }

    #[test]
    fn writers_round_trip_through_the_loader() {
        let tmp = tempfile::tempdir().unwrap();
        let deposits = tmp.path().join("deposits.csv");
        let entities = tmp.path().join("entities.csv");
        write_deposits_csv(
            &deposits,
            &[(0, "0x01".into()), (1, "0x01".into()), (2, "0x02".into())],
        )
        .unwrap();
        write_entities_csv(
            &entities,
            &[("0x01".into(), "Pool A".into()), ("0x02".into(), "Pool B".into())],
        )
        .unwrap();
        let map = build_map(&deposits, &entities).unwrap();
        assert_eq!(map.entity_of(0), "Pool A");
        assert_eq!(map.entity_of(2), "Pool B");
        assert_eq!(map.known_entities(), ["Pool A", "Pool B"]);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let tmp = tempfile::tempdir().unwrap();
        let deposits = tmp.path().join("nope.csv");
        let entities = tmp.path().join("entities.csv");
        write(&entities, "deposit_address,entity_name\n");
        assert!(matches!(
            build_map(&deposits, &entities),
            Err(EntityError::Io { .. })
        ));
    }
}
