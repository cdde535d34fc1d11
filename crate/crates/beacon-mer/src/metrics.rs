//! Ledger analytics: duty-compliance series, reward decomposition,
//! proposal statistics, and per-entity aggregates, all computed from stored
//! rows and proposal records.
//!
//! Machine outputs carry raw fractions; rendered reports round percentages
//! to one decimal.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::analyzer::{compute_mer_ratio, ProposalRecord, Store, ValidatorEpochRow};

/// Per-epoch missed-duty fractions across the active validators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissedFlagsPoint {
    pub epoch: u64,
    pub attesters: u64,
    pub missed_source: f64,
    pub missed_target: f64,
    pub missed_head: f64,
}

/// Missed fraction per flag and epoch, in epoch order.
pub fn missed_flags_series(store: &Store) -> Vec<MissedFlagsPoint> {
    let mut out = Vec::new();
    for epoch in store.indexed_epochs() {
        let rows = store.epoch_rows(epoch).expect("indexed epoch has rows");
        let n = rows.len() as u64;
        if n == 0 {
            continue;
        }
        let count = |f: fn(&ValidatorEpochRow) -> bool| {
            rows.iter().filter(|r| f(r)).count() as f64 / n as f64
        };
        out.push(MissedFlagsPoint {
            epoch,
            attesters: n,
            missed_source: count(|r| !r.flag_source),
            missed_target: count(|r| !r.flag_target),
            missed_head: count(|r| !r.flag_head),
        });
    }
    out
}

/// Block production before and after a split epoch, and the relative change
/// in the miss rate across it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissedBlocksComparison {
    pub split_epoch: u64,
    pub before_missed: u64,
    pub before_total: u64,
    pub after_missed: u64,
    pub after_total: u64,
    pub before_ratio: f64,
    pub after_ratio: f64,
    /// `1 - after_ratio / before_ratio`: positive when misses got rarer.
    pub reduction: f64,
}

/// Compares block miss rates for epochs `< split_epoch` against epochs
/// `>= split_epoch`. `None` when either side has no proposal opportunities.
pub fn missed_blocks_compare(store: &Store, split_epoch: u64) -> Option<MissedBlocksComparison> {
    let mut before = (0u64, 0u64);
    let mut after = (0u64, 0u64);
    for p in store.proposals() {
        let side = if p.epoch < split_epoch { &mut before } else { &mut after };
        side.1 += 1;
        if !p.proposed {
            side.0 += 1;
        }
    }
    if before.1 == 0 || after.1 == 0 {
        return None;
    }
    let before_ratio = before.0 as f64 / before.1 as f64;
    let after_ratio = after.0 as f64 / after.1 as f64;
    let reduction = if before_ratio == 0.0 {
        0.0
    } else {
        1.0 - after_ratio / before_ratio
    };
    Some(MissedBlocksComparison {
        split_epoch,
        before_missed: before.0,
        before_total: before.1,
        after_missed: after.0,
        after_total: after.1,
        before_ratio,
        after_ratio,
        reduction,
    })
}

/// Where the positive consensus and execution income came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardDecomposition {
    pub attestation_gwei: u128,
    pub sync_gwei: u128,
    pub proposer_gwei: u128,
    pub el_gwei: u128,
    pub attestation_share: f64,
    pub sync_share: f64,
    pub proposer_share: f64,
    pub el_share: f64,
}

/// Splits total positive rewards into attestation, sync, proposer, and
/// execution-tip components. Penalties and negative sync deltas are not
/// income and are excluded.
pub fn reward_decomposition(store: &Store) -> RewardDecomposition {
    let mut att: u128 = 0;
    let mut sync: u128 = 0;
    let mut proposer: u128 = 0;
    let mut el: u128 = 0;
    for r in store.rows() {
        att += r.att_reward as u128;
        sync += r.sync_reward.max(0) as u128;
        proposer += r.proposer_reward as u128;
        el += r.el_reward as u128;
    }
    let total = att + sync + proposer + el;
    let share = |x: u128| if total == 0 { 0.0 } else { x as f64 / total as f64 };
    RewardDecomposition {
        attestation_gwei: att,
        sync_gwei: sync,
        proposer_gwei: proposer,
        el_gwei: el,
        attestation_share: share(att),
        sync_share: share(sync),
        proposer_share: share(proposer),
        el_share: share(el),
    }
}

/// Histogram bucket: `validators` proposed exactly `blocks` blocks over the
/// indexed range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProposalsBucket {
    pub blocks: u64,
    pub validators: u64,
}

/// Distribution of proposed-block counts per validator, including the zero
/// bucket. Buckets are ordered by block count; the bucket populations sum to
/// the distinct validators seen in rows, and the weighted sum equals the
/// blocks actually proposed.
pub fn proposals_frequency(store: &Store) -> Vec<ProposalsBucket> {
    let mut per_validator: BTreeMap<u64, u64> = BTreeMap::new();
    for r in store.rows() {
        *per_validator.entry(r.validator_index).or_insert(0) += r.proposed as u64;
    }
    let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
    for &count in per_validator.values() {
        *hist.entry(count).or_insert(0) += 1;
    }
    hist.into_iter()
        .map(|(blocks, validators)| ProposalsBucket { blocks, validators })
        .collect()
}

/// Consecutive-proposal statistics for one entity. A streak is a maximal run
/// of two or more consecutive slots whose blocks were all proposed by this
/// entity; a missed block breaks any run through it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntityStreaks {
    pub entity: String,
    pub longest_run: u64,
    pub runs: u64,
    /// Slots covered by counted runs, cumulatively.
    pub streak_slots: u64,
}

/// Builds the validator-to-entity view the rows already carry.
fn entity_of_validator(store: &Store) -> BTreeMap<u64, String> {
    let mut map = BTreeMap::new();
    for r in store.rows() {
        map.entry(r.validator_index).or_insert_with(|| r.entity.clone());
    }
    map
}

/// Finds proposal streaks per entity across the slot-ordered proposal
/// records.
pub fn entity_streaks(store: &Store) -> Vec<EntityStreaks> {
    let attribution = entity_of_validator(store);
    let proposals: Vec<&ProposalRecord> = store.proposals().collect();
    let mut stats: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();

    let mut run_entity: Option<String> = None;
    let mut run_len: u64 = 0;
    let flush = |entity: &Option<String>, len: u64, stats: &mut BTreeMap<String, (u64, u64, u64)>| {
        if let Some(name) = entity {
            if len >= 2 {
                let entry = stats.entry(name.clone()).or_insert((0, 0, 0));
                entry.0 = entry.0.max(len);
                entry.1 += 1;
                entry.2 += len;
            }
        }
    };

    let mut expected_slot: Option<u64> = None;
    for p in proposals {
        let contiguous = expected_slot.is_none_or(|s| p.slot == s);
        expected_slot = Some(p.slot + 1);
        let entity = attribution.get(&p.proposer_index).cloned();
        if !p.proposed || entity.is_none() {
            flush(&run_entity, run_len, &mut stats);
            run_entity = None;
            run_len = 0;
            continue;
        }
        // A slot gap ends the current run but this proposal starts the next.
        if contiguous && run_entity == entity {
            run_len += 1;
        } else {
            flush(&run_entity, run_len, &mut stats);
            run_entity = entity;
            run_len = 1;
        }
    }
    flush(&run_entity, run_len, &mut stats);

    stats
        .into_iter()
        .map(|(entity, (longest_run, runs, streak_slots))| EntityStreaks {
            entity,
            longest_run,
            runs,
            streak_slots,
        })
        .collect()
}

/// Attained-over-attainable reward ratio for one entity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityMer {
    pub entity: String,
    pub validators: u64,
    pub ratio: f64,
}

/// Reward ratio per entity, ordered by name. Entities with no indexed
/// validators do not appear.
pub fn mer_per_entity(store: &Store) -> Vec<EntityMer> {
    let mut grouped: BTreeMap<&str, Vec<&ValidatorEpochRow>> = BTreeMap::new();
    for r in store.rows() {
        grouped.entry(r.entity.as_str()).or_default().push(r);
    }
    grouped
        .into_iter()
        .filter_map(|(entity, rows)| {
            let validators = rows
                .iter()
                .map(|r| r.validator_index)
                .collect::<std::collections::BTreeSet<_>>()
                .len() as u64;
            compute_mer_ratio(rows).map(|ratio| EntityMer {
                entity: entity.to_string(),
                validators,
                ratio,
            })
        })
        .collect()
}

/// One entity's share of the blocks actually proposed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityBlockShare {
    pub entity: String,
    pub proposed: u64,
    pub share: f64,
}

/// Proposed-block share per entity, ordered by name, with unattributed
/// validators under their explicit fallback bucket.
pub fn block_share_per_entity(store: &Store) -> Vec<EntityBlockShare> {
    let mut per_entity: BTreeMap<String, u64> = BTreeMap::new();
    let mut total: u64 = 0;
    for r in store.rows() {
        if r.proposed > 0 {
            *per_entity.entry(r.entity.clone()).or_insert(0) += r.proposed as u64;
            total += r.proposed as u64;
        }
    }
    per_entity
        .into_iter()
        .map(|(entity, proposed)| EntityBlockShare {
            entity,
            proposed,
            share: if total == 0 { 0.0 } else { proposed as f64 / total as f64 },
        })
        .collect()
}

/// Everything the reporting layer derives from one store.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsBundle {
    pub epochs: Vec<u64>,
    pub overall_mer: Option<f64>,
    pub missed_flags: Vec<MissedFlagsPoint>,
    pub decomposition: RewardDecomposition,
    pub blocks_comparison: Option<MissedBlocksComparison>,
    pub proposals_histogram: Vec<ProposalsBucket>,
    pub entity_mer: Vec<EntityMer>,
    pub entity_blocks: Vec<EntityBlockShare>,
    pub entity_streaks: Vec<EntityStreaks>,
}

/// Computes the full bundle; `split_epoch` enables the block-rate
/// comparison.
pub fn compute_all(store: &Store, split_epoch: Option<u64>) -> MetricsBundle {
    MetricsBundle {
        epochs: store.indexed_epochs(),
        overall_mer: compute_mer_ratio(store.rows()),
        missed_flags: missed_flags_series(store),
        decomposition: reward_decomposition(store),
        blocks_comparison: split_epoch.and_then(|s| missed_blocks_compare(store, s)),
        proposals_histogram: proposals_frequency(store),
        entity_mer: mer_per_entity(store),
        entity_blocks: block_share_per_entity(store),
        entity_streaks: entity_streaks(store),
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

/// Renders the human-readable report. Deterministic: same bundle, same
/// text.
pub fn summary_text(m: &MetricsBundle) -> String {
    let mut s = String::new();
    let epochs = match (m.epochs.first(), m.epochs.last()) {
        (Some(a), Some(b)) => format!("epochs {a}..={b}"),
        _ => "no epochs".to_string(),
    };
    s.push_str(&format!("Reward ledger report ({epochs})\n"));
    s.push_str(&format!("{}\n\n", "=".repeat(s.len() - 1)));

    match m.overall_mer {
        Some(r) => s.push_str(&format!("Overall reward ratio: {}\n", pct(r))),
        None => s.push_str("Overall reward ratio: n/a (no attainable rewards)\n"),
    }

    if !m.missed_flags.is_empty() {
        let avg = |f: fn(&MissedFlagsPoint) -> f64| {
            m.missed_flags.iter().map(f).sum::<f64>() / m.missed_flags.len() as f64
        };
        s.push_str(&format!(
            "Missed duties (mean per epoch): source {}, target {}, head {}\n",
            pct(avg(|p| p.missed_source)),
            pct(avg(|p| p.missed_target)),
            pct(avg(|p| p.missed_head)),
        ));
    }

    let d = &m.decomposition;
    s.push_str(&format!(
        "Reward mix: attestation {}, sync {}, proposer {}, execution tips {}\n",
        pct(d.attestation_share),
        pct(d.sync_share),
        pct(d.proposer_share),
        pct(d.el_share),
    ));

    if let Some(b) = &m.blocks_comparison {
        s.push_str(&format!(
            "Missed blocks around epoch {}: {} before ({}/{}), {} after ({}/{}), change {}\n",
            b.split_epoch,
            pct(b.before_ratio),
            b.before_missed,
            b.before_total,
            pct(b.after_ratio),
            b.after_missed,
            b.after_total,
            pct(b.reduction),
        ));
    }

    if !m.proposals_histogram.is_empty() {
        s.push_str("Blocks proposed per validator:\n");
        for bucket in &m.proposals_histogram {
            s.push_str(&format!(
                "  {} block(s): {} validator(s)\n",
                bucket.blocks, bucket.validators
            ));
        }
    }

    if !m.entity_mer.is_empty() {
        s.push_str("Reward ratio per entity:\n");
        for e in &m.entity_mer {
            s.push_str(&format!(
                "  {}: {} ({} validators)\n",
                e.entity,
                pct(e.ratio),
                e.validators
            ));
        }
    }

    if !m.entity_blocks.is_empty() {
        s.push_str("Block share per entity:\n");
        for e in &m.entity_blocks {
            s.push_str(&format!(
                "  {}: {} ({} blocks)\n",
                e.entity,
                pct(e.share),
                e.proposed
            ));
        }
    }

    if !m.entity_streaks.is_empty() {
        s.push_str("Consecutive-proposal streaks (runs of 2+ slots):\n");
        for e in &m.entity_streaks {
            s.push_str(&format!(
                "  {}: longest {}, {} runs, {} slots total\n",
                e.entity, e.longest_run, e.runs, e.streak_slots
            ));
        }
    }
    s
}

/// CSV of the missed-duty series, one row per epoch, raw fractions.
pub fn missed_flags_csv(points: &[MissedFlagsPoint]) -> String {
    let mut s = String::from("epoch,attesters,missed_source,missed_target,missed_head\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            p.epoch, p.attesters, p.missed_source, p.missed_target, p.missed_head
        ));
    }
    s
}

/// CSV of the reward mix, one row per component, raw fractions.
pub fn decomposition_csv(d: &RewardDecomposition) -> String {
    format!(
        "component,gwei,share\nattestation,{},{}\nsync,{},{}\nproposer,{},{}\nel,{},{}\n",
        d.attestation_gwei,
        d.attestation_share,
        d.sync_gwei,
        d.sync_share,
        d.proposer_gwei,
        d.proposer_share,
        d.el_gwei,
        d.el_share,
    )
}

/// CSV of the block-rate split, a single data row.
pub fn blocks_comparison_csv(c: &MissedBlocksComparison) -> String {
    format!(
        "split_epoch,before_missed,before_total,after_missed,after_total,before_ratio,after_ratio,reduction\n{},{},{},{},{},{},{},{}\n",
        c.split_epoch,
        c.before_missed,
        c.before_total,
        c.after_missed,
        c.after_total,
        c.before_ratio,
        c.after_ratio,
        c.reduction,
    )
}

/// CSV of the proposal histogram, one row per bucket.
pub fn proposals_histogram_csv(buckets: &[ProposalsBucket]) -> String {
    let mut s = String::from("blocks,validators\n");
    for b in buckets {
        s.push_str(&format!("{},{}\n", b.blocks, b.validators));
    }
    s
}

/// CSV of per-entity reward ratios, one row per entity, raw fractions.
pub fn entity_mer_csv(entries: &[EntityMer]) -> String {
    let mut s = String::from("entity,validators,ratio\n");
    for e in entries {
        s.push_str(&format!("{},{},{}\n", e.entity, e.validators, e.ratio));
    }
    s
}

/// CSV of per-entity block shares, one row per entity, raw fractions.
pub fn entity_blocks_csv(entries: &[EntityBlockShare]) -> String {
    let mut s = String::from("entity,proposed,share\n");
    for e in entries {
        s.push_str(&format!("{},{},{}\n", e.entity, e.proposed, e.share));
    }
    s
}

/// CSV of per-entity streak statistics, one row per entity.
pub fn entity_streaks_csv(entries: &[EntityStreaks]) -> String {
    let mut s = String::from("entity,longest_run,runs,streak_slots\n");
    for e in entries {
        s.push_str(&format!(
            "{},{},{},{}\n",
            e.entity, e.longest_run, e.runs, e.streak_slots
        ));
    }
    s
}

/// Metric names accepted by report selection.
pub const METRIC_NAMES: [&str; 7] = [
    "missed_flags",
    "decomposition",
    "blocks_comparison",
    "proposals_histogram",
    "entity_mer",
    "entity_blocks",
    "entity_streaks",
];

/// Writes the summary plus, for each selected metric, a CSV table and a
/// plot-ready JSON file into `dir`. An empty selection means every metric.
/// Returns the paths written, in a deterministic order.
pub fn export_reports(
    dir: &std::path::Path,
    bundle: &MetricsBundle,
    selection: &[String],
) -> std::io::Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let selected =
        |name: &str| selection.is_empty() || selection.iter().any(|s| s == name || s == "all");
    let mut written = Vec::new();
    let mut emit = |name: &str, csv: String, json: serde_json::Value| -> std::io::Result<()> {
        let csv_path = dir.join(format!("{name}.csv"));
        std::fs::write(&csv_path, csv)?;
        written.push(csv_path);
        let json_path = dir.join(format!("{name}.json"));
        let mut body = serde_json::to_vec_pretty(&json).expect("metric serializes");
        body.push(b'\n');
        std::fs::write(&json_path, body)?;
        written.push(json_path);
        Ok(())
    };

    if selected("missed_flags") {
        emit(
            "missed_flags",
            missed_flags_csv(&bundle.missed_flags),
            serde_json::to_value(&bundle.missed_flags).expect("serializes"),
        )?;
    }
    if selected("decomposition") {
        emit(
            "decomposition",
            decomposition_csv(&bundle.decomposition),
            serde_json::to_value(&bundle.decomposition).expect("serializes"),
        )?;
    }
    if selected("blocks_comparison") {
        if let Some(c) = &bundle.blocks_comparison {
            emit(
                "blocks_comparison",
                blocks_comparison_csv(c),
                serde_json::to_value(c).expect("serializes"),
            )?;
        }
    }
    if selected("proposals_histogram") {
        emit(
            "proposals_histogram",
            proposals_histogram_csv(&bundle.proposals_histogram),
            serde_json::to_value(&bundle.proposals_histogram).expect("serializes"),
        )?;
    }
    if selected("entity_mer") {
        emit(
            "entity_mer",
            entity_mer_csv(&bundle.entity_mer),
            serde_json::to_value(&bundle.entity_mer).expect("serializes"),
        )?;
    }
    if selected("entity_blocks") {
        emit(
            "entity_blocks",
            entity_blocks_csv(&bundle.entity_blocks),
            serde_json::to_value(&bundle.entity_blocks).expect("serializes"),
        )?;
    }
    if selected("entity_streaks") {
        emit(
            "entity_streaks",
            entity_streaks_csv(&bundle.entity_streaks),
            serde_json::to_value(&bundle.entity_streaks).expect("serializes"),
        )?;
    }

    let summary_path = dir.join("summary.txt");
    std::fs::write(&summary_path, summary_text(bundle))?;
    written.push(summary_path);

    let bundle_path = dir.join("metrics.json");
    let mut body = serde_json::to_vec_pretty(bundle).expect("bundle serializes");
    body.push(b'\n');
    std::fs::write(&bundle_path, body)?;
    written.push(bundle_path);
    Ok(written)
}
