//! Deterministic, seeded desk-scale chain simulator.
//!
//! The simulator advances slot by slot and emits one
//! [`BeaconStateSnapshot`] per slot. Proposer and sync rewards are applied at
//! slot transitions; attestation rewards for epoch `e` are applied at the
//! transition into epoch `e + 2`, once `e`'s inclusion window has closed.
//!
//! Randomness comes from one 64-bit seed expanded through domain-separated
//! ChaCha8 streams (committee shuffle, proposer draw, sync committee,
//! per-slot events, per-epoch availability), so equal configs produce
//! byte-identical snapshot streams and any epoch can be re-derived without
//! replaying unrelated draws.

use std::collections::VecDeque;
use std::mem;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::{
    self, FlagSet, Gwei, RewardError, WeightParams,
};
use crate::snapshot::{
    BeaconStateSnapshot, EpochMeta, IncludedVote, SlashingRecord, SlotMeta,
};

/// Errors from simulation setup and stepping.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("epoch {epoch} has {active} active validators, below the minimum {min}")]
    TooFewActive { epoch: u64, active: usize, min: usize },
    #[error("slashing event at slot {slot} targets unknown validator {validator}")]
    UnknownSlashingTarget { slot: u64, validator: u64 },
    #[error("simulation ended at slot {end}; cannot step to slot {requested}")]
    PastEnd { end: u64, requested: u64 },
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Epoch-bounded fault override: raises (or lowers) the block-miss rate
/// and/or knocks a fraction of validators fully offline for the covered
/// epochs. Later windows win where windows overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultWindow {
    pub first_epoch: u64,
    pub last_epoch: u64,
    #[serde(default)]
    pub p_missed_block: Option<f64>,
    #[serde(default)]
    pub p_offline: Option<f64>,
}

impl FaultWindow {
    fn covers(&self, epoch: u64) -> bool {
        self.first_epoch <= epoch && epoch <= self.last_epoch
    }
}

/// Validator-index-range fault override: per-duty miss probabilities for a
/// contiguous slice of the registry (e.g. one staking entity). Later groups
/// win where groups overlap, and groups take precedence over windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultGroup {
    pub first_index: u64,
    pub last_index: u64,
    #[serde(default)]
    pub p_missed_source: Option<f64>,
    #[serde(default)]
    pub p_missed_target: Option<f64>,
    #[serde(default)]
    pub p_missed_head: Option<f64>,
    #[serde(default)]
    pub p_sync_miss: Option<f64>,
    #[serde(default)]
    pub p_offline: Option<f64>,
}

impl FaultGroup {
    fn covers(&self, index: u64) -> bool {
        self.first_index <= index && index <= self.last_index
    }
}

/// Injected slashing: `validator` is slashed by the first block at or after
/// `slot`. The whistleblower share goes to `whistleblower` when given (and
/// valid), otherwise to the including proposer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlashingEvent {
    pub slot: u64,
    pub validator: u64,
    #[serde(default)]
    pub whistleblower: Option<u64>,
}

/// Synthetic staking entity: `share` of the initial registry, as a contiguous
/// index range, all depositing from one shared address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityShare {
    pub name: String,
    pub share: f64,
}

/// Uniform per-block tip range in Gwei, inclusive on both ends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TipRange {
    pub min: Gwei,
    pub max: Gwei,
}

impl TipRange {
    pub fn new(min: Gwei, max: Gwei) -> Self {
        TipRange { min, max }
    }
}

/// Full simulation scenario: registry size and duration, global fault rates,
/// scheduled fault overrides, injected slashings, synthetic entities, and the
/// execution-layer tip range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub validator_count: usize,
    pub epochs: u64,
    pub p_missed_block: f64,
    pub p_missed_source: f64,
    pub p_missed_target: f64,
    pub p_missed_head: f64,
    pub p_sync_miss: f64,
    /// Fraction of the initial registry added per epoch boundary.
    pub growth_per_epoch: f64,
    /// Synthetic execution-layer tip drawn uniformly per proposed block.
    pub el_tip_distribution: TipRange,
    pub fault_windows: Vec<FaultWindow>,
    pub fault_groups: Vec<FaultGroup>,
    pub slashings: Vec<SlashingEvent>,
    pub entities: Vec<EntityShare>,
    /// Use attesting-balance-scaled attestation penalties instead of flat
    /// ones. Must match the analyzer's setting for reconciliation.
    pub scaled_penalties: bool,
    /// Recompute effective balances at epoch boundaries (hysteresis-style)
    /// instead of keeping them pinned at the cap.
    pub recompute_effective_balances: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 42,
            validator_count: 64,
            epochs: 8,
            p_missed_block: 0.0,
            p_missed_source: 0.0,
            p_missed_target: 0.0,
            p_missed_head: 0.0,
            p_sync_miss: 0.0,
            growth_per_epoch: 0.0,
            el_tip_distribution: TipRange::default(),
            fault_windows: Vec::new(),
            fault_groups: Vec::new(),
            slashings: Vec::new(),
            entities: Vec::new(),
            scaled_penalties: false,
            recompute_effective_balances: false,
        }
    }
}

/// Minimum registry size: one validator per slot of an epoch, doubled so the
/// smallest committees stay non-degenerate.
pub const MIN_VALIDATORS: usize = 64;

impl SimConfig {
    /// Validates ranges and probabilities; all probabilities must be in
    /// [0, 1], the registry must meet [`MIN_VALIDATORS`], and the tip range
    /// must be ordered.
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |msg: String| Err(SimError::InvalidConfig(msg));
        if self.validator_count < MIN_VALIDATORS {
            return err(format!(
                "validator_count {} is below the minimum {MIN_VALIDATORS}",
                self.validator_count
            ));
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        let mut probs: Vec<(&str, f64)> = vec![
            ("p_missed_block", self.p_missed_block),
            ("p_missed_source", self.p_missed_source),
            ("p_missed_target", self.p_missed_target),
            ("p_missed_head", self.p_missed_head),
            ("p_sync_miss", self.p_sync_miss),
        ];
        for w in &self.fault_windows {
            if w.first_epoch > w.last_epoch {
                return err(format!(
                    "fault window epochs {}..{} are reversed",
                    w.first_epoch, w.last_epoch
                ));
            }
            if let Some(p) = w.p_missed_block {
                probs.push(("fault_windows.p_missed_block", p));
            }
            if let Some(p) = w.p_offline {
                probs.push(("fault_windows.p_offline", p));
            }
        }
        for g in &self.fault_groups {
            if g.first_index > g.last_index {
                return err(format!(
                    "fault group indices {}..{} are reversed",
                    g.first_index, g.last_index
                ));
            }
            for (name, p) in [
                ("fault_groups.p_missed_source", g.p_missed_source),
                ("fault_groups.p_missed_target", g.p_missed_target),
                ("fault_groups.p_missed_head", g.p_missed_head),
                ("fault_groups.p_sync_miss", g.p_sync_miss),
                ("fault_groups.p_offline", g.p_offline),
            ] {
                if let Some(p) = p {
                    probs.push((name, p));
                }
            }
        }
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return err(format!("{name} = {p} is not a probability in [0, 1]"));
            }
        }
        if !self.growth_per_epoch.is_finite() || self.growth_per_epoch < 0.0 {
            return err(format!(
                "growth_per_epoch = {} must be a non-negative finite fraction",
                self.growth_per_epoch
            ));
        }
        if self.el_tip_distribution.min > self.el_tip_distribution.max {
            return err(format!(
                "el_tip_distribution min {} exceeds max {}",
                self.el_tip_distribution.min, self.el_tip_distribution.max
            ));
        }
        let mut share_sum = 0.0;
        for e in &self.entities {
            if e.name.is_empty() {
                return err("entity share with empty name".into());
            }
            if !(0.0..=1.0).contains(&e.share) || e.share.is_nan() {
                return err(format!("entity {} share {} is not in [0, 1]", e.name, e.share));
            }
            share_sum += e.share;
        }
        if share_sum > 1.0 + 1e-9 {
            return err(format!("entity shares sum to {share_sum}, above 1"));
        }
        Ok(())
    }

    /// Total slots the run covers: `epochs * slots_per_epoch`.
    pub fn total_slots(&self, params: &WeightParams) -> u64 {
        self.epochs * params.slots_per_epoch
    }
}

/// Duty assignments of one epoch: the committee partition (one committee per
/// slot), the proposer per slot, and the sync committee valid for the epoch's
/// period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochAssignments {
    pub epoch: u64,
    /// One committee of validator indices per slot; committees partition the
    /// active set.
    pub committees: Vec<Vec<u64>>,
    /// One proposer per slot, drawn uniformly from the active set.
    pub proposers: Vec<u64>,
    /// Sync committee in member order, fixed within a period.
    pub sync_committee: Vec<u64>,
}

const DOMAIN_COMMITTEE: u32 = 1;
const DOMAIN_PROPOSER: u32 = 2;
const DOMAIN_SYNC: u32 = 3;
const DOMAIN_SLOT: u32 = 4;
const DOMAIN_AVAILABILITY: u32 = 5;

/// ChaCha8 stream for one (seed, domain, index) triple. The 32-byte key
/// packs the three values little-endian and zero-pads the rest.
fn domain_rng(seed: u64, domain: u32, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&domain.to_le_bytes());
    key[12..20].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Draws the sync committee for one period: a uniform sample without
/// replacement of `min(sync_committee_size, active)` members, in draw order.
pub fn draw_sync_committee(
    seed: u64,
    period: u64,
    active: &[u64],
    params: &WeightParams,
) -> Vec<u64> {
    let mut rng = domain_rng(seed, DOMAIN_SYNC, period);
    let mut pool: Vec<u64> = active.to_vec();
    pool.shuffle(&mut rng);
    pool.truncate(params.sync_committee_size.min(pool.len() as u64) as usize);
    pool
}

/// Deterministic duty assignment for one epoch: shuffles the active set into
/// a partition of `slots_per_epoch` committees (sizes differing by at most
/// one) and draws one proposer per slot uniformly with replacement.
pub fn assign_epoch(
    epoch: u64,
    active: &[u64],
    sync_committee: &[u64],
    seed: u64,
    params: &WeightParams,
) -> Result<EpochAssignments, SimError> {
    let slots = params.slots_per_epoch as usize;
    if active.len() < slots {
        return Err(SimError::TooFewActive {
            epoch,
            active: active.len(),
            min: slots,
        });
    }
    let mut shuffled: Vec<u64> = active.to_vec();
    shuffled.shuffle(&mut domain_rng(seed, DOMAIN_COMMITTEE, epoch));

    // First (len % slots) committees take one extra member.
    let base = shuffled.len() / slots;
    let extra = shuffled.len() % slots;
    let mut committees = Vec::with_capacity(slots);
    let mut cursor = 0;
    for i in 0..slots {
        let size = base + usize::from(i < extra);
        committees.push(shuffled[cursor..cursor + size].to_vec());
        cursor += size;
    }

    let mut rng = domain_rng(seed, DOMAIN_PROPOSER, epoch);
    let proposers = (0..slots)
        .map(|_| active[rng.gen_range(0..active.len())])
        .collect();

    Ok(EpochAssignments {
        epoch,
        committees,
        proposers,
        sync_committee: sync_committee.to_vec(),
    })
}

/// Shared deposit address of synthetic entity `k` (as ordered in
/// `SimConfig::entities`).
pub fn entity_deposit_address(k: usize) -> String {
    format!("0x{:040x}", k as u64 + 1)
}

/// Unique deposit address of a validator outside every synthetic entity.
pub fn solo_deposit_address(index: usize) -> String {
    format!("0x{:040x}", 0x1_0000_0000_u64 + index as u64)
}

#[derive(Debug, Clone)]
struct Validator {
    balance: Gwei,
    effective_balance: Gwei,
    exit_epoch: Option<u64>,
    slashed: bool,
    deposit_address: String,
}

/// Frozen per-epoch context: who was active, at what effective balance, and
/// the sync amounts derived from the total. Captured at the epoch boundary;
/// nothing in it changes mid-epoch.
#[derive(Debug, Clone)]
struct EpochContext {
    epoch: u64,
    active: Vec<bool>,
    effective_balances: Vec<Gwei>,
    total_active_balance: Gwei,
    participant_reward: Gwei,
}

impl EpochContext {
    fn base_reward(&self, validator: usize, params: &WeightParams) -> Result<Gwei, RewardError> {
        rewards::base_reward(
            self.effective_balances[validator],
            self.total_active_balance,
            params,
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingVote {
    slot: u64,
    attester: u64,
    flags: FlagSet,
}

#[derive(Debug, Clone, Default)]
struct LastSlot {
    block_proposed: bool,
    proposer_index: u64,
    el_tips: Gwei,
    sync_bits: String,
}

/// The simulator: owns the registry and advances one slot per [`step`] call.
///
/// [`step`]: Simulator::step
#[derive(Debug)]
pub struct Simulator {
    params: WeightParams,
    cfg: SimConfig,
    slot: u64,
    end_slot: u64,
    registry: Vec<Validator>,
    initial_count: usize,
    growth_acc: f64,
    cur_flags: Vec<FlagSet>,
    prev_flags: Vec<FlagSet>,
    pending_votes: Vec<PendingVote>,
    contexts: VecDeque<EpochContext>,
    assignments: EpochAssignments,
    sync_committee: Vec<u64>,
    offline: Vec<bool>,
    meta: EpochMeta,
    last_slot: LastSlot,
    slash_queue: Vec<SlashingEvent>,
    slash_cursor: usize,
}

impl Simulator {
    pub fn new(cfg: SimConfig, params: WeightParams) -> Result<Self, SimError> {
        cfg.validate()?;
        params.validate()?;

        let mut registry = Vec::with_capacity(cfg.validator_count);
        let mut entity_bounds = Vec::new();
        let mut start = 0usize;
        for share in &cfg.entities {
            let count = (share.share * cfg.validator_count as f64).floor() as usize;
            entity_bounds.push((start, start + count));
            start += count;
        }
        for i in 0..cfg.validator_count {
            let deposit_address = entity_bounds
                .iter()
                .position(|&(lo, hi)| lo <= i && i < hi)
                .map(entity_deposit_address)
                .unwrap_or_else(|| solo_deposit_address(i));
            registry.push(Validator {
                balance: params.max_effective_balance,
                effective_balance: params.max_effective_balance,
                exit_epoch: None,
                slashed: false,
                deposit_address,
            });
        }

        let mut slash_queue = cfg.slashings.clone();
        slash_queue.sort_by_key(|ev| (ev.slot, ev.validator));

        let end_slot = cfg.total_slots(&params);
        Ok(Simulator {
            params,
            initial_count: cfg.validator_count,
            cfg,
            slot: 0,
            end_slot,
            registry,
            growth_acc: 0.0,
            cur_flags: Vec::new(),
            prev_flags: Vec::new(),
            pending_votes: Vec::new(),
            contexts: VecDeque::new(),
            assignments: EpochAssignments {
                epoch: 0,
                committees: Vec::new(),
                proposers: Vec::new(),
                sync_committee: Vec::new(),
            },
            sync_committee: Vec::new(),
            offline: Vec::new(),
            meta: EpochMeta { epoch: 0, sync_committee: Vec::new(), slots: Vec::new() },
            last_slot: LastSlot::default(),
            slash_queue,
            slash_cursor: 0,
        })
    }

    /// Slot the next [`step`](Simulator::step) will simulate.
    pub fn next_slot(&self) -> u64 {
        self.slot
    }

    /// Last slot of the configured run.
    pub fn last_run_slot(&self) -> u64 {
        self.end_slot - 1
    }

    /// Duty assignments of the epoch currently being simulated.
    pub fn current_assignments(&self) -> &EpochAssignments {
        &self.assignments
    }

    /// `(validator_index, deposit_address)` for every validator registered so
    /// far, in index order.
    pub fn deposit_rows(&self) -> Vec<(u64, String)> {
        self.registry
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u64, v.deposit_address.clone()))
            .collect()
    }

    /// `(deposit_address, entity_name)` for the configured synthetic
    /// entities.
    pub fn entity_rows(&self) -> Vec<(String, String)> {
        self.cfg
            .entities
            .iter()
            .enumerate()
            .map(|(k, share)| (entity_deposit_address(k), share.name.clone()))
            .collect()
    }

    /// Simulates the next slot and returns its snapshot. Errors once the
    /// configured run is exhausted.
    pub fn step(&mut self) -> Result<BeaconStateSnapshot, SimError> {
        if self.slot >= self.end_slot {
            return Err(SimError::PastEnd { end: self.end_slot, requested: self.slot });
        }
        let slot = self.slot;
        let epoch = slot / self.params.slots_per_epoch;
        if slot.is_multiple_of(self.params.slots_per_epoch) {
            self.begin_epoch(epoch)?;
        }
        self.execute_slot(slot, epoch)?;
        self.slot += 1;
        Ok(self.render_snapshot(slot))
    }

    /// Iterator over the remaining snapshots of the run.
    pub fn snapshots(&mut self) -> impl Iterator<Item = Result<BeaconStateSnapshot, SimError>> + '_ {
        std::iter::from_fn(move || {
            if self.slot >= self.end_slot {
                None
            } else {
                Some(self.step())
            }
        })
    }

    fn context(&self, epoch: u64) -> &EpochContext {
        self.contexts
            .iter()
            .find(|c| c.epoch == epoch)
            .expect("epoch context retained for the settlement window")
    }

    fn begin_epoch(&mut self, epoch: u64) -> Result<(), SimError> {
        if epoch > 0 {
            // Settle attestation duties of epoch - 2: its inclusion window
            // closed with the epoch that just ended.
            if epoch >= 2 {
                self.settle_attestations(epoch - 2)?;
            }
            let len = self.registry.len();
            self.prev_flags = mem::replace(&mut self.cur_flags, vec![FlagSet::none(); len]);

            if self.cfg.recompute_effective_balances {
                self.recompute_effective_balances();
            }
            self.grow_registry();
            // Validators joining this epoch get empty trackers in both
            // epochs so every per-validator vector keeps a uniform length.
            self.cur_flags.resize(self.registry.len(), FlagSet::none());
            self.prev_flags.resize(self.registry.len(), FlagSet::none());
        } else {
            self.cur_flags = vec![FlagSet::none(); self.registry.len()];
            self.prev_flags = vec![FlagSet::none(); self.registry.len()];
        }

        // Freeze the epoch context. Active means not yet exited.
        let active: Vec<bool> = self
            .registry
            .iter()
            .map(|v| v.exit_epoch.is_none_or(|exit| epoch < exit))
            .collect();
        let effective_balances: Vec<Gwei> =
            self.registry.iter().map(|v| v.effective_balance).collect();
        let total_active_balance: Gwei = self
            .registry
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(v, _)| v.effective_balance)
            .sum();
        if total_active_balance == 0 {
            return Err(RewardError::ZeroTotalActiveBalance.into());
        }
        let sum_base = rewards::epoch_base_reward_sum(total_active_balance, &self.params)?;
        let participant_reward = rewards::sync_participant_reward(
            rewards::sync_total_reward(sum_base, &self.params)?,
            &self.params,
        )?;
        let active_indices: Vec<u64> = active
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(i, _)| i as u64)
            .collect();

        self.contexts.push_back(EpochContext {
            epoch,
            active,
            effective_balances,
            total_active_balance,
            participant_reward,
        });
        while self.contexts.len() > 3 {
            self.contexts.pop_front();
        }

        if epoch.is_multiple_of(self.params.epochs_per_sync_period) {
            let period = epoch / self.params.epochs_per_sync_period;
            self.sync_committee =
                draw_sync_committee(self.cfg.seed, period, &active_indices, &self.params);
        }

        self.sample_availability(epoch);

        self.assignments = assign_epoch(
            epoch,
            &active_indices,
            &self.sync_committee,
            self.cfg.seed,
            &self.params,
        )?;
        self.meta = EpochMeta {
            epoch,
            sync_committee: self.sync_committee.clone(),
            slots: Vec::new(),
        };
        Ok(())
    }

    /// Applies attestation rewards and penalties for `epoch`, whose flags sit
    /// in `prev_flags` when this runs (at the transition into `epoch + 2`).
    fn settle_attestations(&mut self, epoch: u64) -> Result<(), SimError> {
        let ctx = self.context(epoch).clone();
        let balances = attesting_balances(&ctx, &self.prev_flags);
        for v in 0..ctx.active.len() {
            if !ctx.active[v] {
                continue;
            }
            let flags = self.prev_flags[v];
            let base = ctx.base_reward(v, &self.params)?;
            let reward = rewards::attestation_reward(flags, base, &balances, &self.params)?;
            let penalty = if self.cfg.scaled_penalties {
                rewards::attestation_penalty_scaled(flags.missed(), base, &balances, &self.params)?
            } else {
                rewards::attestation_penalty(flags.missed(), base, &self.params)?
            };
            self.increase(v, reward);
            self.decrease(v, penalty);
        }
        Ok(())
    }

    fn recompute_effective_balances(&mut self) {
        let inc = self.params.effective_balance_increment;
        let cap = self.params.max_effective_balance;
        for v in &mut self.registry {
            let rounded = (v.balance - v.balance % inc).min(cap);
            // Hysteresis: only move once the rounded balance is a full
            // increment away from the recorded effective balance.
            if rounded + inc <= v.effective_balance || rounded >= v.effective_balance + inc {
                v.effective_balance = rounded;
            }
        }
    }

    fn grow_registry(&mut self) {
        self.growth_acc += self.cfg.growth_per_epoch * self.initial_count as f64;
        while self.growth_acc >= 1.0 {
            let index = self.registry.len();
            self.registry.push(Validator {
                balance: self.params.max_effective_balance,
                effective_balance: self.params.max_effective_balance,
                exit_epoch: None,
                slashed: false,
                deposit_address: solo_deposit_address(index),
            });
            self.growth_acc -= 1.0;
        }
    }

    /// Samples which validators are fully offline this epoch (no votes, no
    /// sync duty). Drawn from the availability domain so slot-level draws
    /// stay aligned regardless of window placement.
    fn sample_availability(&mut self, epoch: u64) {
        let mut rng = domain_rng(self.cfg.seed, DOMAIN_AVAILABILITY, epoch);
        self.offline = (0..self.registry.len())
            .map(|v| {
                let p = self.offline_p(v as u64, epoch);
                p > 0.0 && rng.gen_bool(p)
            })
            .collect();
    }

    fn offline_p(&self, validator: u64, epoch: u64) -> f64 {
        let mut p = 0.0;
        for w in &self.cfg.fault_windows {
            if w.covers(epoch) {
                if let Some(q) = w.p_offline {
                    p = q;
                }
            }
        }
        for g in &self.cfg.fault_groups {
            if g.covers(validator) {
                if let Some(q) = g.p_offline {
                    p = q;
                }
            }
        }
        p
    }

    fn block_miss_p(&self, epoch: u64) -> f64 {
        let mut p = self.cfg.p_missed_block;
        for w in &self.cfg.fault_windows {
            if w.covers(epoch) {
                if let Some(q) = w.p_missed_block {
                    p = q;
                }
            }
        }
        p
    }

    fn flag_miss_p(&self, validator: u64) -> (f64, f64, f64) {
        let mut p = (
            self.cfg.p_missed_source,
            self.cfg.p_missed_target,
            self.cfg.p_missed_head,
        );
        for g in &self.cfg.fault_groups {
            if g.covers(validator) {
                if let Some(q) = g.p_missed_source {
                    p.0 = q;
                }
                if let Some(q) = g.p_missed_target {
                    p.1 = q;
                }
                if let Some(q) = g.p_missed_head {
                    p.2 = q;
                }
            }
        }
        p
    }

    fn sync_miss_p(&self, validator: u64) -> f64 {
        let mut p = self.cfg.p_sync_miss;
        for g in &self.cfg.fault_groups {
            if g.covers(validator) {
                if let Some(q) = g.p_sync_miss {
                    p = q;
                }
            }
        }
        p
    }

    fn execute_slot(&mut self, slot: u64, epoch: u64) -> Result<(), SimError> {
        let mut rng = domain_rng(self.cfg.seed, DOMAIN_SLOT, slot);
        let slot_in_epoch = (slot % self.params.slots_per_epoch) as usize;
        let proposer = self.assignments.proposers[slot_in_epoch];

        // Draw order within a slot is fixed: block, votes, sync, tip.
        let block_missed = rng.gen_bool(self.block_miss_p(epoch));
        // Slashed and fully offline proposers never get their block out; the
        // miss draw still happens so RNG streams stay aligned across configs.
        let block_proposed = !block_missed
            && !self.registry[proposer as usize].slashed
            && !self.offline[proposer as usize];

        let committee = self.assignments.committees[slot_in_epoch].clone();
        for &v in &committee {
            if self.registry[v as usize].slashed || self.offline[v as usize] {
                continue;
            }
            let (ps, pt, ph) = self.flag_miss_p(v);
            let flags = FlagSet {
                source: !rng.gen_bool(ps),
                target: !rng.gen_bool(pt),
                head: !rng.gen_bool(ph),
            };
            self.pending_votes.push(PendingVote { slot, attester: v, flags });
        }

        let mut included_votes = Vec::new();
        let mut att_component: Gwei = 0;
        if block_proposed {
            let mut kept = Vec::new();
            let mut included = Vec::new();
            for vote in mem::take(&mut self.pending_votes) {
                if vote.slot >= slot {
                    // Cast this slot; includable from the next one.
                    kept.push(vote);
                    continue;
                }
                if vote.slot + self.params.slots_per_epoch < slot {
                    continue; // window expired
                }
                if self.registry[vote.attester as usize].slashed {
                    continue; // slashed attesters stop contributing
                }
                let vote_epoch = vote.slot / self.params.slots_per_epoch;
                let tracker = if vote_epoch == epoch {
                    &mut self.cur_flags
                } else {
                    debug_assert_eq!(vote_epoch + 1, epoch);
                    &mut self.prev_flags
                };
                tracker[vote.attester as usize].merge(vote.flags);
                included.push(vote);
            }
            self.pending_votes = kept;

            let ctx = self.context(epoch);
            let mut weighted_sum: Gwei = 0;
            for vote in &included {
                let base = ctx.base_reward(vote.attester as usize, &self.params)?;
                let mut weight = 0u64;
                for flag in crate::rewards::Flag::ALL {
                    if vote.flags.has(flag) {
                        weight += flag.weight(&self.params);
                    }
                }
                weighted_sum = weighted_sum
                    .checked_add(
                        base.checked_mul(weight)
                            .ok_or(RewardError::Overflow("weighted base sum"))?,
                    )
                    .ok_or(RewardError::Overflow("weighted base sum"))?;
                included_votes.push(IncludedVote { attester: vote.attester, flags: vote.flags });
            }
            att_component = rewards::proposer_attestation_component(weighted_sum, &self.params)?;
        } else {
            // Keep only votes still includable at a later slot.
            let horizon = slot + 1;
            let window = self.params.slots_per_epoch;
            self.pending_votes.retain(|v| v.slot + window >= horizon);
        }

        // Sync duty runs every slot, block or not. Committee members that are
        // already slashed stop earning and losing; everyone else is credited
        // on participation and debited the same amount on a miss.
        let participant_reward = self.context(epoch).participant_reward;
        let mut sync_bits = String::with_capacity(self.sync_committee.len());
        let mut participants: u64 = 0;
        for &m in &self.sync_committee.clone() {
            let idx = m as usize;
            if self.registry[idx].slashed {
                sync_bits.push('0');
                continue;
            }
            let missed = self.offline[idx] || rng.gen_bool(self.sync_miss_p(m));
            if missed {
                sync_bits.push('0');
                self.decrease(idx, participant_reward);
            } else {
                sync_bits.push('1');
                participants += 1;
                self.increase(idx, participant_reward);
            }
        }
        let sync_component = if block_proposed {
            rewards::proposer_sync_component(participants, participant_reward, &self.params)?
        } else {
            0
        };

        let mut slashings = Vec::new();
        if block_proposed {
            while self.slash_cursor < self.slash_queue.len()
                && self.slash_queue[self.slash_cursor].slot <= slot
            {
                let ev = self.slash_queue[self.slash_cursor];
                self.slash_cursor += 1;
                let target = ev.validator as usize;
                if target >= self.registry.len() {
                    return Err(SimError::UnknownSlashingTarget {
                        slot: ev.slot,
                        validator: ev.validator,
                    });
                }
                if self.registry[target].slashed || !self.context(epoch).active[target] {
                    continue;
                }
                let amounts = rewards::slashing_amounts(
                    self.registry[target].effective_balance,
                    &self.params,
                )?;
                self.decrease(target, amounts.slashed_penalty);
                self.registry[target].slashed = true;
                self.registry[target].exit_epoch = Some(epoch + 1);
                let whistleblower = ev
                    .whistleblower
                    .filter(|&w| (w as usize) < self.registry.len() && !self.registry[w as usize].slashed)
                    .unwrap_or(proposer);
                self.increase(proposer as usize, amounts.proposer_reward);
                self.increase(whistleblower as usize, amounts.whistleblower_reward);
                slashings.push(SlashingRecord {
                    slashed: ev.validator,
                    whistleblower,
                    penalty: amounts.slashed_penalty,
                    proposer_reward: amounts.proposer_reward,
                    whistleblower_reward: amounts.whistleblower_reward,
                });
            }
        }

        let mut el_tips: Gwei = 0;
        if block_proposed {
            let cl = rewards::proposer_reward(att_component, sync_component)?;
            self.increase(proposer as usize, cl);
            el_tips =
                rng.gen_range(self.cfg.el_tip_distribution.min..=self.cfg.el_tip_distribution.max);
            self.increase(proposer as usize, el_tips);
        }

        self.meta.slots.push(SlotMeta {
            slot,
            proposer_index: proposer,
            block_proposed,
            el_tips,
            sync_bits: sync_bits.clone(),
            included_votes,
            slashings,
        });
        self.last_slot = LastSlot {
            block_proposed,
            proposer_index: proposer,
            el_tips,
            sync_bits,
        };
        Ok(())
    }

    fn increase(&mut self, validator: usize, amount: Gwei) {
        let v = &mut self.registry[validator];
        v.balance = v.balance.saturating_add(amount);
    }

    /// Debits never take a balance below zero. Desk-scale runs sit orders of
    /// magnitude away from that floor; the clamp only guards pathological
    /// configs.
    fn decrease(&mut self, validator: usize, amount: Gwei) {
        let v = &mut self.registry[validator];
        v.balance = v.balance.saturating_sub(amount);
    }

    fn render_snapshot(&self, slot: u64) -> BeaconStateSnapshot {
        BeaconStateSnapshot {
            slot,
            balances: self.registry.iter().map(|v| v.balance).collect(),
            effective_balances: self.registry.iter().map(|v| v.effective_balance).collect(),
            block_proposed: self.last_slot.block_proposed,
            proposer_index: self.last_slot.proposer_index,
            participation_flags: self.cur_flags.clone(),
            prev_participation_flags: self.prev_flags.clone(),
            sync_participation: self.last_slot.sync_bits.clone(),
            el_tips: self.last_slot.el_tips,
            exit_epochs: self.registry.iter().map(|v| v.exit_epoch).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Per-flag attesting balances of an epoch: the sum of effective balances of
/// active validators whose final flag set attained each duty.
// Parallel per-validator arrays; indexing by validator number must panic on a
// length mismatch rather than truncate.
#[allow(clippy::needless_range_loop)]
fn attesting_balances(ctx: &EpochContext, flags: &[FlagSet]) -> rewards::EpochBalances {
    let mut source: Gwei = 0;
    let mut target: Gwei = 0;
    let mut head: Gwei = 0;
    for v in 0..ctx.active.len() {
        if !ctx.active[v] {
            continue;
        }
        let eff = ctx.effective_balances[v];
        let f = flags[v];
        if f.source {
            source += eff;
        }
        if f.target {
            target += eff;
        }
        if f.head {
            head += eff;
        }
    }
    rewards::EpochBalances {
        total_active_balance: ctx.total_active_balance,
        attesting_balance_source: source,
        attesting_balance_target: target,
        attesting_balance_head: head,
    }
}
