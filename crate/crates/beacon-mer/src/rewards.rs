//! Exact integer reward arithmetic for the consensus layer.
//!
//! All amounts are Gwei carried in unsigned integers. Every division in this
//! module is a deliberate floor and happens at exactly one documented point
//! per quantity; intermediate products are widened to `u128` so they cannot
//! wrap before the division. Anything that could still overflow `u64` after
//! division reports [`RewardError::Overflow`] instead of panicking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unsigned Gwei amount.
pub type Gwei = u64;

/// Signed Gwei delta, used where penalties can outweigh rewards.
pub type GweiDelta = i64;

/// Divisor applied to a slashed validator's effective balance to obtain the
/// immediate slashing penalty.
pub const SLASHING_PENALTY_QUOTIENT: u64 = 32;

/// Divisor applied to a slashed validator's effective balance to obtain the
/// whistleblowing bounty (split between block proposer and whistleblower).
pub const WHISTLEBLOWER_REWARD_QUOTIENT: u64 = 512;

/// Errors from reward computations.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum RewardError {
    #[error("total active balance is zero")]
    ZeroTotalActiveBalance,
    #[error("attesting balance {attesting} Gwei exceeds total active balance {total} Gwei")]
    AttestingExceedsTotal { attesting: Gwei, total: Gwei },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("arithmetic overflow computing {0}")]
    Overflow(&'static str),
    #[error("sync participant count {count} exceeds committee size {size}")]
    SyncCountExceedsCommittee { count: u64, size: u64 },
}

/// Protocol weights and sizing constants for the reward model.
///
/// The defaults are the mainnet values; alternative parameterisations are
/// accepted as long as [`WeightParams::validate`] passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightParams {
    /// Numerator scale of the per-increment base reward.
    pub base_reward_factor: u64,
    /// Weight of a timely source vote.
    pub timely_source_weight: u64,
    /// Weight of a timely target vote.
    pub timely_target_weight: u64,
    /// Weight of a timely head vote.
    pub timely_head_weight: u64,
    /// Weight of the sync-committee duty.
    pub sync_reward_weight: u64,
    /// Weight of the proposer duty.
    pub proposer_weight: u64,
    /// Denominator of every weight fraction.
    pub weight_denominator: u64,
    /// Slots per epoch.
    pub slots_per_epoch: u64,
    /// Nominal sync committee size used in the per-participant divisor.
    pub sync_committee_size: u64,
    /// Sync committee rotation period in epochs.
    pub epochs_per_sync_period: u64,
    /// Effective-balance increment in Gwei.
    pub effective_balance_increment: Gwei,
    /// Cap on effective balance in Gwei.
    pub max_effective_balance: Gwei,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams {
            base_reward_factor: 64,
            timely_source_weight: 14,
            timely_target_weight: 26,
            timely_head_weight: 14,
            sync_reward_weight: 2,
            proposer_weight: 8,
            weight_denominator: 64,
            slots_per_epoch: 32,
            sync_committee_size: 512,
            epochs_per_sync_period: 256,
            effective_balance_increment: 1_000_000_000,
            max_effective_balance: 32_000_000_000,
        }
    }
}

impl WeightParams {
    /// Checks internal consistency: positive weights that fit under the
    /// denominator, a proposer weight strictly below it (the proposer
    /// formulas divide by `weight_denominator - proposer_weight`), and
    /// nonzero sizing constants.
    pub fn validate(&self) -> Result<(), RewardError> {
        let err = |msg: &str| Err(RewardError::InvalidParams(msg.to_string()));
        if self.proposer_weight == 0 || self.proposer_weight >= self.weight_denominator {
            return err("require weight_denominator > proposer_weight > 0");
        }
        let weights = [
            self.timely_source_weight,
            self.timely_target_weight,
            self.timely_head_weight,
            self.sync_reward_weight,
            self.proposer_weight,
        ];
        if weights.contains(&0) {
            return err("all duty weights must be positive");
        }
        let mut sum: u64 = 0;
        for w in weights {
            sum = match sum.checked_add(w) {
                Some(s) => s,
                None => return err("duty weights overflow"),
            };
        }
        if sum > self.weight_denominator {
            return err("duty weights must not exceed weight_denominator in sum");
        }
        if self.effective_balance_increment == 0 {
            return err("effective_balance_increment must be nonzero");
        }
        if self.max_effective_balance == 0
            || !self.max_effective_balance.is_multiple_of(self.effective_balance_increment)
        {
            return err("max_effective_balance must be a nonzero multiple of the increment");
        }
        if self.slots_per_epoch == 0 {
            return err("slots_per_epoch must be nonzero");
        }
        if self.sync_committee_size == 0 {
            return err("sync_committee_size must be nonzero");
        }
        if self.epochs_per_sync_period == 0 {
            return err("epochs_per_sync_period must be nonzero");
        }
        if self.base_reward_factor == 0 {
            return err("base_reward_factor must be nonzero");
        }
        Ok(())
    }
}

/// The three attestation duties a validator can get credit for in an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    Source,
    Target,
    Head,
}

impl Flag {
    /// All flags, in source/target/head order.
    pub const ALL: [Flag; 3] = [Flag::Source, Flag::Target, Flag::Head];

    /// The protocol weight of this duty.
    pub fn weight(self, params: &WeightParams) -> u64 {
        match self {
            Flag::Source => params.timely_source_weight,
            Flag::Target => params.timely_target_weight,
            Flag::Head => params.timely_head_weight,
        }
    }

    /// The balance that attested with this flag in the given epoch.
    pub fn attesting_balance(self, balances: &EpochBalances) -> Gwei {
        match self {
            Flag::Source => balances.attesting_balance_source,
            Flag::Target => balances.attesting_balance_target,
            Flag::Head => balances.attesting_balance_head,
        }
    }

    /// Whether missing this duty carries a penalty. Head votes are rewarded
    /// when timely but never penalised when missed.
    pub fn penalised(self) -> bool {
        !matches!(self, Flag::Head)
    }
}

/// Which of the three attestation duties a validator attained in an epoch.
///
/// All-false means no attestation was included within the epoch's inclusion
/// window. Serialises as a 3-bit integer: bit 0 source, bit 1 target,
/// bit 2 head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FlagSet {
    pub source: bool,
    pub target: bool,
    pub head: bool,
}

impl FlagSet {
    /// All three duties attained.
    pub fn all() -> Self {
        FlagSet { source: true, target: true, head: true }
    }

    /// No duty attained.
    pub fn none() -> Self {
        FlagSet::default()
    }

    pub fn has(self, flag: Flag) -> bool {
        match flag {
            Flag::Source => self.source,
            Flag::Target => self.target,
            Flag::Head => self.head,
        }
    }

    pub fn set(&mut self, flag: Flag) {
        match flag {
            Flag::Source => self.source = true,
            Flag::Target => self.target = true,
            Flag::Head => self.head = true,
        }
    }

    /// Union with another set; flags can only be gained, never revoked.
    pub fn merge(&mut self, other: FlagSet) {
        self.source |= other.source;
        self.target |= other.target;
        self.head |= other.head;
    }

    /// The complementary set: duties missed this epoch.
    pub fn missed(self) -> FlagSet {
        FlagSet { source: !self.source, target: !self.target, head: !self.head }
    }

    pub fn count(self) -> u32 {
        self.source as u32 + self.target as u32 + self.head as u32
    }

    pub fn bits(self) -> u8 {
        (self.source as u8) | (self.target as u8) << 1 | (self.head as u8) << 2
    }

    pub fn from_bits(bits: u8) -> Option<FlagSet> {
        if bits > 0b111 {
            return None;
        }
        Some(FlagSet {
            source: bits & 0b001 != 0,
            target: bits & 0b010 != 0,
            head: bits & 0b100 != 0,
        })
    }
}

impl Serialize for FlagSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.bits())
    }
}

impl<'de> Deserialize<'de> for FlagSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let bits = u8::deserialize(deserializer)?;
        FlagSet::from_bits(bits)
            .ok_or_else(|| serde::de::Error::custom(format!("flag bits out of range: {bits}")))
    }
}

/// Aggregate balances for one epoch: the total stake of active validators and
/// the portion of it that attested correctly per duty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochBalances {
    pub total_active_balance: Gwei,
    pub attesting_balance_source: Gwei,
    pub attesting_balance_target: Gwei,
    pub attesting_balance_head: Gwei,
}

impl EpochBalances {
    /// Checks that the total is nonzero and no attesting balance exceeds it.
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.total_active_balance == 0 {
            return Err(RewardError::ZeroTotalActiveBalance);
        }
        for flag in Flag::ALL {
            let attesting = flag.attesting_balance(self);
            if attesting > self.total_active_balance {
                return Err(RewardError::AttestingExceedsTotal {
                    attesting,
                    total: self.total_active_balance,
                });
            }
        }
        Ok(())
    }
}

/// Per-transaction fee data for execution-layer reward accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionFees {
    pub gas_used: u64,
    /// Base fee per gas in Gwei; burned, never paid to the proposer.
    pub base_fee_per_gas: Gwei,
    /// Priority fee (tip) per gas in Gwei; paid to the proposer.
    pub priority_fee_per_gas: Gwei,
}

/// Execution-layer outcome of one block: what the proposer keeps and what is
/// destroyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ElReward {
    pub proposer_tips: Gwei,
    pub burned: Gwei,
}

/// The three balance movements triggered by a slashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlashingAmounts {
    /// Immediate penalty debited from the slashed validator.
    pub slashed_penalty: Gwei,
    /// Share of the bounty credited to the block proposer.
    pub proposer_reward: Gwei,
    /// Remainder of the bounty credited to the whistleblower.
    pub whistleblower_reward: Gwei,
}

/// Floor square root of `n`: the largest `r` with `r * r <= n`.
///
/// Digit-by-digit method over bit pairs; exact for the full `u64` range, with
/// no float round-trips.
pub fn integer_sqrt(n: u64) -> u64 {
    if n < 2 {
        return n;
    }
    // Highest power of four at or below n.
    let mut bit = 1u64 << ((63 - n.leading_zeros()) & !1);
    let mut rem = n;
    let mut root = 0u64;
    while bit != 0 {
        if rem >= root + bit {
            rem -= root + bit;
            root = (root >> 1) + bit;
        } else {
            root >>= 1;
        }
        bit >>= 2;
    }
    root
}

fn to_gwei(value: u128, what: &'static str) -> Result<Gwei, RewardError> {
    Gwei::try_from(value).map_err(|_| RewardError::Overflow(what))
}

/// Per-epoch base reward of a validator with the given effective balance:
/// `floor(effective_balance / increment) * floor(increment *
/// base_reward_factor / sqrt(total_active_balance))`. The per-increment
/// reward floors first, then scales by the whole number of increments.
pub fn base_reward(
    eff_balance: Gwei,
    total_active_balance: Gwei,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    if total_active_balance == 0 {
        return Err(RewardError::ZeroTotalActiveBalance);
    }
    let sqrt = integer_sqrt(total_active_balance) as u128;
    let per_increment = (params.effective_balance_increment as u128
        * params.base_reward_factor as u128)
        / sqrt;
    let increments = (eff_balance / params.effective_balance_increment) as u128;
    to_gwei(increments * per_increment, "base_reward")
}

/// Sum of base rewards over an explicit set of effective balances. Overflow
/// of the running total is reported, not wrapped.
pub fn sum_base_rewards<I>(
    effective_balances: I,
    total_active_balance: Gwei,
    params: &WeightParams,
) -> Result<Gwei, RewardError>
where
    I: IntoIterator<Item = Gwei>,
{
    let mut sum: Gwei = 0;
    for eff in effective_balances {
        let base = base_reward(eff, total_active_balance, params)?;
        sum = sum
            .checked_add(base)
            .ok_or(RewardError::Overflow("sum_base_rewards"))?;
    }
    Ok(sum)
}

/// Canonical sum of base rewards over all active validators, derived from the
/// total active balance alone: `floor(total / increment)` increments at the
/// per-increment rate. Equals [`sum_base_rewards`] over the individual
/// balances whenever every effective balance is a whole number of increments,
/// which this artifact's simulations guarantee. Every consumer of the sync
/// budget derives the sum through this one function so the amounts agree
/// exactly across simulator, analyzer, and the ideal-reward calculation.
pub fn epoch_base_reward_sum(
    total_active_balance: Gwei,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    base_reward(total_active_balance, total_active_balance, params)
}

/// Reward for one attained attestation duty:
/// `floor(weight * base_reward * attesting_balance / (weight_denominator *
/// total_active_balance))`. One floor, taken after the full product.
pub fn flag_reward(
    flag: Flag,
    validator_base_reward: Gwei,
    balances: &EpochBalances,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    balances.validate()?;
    let weight = flag.weight(params) as u128;
    let attesting = flag.attesting_balance(balances) as u128;
    let numerator = weight
        .checked_mul(validator_base_reward as u128)
        .and_then(|n| n.checked_mul(attesting))
        .ok_or(RewardError::Overflow("flag_reward"))?;
    let denominator = params.weight_denominator as u128 * balances.total_active_balance as u128;
    to_gwei(numerator / denominator, "flag_reward")
}

/// Total attestation reward for an epoch: the sum of per-flag rewards over
/// the attained duties. Each flag floors independently, so the total can fall
/// a couple of Gwei short of a single combined-weight floor.
pub fn attestation_reward(
    flags: FlagSet,
    validator_base_reward: Gwei,
    balances: &EpochBalances,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    let mut total: Gwei = 0;
    for flag in Flag::ALL {
        if flags.has(flag) {
            let reward = flag_reward(flag, validator_base_reward, balances, params)?;
            total = total
                .checked_add(reward)
                .ok_or(RewardError::Overflow("attestation_reward"))?;
        }
    }
    Ok(total)
}

/// Penalty for the duties missed in an epoch. Only source and target misses
/// are penalised, each at the flat full-participation rate
/// `floor(weight * base_reward / weight_denominator)`.
pub fn attestation_penalty(
    flags_missed: FlagSet,
    validator_base_reward: Gwei,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    let mut total: Gwei = 0;
    for flag in Flag::ALL {
        if flags_missed.has(flag) && flag.penalised() {
            let amount = (flag.weight(params) as u128 * validator_base_reward as u128)
                / params.weight_denominator as u128;
            total = total
                .checked_add(to_gwei(amount, "attestation_penalty")?)
                .ok_or(RewardError::Overflow("attestation_penalty"))?;
        }
    }
    Ok(total)
}

/// Alternative penalty that scales with the attesting-balance fraction
/// exactly like the reward side, i.e. a missed flag costs what the attained
/// flag would have paid that epoch. Selected by the `scaled_penalties` run
/// option.
pub fn attestation_penalty_scaled(
    flags_missed: FlagSet,
    validator_base_reward: Gwei,
    balances: &EpochBalances,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    let mut total: Gwei = 0;
    for flag in Flag::ALL {
        if flags_missed.has(flag) && flag.penalised() {
            let amount = flag_reward(flag, validator_base_reward, balances, params)?;
            total = total
                .checked_add(amount)
                .ok_or(RewardError::Overflow("attestation_penalty_scaled"))?;
        }
    }
    Ok(total)
}

/// Total sync-committee reward budget for one epoch:
/// `floor(sum_base_rewards * sync_reward_weight / weight_denominator)`, where
/// `sum_base_rewards` covers all active validators.
pub fn sync_total_reward(
    sum_base_rewards: Gwei,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    let amount = (sum_base_rewards as u128 * params.sync_reward_weight as u128)
        / params.weight_denominator as u128;
    to_gwei(amount, "sync_total_reward")
}

/// Per-slot reward of one sync-committee member:
/// `floor(total_sync_reward / (slots_per_epoch * sync_committee_size))`. The
/// same amount is credited per participating slot and debited in full per
/// missed slot. The divisor uses the nominal committee size even if fewer
/// validators serve.
pub fn sync_participant_reward(
    total_sync_reward: Gwei,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    let divisor = params.slots_per_epoch as u128 * params.sync_committee_size as u128;
    to_gwei(total_sync_reward as u128 / divisor, "sync_participant_reward")
}

/// Proposer income from the attestations newly included in a block.
///
/// `sum_weighted_base` is the sum over newly included votes of the attester's
/// base reward times the weight of each timely flag. The proposer keeps
/// `floor(sum_weighted_base * proposer_weight / ((weight_denominator -
/// proposer_weight) * weight_denominator))`: the attestation-scale division
/// and the proposer fraction share a single floor.
pub fn proposer_attestation_component(
    sum_weighted_base: Gwei,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    let divisor = (params.weight_denominator - params.proposer_weight) as u128
        * params.weight_denominator as u128;
    let amount = (sum_weighted_base as u128 * params.proposer_weight as u128) / divisor;
    to_gwei(amount, "proposer_attestation_component")
}

/// Proposer income from the sync aggregate carried in a block:
/// `included_sync_signatures * floor(participant_reward * proposer_weight /
/// (weight_denominator - proposer_weight))`. The per-signature amount floors
/// before scaling by the count.
pub fn proposer_sync_component(
    included_sync_signatures: u64,
    participant_reward: Gwei,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    if included_sync_signatures > params.sync_committee_size {
        return Err(RewardError::SyncCountExceedsCommittee {
            count: included_sync_signatures,
            size: params.sync_committee_size,
        });
    }
    let per_signature = (participant_reward as u128 * params.proposer_weight as u128)
        / (params.weight_denominator - params.proposer_weight) as u128;
    to_gwei(
        included_sync_signatures as u128 * per_signature,
        "proposer_sync_component",
    )
}

/// Total consensus-layer proposer reward for a block: attestation-inclusion
/// component plus sync-aggregate component. A missed proposal earns nothing
/// and costs nothing.
pub fn proposer_reward(
    att_component: Gwei,
    sync_component: Gwei,
) -> Result<Gwei, RewardError> {
    att_component
        .checked_add(sync_component)
        .ok_or(RewardError::Overflow("proposer_reward"))
}

/// The three balance movements of a slashing, all derived from the slashed
/// validator's effective balance:
///
/// * penalty: `floor(eff / SLASHING_PENALTY_QUOTIENT)`
/// * proposer share: `floor(eff * proposer_weight /
///   (WHISTLEBLOWER_REWARD_QUOTIENT * weight_denominator))`
/// * whistleblower share: `floor(eff / WHISTLEBLOWER_REWARD_QUOTIENT)` minus
///   the proposer share.
///
/// The slashed validator exits the active set; recording that status change
/// is the caller's job.
pub fn slashing_amounts(
    eff_balance: Gwei,
    params: &WeightParams,
) -> Result<SlashingAmounts, RewardError> {
    let penalty = eff_balance / SLASHING_PENALTY_QUOTIENT;
    let bounty = eff_balance / WHISTLEBLOWER_REWARD_QUOTIENT;
    let proposer = to_gwei(
        eff_balance as u128 * params.proposer_weight as u128
            / (WHISTLEBLOWER_REWARD_QUOTIENT as u128 * params.weight_denominator as u128),
        "slashing_amounts",
    )?;
    // proposer <= bounty because proposer_weight < weight_denominator, so the
    // subtraction cannot wrap.
    Ok(SlashingAmounts {
        slashed_penalty: penalty,
        proposer_reward: proposer,
        whistleblower_reward: bounty - proposer,
    })
}

/// Execution-layer outcome of a block: per transaction, `gas_used *
/// priority_fee_per_gas` goes to the proposer and `gas_used *
/// base_fee_per_gas` is burned.
pub fn el_proposer_reward(transactions: &[TransactionFees]) -> Result<ElReward, RewardError> {
    let mut tips: u128 = 0;
    let mut burned: u128 = 0;
    for tx in transactions {
        tips += tx.gas_used as u128 * tx.priority_fee_per_gas as u128;
        burned += tx.gas_used as u128 * tx.base_fee_per_gas as u128;
    }
    Ok(ElReward {
        proposer_tips: to_gwei(tips, "el_proposer_reward tips")?,
        burned: to_gwei(burned, "el_proposer_reward burned")?,
    })
}

/// Ideal consensus reward of one validator for one epoch: the attestation
/// reward with all three flags attained (at the epoch's realized attesting
/// balances), plus, for sync-committee members, a full epoch of per-slot sync
/// rewards. Proposer and execution-layer income are excluded: both depend on
/// duties the validator cannot count on drawing.
pub fn max_epoch_reward(
    eff_balance: Gwei,
    balances: &EpochBalances,
    in_sync_committee: bool,
    params: &WeightParams,
) -> Result<Gwei, RewardError> {
    let base = base_reward(eff_balance, balances.total_active_balance, params)?;
    let att_max = attestation_reward(FlagSet::all(), base, balances, params)?;
    if !in_sync_committee {
        return Ok(att_max);
    }
    let sum_base = epoch_base_reward_sum(balances.total_active_balance, params)?;
    let total = sync_total_reward(sum_base, params)?;
    let participant = sync_participant_reward(total, params)?;
    let sync_max = participant
        .checked_mul(params.slots_per_epoch)
        .ok_or(RewardError::Overflow("max_epoch_reward"))?;
    att_max
        .checked_add(sync_max)
        .ok_or(RewardError::Overflow("max_epoch_reward"))
}
