//! Arbitrary-precision reference implementations of every reward formula.
//!
//! Each function rebuilds its formula from scratch over `BigUint`, with
//! every division an exact big-integer floor. None of them call into the
//! crate they check, so a shared rounding mistake cannot hide here.

use beacon_mer::rewards::{
    EpochBalances, Flag, FlagSet, TransactionFees, WeightParams, SLASHING_PENALTY_QUOTIENT,
    WHISTLEBLOWER_REWARD_QUOTIENT,
};
use num_bigint::BigUint;
use num_traits::ToPrimitive;

fn big(n: u64) -> BigUint {
    BigUint::from(n)
}

fn to64(n: BigUint) -> u64 {
    n.to_u64().expect("oracle value fits in u64")
}

fn weight(flag: Flag, p: &WeightParams) -> u64 {
    match flag {
        Flag::Source => p.timely_source_weight,
        Flag::Target => p.timely_target_weight,
        Flag::Head => p.timely_head_weight,
    }
}

fn attesting(flag: Flag, b: &EpochBalances) -> u64 {
    match flag {
        Flag::Source => b.attesting_balance_source,
        Flag::Target => b.attesting_balance_target,
        Flag::Head => b.attesting_balance_head,
    }
}

pub fn base_reward(eff: u64, total: u64, p: &WeightParams) -> u64 {
    let per_increment =
        big(p.effective_balance_increment) * big(p.base_reward_factor) / big(total).sqrt();
    let increments = big(eff) / big(p.effective_balance_increment);
    to64(increments * per_increment)
}

pub fn epoch_base_reward_sum(total: u64, p: &WeightParams) -> u64 {
    base_reward(total, total, p)
}

pub fn flag_reward(flag: Flag, base: u64, b: &EpochBalances, p: &WeightParams) -> u64 {
    let numerator = big(weight(flag, p)) * big(base) * big(attesting(flag, b));
    let denominator = big(p.weight_denominator) * big(b.total_active_balance);
    to64(numerator / denominator)
}

pub fn attestation_reward(flags: FlagSet, base: u64, b: &EpochBalances, p: &WeightParams) -> u64 {
    let mut total = 0u64;
    for flag in Flag::ALL {
        if flags.has(flag) {
            total += flag_reward(flag, base, b, p);
        }
    }
    total
}

pub fn attestation_penalty(missed: FlagSet, base: u64, p: &WeightParams) -> u64 {
    let mut total = 0u64;
    for flag in [Flag::Source, Flag::Target] {
        if missed.has(flag) {
            total += to64(big(weight(flag, p)) * big(base) / big(p.weight_denominator));
        }
    }
    total
}

pub fn attestation_penalty_scaled(
    missed: FlagSet,
    base: u64,
    b: &EpochBalances,
    p: &WeightParams,
) -> u64 {
    let mut total = 0u64;
    for flag in [Flag::Source, Flag::Target] {
        if missed.has(flag) {
            total += flag_reward(flag, base, b, p);
        }
    }
    total
}

pub fn sync_total_reward(sum_base: u64, p: &WeightParams) -> u64 {
    to64(big(sum_base) * big(p.sync_reward_weight) / big(p.weight_denominator))
}

pub fn sync_participant_reward(total_sync: u64, p: &WeightParams) -> u64 {
    to64(big(total_sync) / (big(p.slots_per_epoch) * big(p.sync_committee_size)))
}

pub fn proposer_attestation_component(sum_weighted_base: u64, p: &WeightParams) -> u64 {
    let denominator =
        big(p.weight_denominator - p.proposer_weight) * big(p.weight_denominator);
    to64(big(sum_weighted_base) * big(p.proposer_weight) / denominator)
}

pub fn proposer_sync_component(count: u64, participant: u64, p: &WeightParams) -> u64 {
    let per_signature =
        big(participant) * big(p.proposer_weight) / big(p.weight_denominator - p.proposer_weight);
    to64(big(count) * per_signature)
}

/// Returns (penalty, proposer share, whistleblower share).
pub fn slashing_amounts(eff: u64, p: &WeightParams) -> (u64, u64, u64) {
    let penalty = to64(big(eff) / big(SLASHING_PENALTY_QUOTIENT));
    let bounty = to64(big(eff) / big(WHISTLEBLOWER_REWARD_QUOTIENT));
    let proposer = to64(
        big(eff) * big(p.proposer_weight)
            / (big(WHISTLEBLOWER_REWARD_QUOTIENT) * big(p.weight_denominator)),
    );
    (penalty, proposer, bounty - proposer)
}

/// Returns (proposer tips, burned base fees).
pub fn el_proposer_reward(txs: &[TransactionFees]) -> (u64, u64) {
    let mut tips = BigUint::default();
    let mut burned = BigUint::default();
    for tx in txs {
        tips += big(tx.gas_used) * big(tx.priority_fee_per_gas);
        burned += big(tx.gas_used) * big(tx.base_fee_per_gas);
    }
    (to64(tips), to64(burned))
}

pub fn max_epoch_reward(eff: u64, b: &EpochBalances, in_sync: bool, p: &WeightParams) -> u64 {
    let base = base_reward(eff, b.total_active_balance, p);
    let att = attestation_reward(FlagSet::all(), base, b, p);
    if !in_sync {
        return att;
    }
    let participant = sync_participant_reward(
        sync_total_reward(epoch_base_reward_sum(b.total_active_balance, p), p),
        p,
    );
    att + participant * p.slots_per_epoch
}
