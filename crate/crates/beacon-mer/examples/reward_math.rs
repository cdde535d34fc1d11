//! Walks every reward formula once, for a mid-sized network, printing the
//! inputs next to the amounts. Run with `cargo run --example reward_math`.

use beacon_mer::rewards::{
    self, EpochBalances, Flag, FlagSet, TransactionFees, WeightParams,
};

const ETH: u64 = 1_000_000_000;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = WeightParams::default();
    let total = 1_000_000 * ETH; // ~31,250 validators at the cap
    let eff = 32 * ETH;

    let base = rewards::base_reward(eff, total, &p)?;
    println!("network: total active balance {} ETH", total / ETH);
    println!("one validator at {} ETH earns a base reward of {base} Gwei per epoch", eff / ETH);

    // An epoch where 95% of stake attested on time, for all three duties.
    let balances = EpochBalances {
        total_active_balance: total,
        attesting_balance_source: total / 100 * 95,
        attesting_balance_target: total / 100 * 95,
        attesting_balance_head: total / 100 * 95,
    };
    println!("\nattestation, at 95% participation:");
    for flag in Flag::ALL {
        let amount = rewards::flag_reward(flag, base, &balances, &p)?;
        println!("  {flag:?} flag pays {amount} Gwei");
    }
    let full = rewards::attestation_reward(FlagSet::all(), base, &balances, &p)?;
    let none = rewards::attestation_penalty(FlagSet::none().missed(), base, &p)?;
    println!("  all three flags together: {full} Gwei");
    println!("  missing source and target instead costs {none} Gwei");

    let sum_base = rewards::epoch_base_reward_sum(total, &p)?;
    let sync_total = rewards::sync_total_reward(sum_base, &p)?;
    let per_slot = rewards::sync_participant_reward(sync_total, &p)?;
    println!("\nsync committee:");
    println!("  epoch budget {sync_total} Gwei across {} members", p.sync_committee_size);
    println!("  one member gains or loses {per_slot} Gwei per slot");

    // A block that includes 200 fresh attestations (all flags timely) and a
    // sync aggregate with 500 of 512 signatures.
    let weighted = 200 * base * (p.timely_source_weight + p.timely_target_weight + p.timely_head_weight);
    let att_part = rewards::proposer_attestation_component(weighted, &p)?;
    let sync_part = rewards::proposer_sync_component(500, per_slot, &p)?;
    println!("\none block's proposer income:");
    println!("  attestation inclusion {att_part} Gwei");
    println!("  sync aggregate {sync_part} Gwei");
    println!("  total {} Gwei", rewards::proposer_reward(att_part, sync_part)?);

    let slash = rewards::slashing_amounts(32 * ETH, &p)?;
    println!("\nslashing a 32 ETH validator:");
    println!("  immediate penalty {} Gwei", slash.slashed_penalty);
    println!("  proposer bounty {} Gwei", slash.proposer_reward);
    println!("  whistleblower bounty {} Gwei", slash.whistleblower_reward);

    let el = rewards::el_proposer_reward(&[
        TransactionFees { gas_used: 21_000, base_fee_per_gas: 12, priority_fee_per_gas: 2 },
        TransactionFees { gas_used: 180_000, base_fee_per_gas: 12, priority_fee_per_gas: 3 },
    ])?;
    println!("\nexecution layer, two transactions:");
    println!("  proposer keeps {} Gwei in tips, {} Gwei is burned", el.proposer_tips, el.burned);

    let ideal = rewards::max_epoch_reward(eff, &balances, true, &p)?;
    let attained = full + per_slot * p.slots_per_epoch;
    println!("\nideal epoch for a sync member: {ideal} Gwei");
    println!("a flawless validator attains {attained} Gwei, ratio {:.4}", attained as f64 / ideal as f64);
    Ok(())
}
