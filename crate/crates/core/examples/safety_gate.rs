//! Feeds the safety gate a proposal that trips several limits and prints
//! which moves survive and why the rest were pruned.

use psap::safety::{budget, gate, safety_score, GateInput, SafetyLimits};
use psap::twf::ForecastBundle;
use psap::types::Validator;
use psap::{AccountId, AllocationMap, BlockHeight, FixedPoint, LoadVector, MigrationAction, Move, ShardId, ShardState};

fn main() -> psap::Result<()> {
    let k = 4u16;
    let accounts = 8000;
    let alloc = AllocationMap::from_fn(accounts, k, |a| ShardId((a.0 % k as u64) as u16));
    let mut shards: Vec<ShardState> = (0..k).map(|s| ShardState::new(ShardId(s), 1000, 1_000_000, 8)).collect();
    // shard 1 already holds 3 Byzantine out of 10 stake units
    for (account, byzantine) in [(1u64, true), (5, true), (9, true), (13, false), (17, false), (21, false), (25, false), (29, false), (33, false), (37, false), (0, true)] {
        let s = alloc.shard_of(AccountId(account));
        shards[s.index()].validators.push(Validator { id: account as u32, account: AccountId(account), stake: FixedPoint::ONE, byzantine, active_from: BlockHeight(0) });
    }
    // shard 2 is forecast near the utilization cap
    let forecast = ForecastBundle::persistence(&LoadVector::from_f64(&[620.0, 400.0, 740.0, 300.0]), 8);
    let load = vec![FixedPoint::from_int(4); accounts];
    let input = GateInput { height: BlockHeight(100), shards: &shards, forecast: &forecast, alloc: &alloc, account_load: &load, epoch_moves: 0, block_gas: 1_000_000 };
    let limits = SafetyLimits::default();

    let mv = |a: u64, to: u16| Move { account: AccountId(a), from: alloc.shard_of(AccountId(a)), to: ShardId(to) };
    let to_cool: Vec<Move> = (0..4).map(|i| mv(40 + 4 * i, 3)).collect();
    let cases = [
        ("balanced", [vec![mv(0, 1)], to_cool.clone()].concat()),
        ("hot destination", [vec![mv(0, 1), mv(4, 2), mv(8, 2), mv(12, 2)], to_cool.clone()].concat()),
        ("bulk", (0..48).map(|i| mv(40 + 4 * i, 3)).collect()),
    ];
    for (label, moves) in cases {
        let action = MigrationAction::new(moves)?;
        let v = gate(&action, input, &limits);
        let mut reasons = std::collections::BTreeMap::new();
        for p in &v.pruned {
            *reasons.entry(format!("{:?}", p.reason)).or_insert(0) += 1;
        }
        let before: Vec<Move> = action.moves.iter().copied().filter(|m| !v.pruned.iter().any(|p| p.mv == *m && p.reason != psap::safety::PruneReason::Score)).collect();
        println!(
            "{label:>15}: proposed {:>2}, accepted {}, score before freeze {:.3}, pruned {reasons:?}",
            action.len(),
            v.accepted.len(),
            safety_score(&before, input, &limits).to_f64()
        );
    }
    println!("per-block move budget at the threshold: {}", budget(&limits, accounts, 0, 1_000_000));
    Ok(())
}
