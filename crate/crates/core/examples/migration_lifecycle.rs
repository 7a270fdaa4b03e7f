//! Walks migration batches through their three endings: applied, cancelled
//! on a silent destination, and re-anchored after a source reorganization.

use psap::migration::{MigBatch, MigrationEngine};
use psap::{AccountId, AllocationMap, BlockHeight, Move, ShardId};

fn mv(a: u64, to: u16) -> Move {
    Move { account: AccountId(a), from: ShardId(0), to: ShardId(to) }
}

fn main() -> psap::Result<()> {
    let mut alloc = AllocationMap::from_fn(12, 3, |a| ShardId((a.0 % 3) as u16));
    let mut engine = MigrationEngine::new(&alloc, vec![1_000; 12]);
    let total = engine.total_balance();

    let a = engine.propose(MigBatch::build(&[mv(0, 1), mv(3, 2)], ShardId(0), BlockHeight(10), 0, 0, &[])?)?;
    let b = engine.propose(MigBatch::build(&[mv(6, 1), mv(9, 2)], ShardId(0), BlockHeight(10), 1, 0, &[])?)?;
    engine.submit(&a, BlockHeight(10))?;
    engine.submit(&b, BlockHeight(10))?;
    engine.confirm(&a, ShardId(1), BlockHeight(11));
    engine.confirm(&a, ShardId(2), BlockHeight(11));
    engine.confirm(&b, ShardId(1), BlockHeight(11));
    for h in 11..=13 {
        engine.resolve(BlockHeight(h), &mut alloc);
        println!("height {h}: escrow {}, conserved {}", engine.escrow(), engine.total_balance() == total);
    }
    println!("a: {:?}\nb: {:?}", engine.status(&a), engine.status(&b));
    println!("account 3 now on shard {}, account 9 still on shard {}", alloc.shard_of(AccountId(3)), alloc.shard_of(AccountId(9)));

    // applying twice is a counted no-op
    engine.replay_apply(&a);
    println!("duplicate applies absorbed: {}", engine.duplicate_applies);

    let c = engine.propose(MigBatch::build(&[mv(6, 2)], ShardId(0), BlockHeight(20), 2, 1, &[])?)?;
    engine.submit(&c, BlockHeight(20))?;
    let successor = engine.reanchor(&c, 2, BlockHeight(21), &[])?.expect("deep reorg re-anchors");
    engine.submit(&successor, BlockHeight(21))?;
    engine.confirm(&successor, ShardId(2), BlockHeight(22));
    engine.resolve(BlockHeight(22), &mut alloc);
    println!("c: {:?}\nsuccessor: {:?}", engine.status(&c), engine.status(&successor));

    for e in engine.take_events() {
        println!("  {}", serde_json::to_string(&e)?);
    }
    Ok(())
}
