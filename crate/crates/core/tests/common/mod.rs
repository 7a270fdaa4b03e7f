//! Randomized migration schedules shared by the property tests and the acceptance suite.

use proptest::prelude::*;
use psap::migration::{BatchStatus, MigBatch, MigrationEngine};
use psap::{AccountId, AllocationMap, BlockHeight, Move, ShardId};

const K: u16 = 4;
const END: u64 = 40;

#[derive(Clone, Debug)]
pub struct Plan {
    pub source: u16,
    /// Destination offset per move, 1..K.
    pub steps: Vec<u16>,
    pub anchor: u64,
    /// Confirmation delay per destination shard; `None` never confirms.
    pub delays: [Option<u64>; K as usize],
    pub reorg: Option<(u64, u64)>,
}

pub fn plan() -> impl Strategy<Value = Plan> {
    (
        0..K,
        prop::collection::vec(1..K, 1..6),
        0u64..12,
        prop::array::uniform4(prop::option::weighted(0.85, 0u64..5)),
        prop::option::weighted(0.3, (0u64..6, 1u64..4)),
    )
        .prop_map(|(source, steps, anchor, delays, reorg)| Plan { source, steps, anchor, delays, reorg })
}

/// Accounts of batch `i` are disjoint from every other batch's and live on `source`.
fn moves(i: usize, p: &Plan) -> Vec<Move> {
    p.steps
        .iter()
        .enumerate()
        .map(|(j, s)| Move {
            account: AccountId(K as u64 * (i * 8 + j) as u64 + p.source as u64),
            from: ShardId(p.source),
            to: ShardId((p.source + s) % K),
        })
        .collect()
}

struct Live {
    id: psap::hash::Digest256,
    anchor: u64,
    submitted: bool,
}

pub fn run(plans: &[Plan]) -> Result<(), TestCaseError> {
    let n = K as usize * 8 * plans.len().max(1);
    let mut alloc = AllocationMap::from_fn(n, K, |a| ShardId((a.0 % K as u64) as u16));
    let start = alloc.clone();
    let mut engine = MigrationEngine::new(&alloc, (0..n as u64).map(|a| 10 + a * 3).collect());
    let total = engine.total_balance();
    let mut live: Vec<Option<Live>> = plans.iter().map(|_| None).collect();

    for h in 0..END {
        let height = BlockHeight(h);
        for (i, p) in plans.iter().enumerate() {
            if p.anchor == h {
                let nonce = engine.next_nonce();
                let b = MigBatch::build(&moves(i, p), ShardId(p.source), height, nonce, 0, &[]).unwrap();
                let id = engine.propose(b).unwrap();
                engine.submit(&id, height).unwrap();
                live[i] = Some(Live { id, anchor: h, submitted: true });
            }
            if let (Some((after, depth)), Some(l)) = (p.reorg, live[i].as_mut()) {
                if h == l.anchor + after && l.anchor == p.anchor {
                    if let Some(succ) = engine.reanchor(&l.id, depth, height, &[]).unwrap() {
                        *l = Live { id: succ, anchor: h, submitted: false };
                    }
                }
            }
            if let Some(l) = live[i].as_mut() {
                if !l.submitted {
                    engine.submit(&l.id, height).unwrap();
                    l.submitted = true;
                }
                for q in 0..K {
                    if let Some(d) = p.delays[q as usize] {
                        if h == l.anchor + 1 + d {
                            engine.confirm(&l.id, ShardId(q), height);
                        }
                    }
                }
            }
        }
        engine.resolve(height, &mut alloc);
        prop_assert_eq!(engine.total_balance(), total);
        let in_escrow: u128 = engine
            .in_flight()
            .filter(|b| matches!(engine.status(&b.id()), Some(BatchStatus::Submitted { .. })))
            .flat_map(|b| b.moves.iter().map(|m| engine.balance(m.account) as u128))
            .sum();
        prop_assert_eq!(engine.escrow(), in_escrow);
    }

    for (i, p) in plans.iter().enumerate() {
        let l = live[i].as_ref().expect("every batch was proposed");
        let status = engine.status(&l.id).cloned().expect("tracked");
        prop_assert!(status.is_terminal(), "batch {} still {:?}", i, status);
        let ms = moves(i, p);
        let applied = matches!(status, BatchStatus::Applied { .. });
        for m in &ms {
            let expect = if applied { m.to } else { start.shard_of(m.account) };
            prop_assert_eq!(alloc.shard_of(m.account), expect, "partial application of batch {}", i);
            prop_assert!(!engine.is_locked(m.account));
        }
        if applied {
            let before = alloc.clone();
            let totals = engine.shard_totals().to_vec();
            prop_assert!(engine.replay_apply(&l.id));
            prop_assert_eq!(&alloc, &before);
            prop_assert_eq!(engine.shard_totals(), &totals[..]);
        }
    }
    let per_shard = |a: &AllocationMap| {
        let mut t = vec![0u128; K as usize];
        for (acct, s) in a.iter() {
            t[s.index()] += engine.balance(acct) as u128;
        }
        t
    };
    prop_assert_eq!(engine.shard_totals(), &per_shard(&alloc)[..]);
    Ok(())
}

