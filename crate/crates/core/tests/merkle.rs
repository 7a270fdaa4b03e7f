use proptest::prelude::*;
use psap::migration::{merkle_root, verify, MigBatch, RejectReason, HEADER_BYTES};
use psap::safety::SafetyLimits;
use psap::types::Validator;
use psap::{AccountId, BlockHeight, FixedPoint, Move, ShardId, ShardState};

const K: u16 = 6;

fn shards() -> Vec<ShardState> {
    let mut s: Vec<ShardState> = (0..K).map(|q| ShardState::new(ShardId(q), 1000, 1_000_000, 4)).collect();
    s[0].validators = (0..4)
        .map(|i| Validator {
            id: i,
            account: AccountId(1_000_000 + i as u64),
            stake: FixedPoint::ONE,
            byzantine: false,
            active_from: BlockHeight(0),
        })
        .collect();
    s
}

fn batch(raw: &[(u64, u16)]) -> MigBatch {
    let mut seen = std::collections::BTreeSet::new();
    let moves: Vec<Move> = raw
        .iter()
        .filter(|(a, _)| seen.insert(*a))
        .map(|&(a, to)| Move { account: AccountId(a), from: ShardId(0), to: ShardId(to) })
        .collect();
    MigBatch::build(&moves, ShardId(0), BlockHeight(9), 4, 2, &[0, 1, 2]).unwrap()
}

fn raw_moves() -> impl Strategy<Value = Vec<(u64, u16)>> {
    prop::collection::vec((0u64..100_000, 1..K), 1..76)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn any_changed_move_breaks_the_root(raw in raw_moves(), pick in any::<prop::sample::Index>(), field in 0u8..3, delta in 1u64..1000) {
        let b = batch(&raw);
        let s = shards();
        let l = SafetyLimits::default();
        prop_assert_eq!(verify(&b, BlockHeight(10), &s, &l, 1_000_000), Ok(()));
        let mut t = b.clone();
        let i = pick.index(t.moves.len());
        match field {
            0 => t.moves[i].account = AccountId(t.moves[i].account.0 ^ delta),
            1 => t.moves[i].to = ShardId(1 + (t.moves[i].to.0 + delta as u16) % (K - 1)),
            _ => t.moves[i].from = ShardId(1 + (delta % (K as u64 - 1)) as u16),
        }
        prop_assume!(t.moves != b.moves);
        prop_assert_ne!(merkle_root(&t.moves), merkle_root(&b.moves));
        prop_assert_eq!(verify(&t, BlockHeight(10), &s, &l, 1_000_000), Err(RejectReason::Root));
    }

    #[test]
    fn reordering_moves_breaks_the_root(raw in raw_moves(), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let batch = batch(&raw);
        let mut t = batch.clone();
        let (i, j) = (a.index(t.moves.len()), b.index(t.moves.len()));
        t.moves.swap(i, j);
        prop_assume!(t.moves != batch.moves);
        prop_assert_eq!(verify(&t, BlockHeight(10), &shards(), &SafetyLimits::default(), 1_000_000), Err(RejectReason::Root));
    }

    #[test]
    fn any_flipped_wire_bit_is_rejected(raw in raw_moves(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let b = batch(&raw);
        let mut bytes = b.to_bytes();
        let p = pos.index(bytes.len());
        bytes[p] ^= 1 << bit;
        match MigBatch::from_bytes(&bytes, b.quorum.clone()) {
            Err(_) => {}
            Ok(t) => {
                prop_assert_ne!(&t, &b);
                let verdict = verify(&t, BlockHeight(10), &shards(), &SafetyLimits::default(), 1_000_000);
                // a move-tag flip leaves header and moves intact but changes the epoch
                let tag_only = p >= HEADER_BYTES && (p - HEADER_BYTES) % 20 >= 12 && t.moves == b.moves;
                prop_assert!(verdict.is_err() || tag_only, "flip at byte {} accepted", p);
            }
        }
    }
}
