use super::Candidate;
use crate::fixed::FixedPoint;
use crate::types::{AccountId, MigrationAction, Move, ShardId};

/// Hash placement: SplitMix64 finalizer of the account id, mod K.
pub fn baseline_static(account: AccountId, num_shards: u16) -> ShardId {
    let mut z = account.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ShardId((z % num_shards.max(1) as u64) as u16)
}

/// Threshold trigger: every shard whose observed utilization exceeds
/// `threshold` sheds its most active candidates to the least utilized shard,
/// at most `bound` moves in total.
pub fn baseline_reactive(
    utils: &[FixedPoint],
    threshold: FixedPoint,
    candidates: &[Candidate],
    bound: usize,
) -> MigrationAction {
    if utils.is_empty() {
        return MigrationAction::empty();
    }
    let mut dest = 0;
    for (i, u) in utils.iter().enumerate() {
        if *u < utils[dest] {
            dest = i;
        }
    }
    let mut hot: Vec<usize> = (0..utils.len()).filter(|s| *s != dest && utils[*s] > threshold).collect();
    hot.sort_by(|a, b| utils[*b].cmp(&utils[*a]).then(a.cmp(b)));
    let mut moves = Vec::new();
    for s in hot {
        let mut from: Vec<&Candidate> = candidates.iter().filter(|c| c.shard.index() == s).collect();
        from.sort_by(|a, b| b.load.cmp(&a.load).then(a.account.cmp(&b.account)));
        for c in from {
            if moves.len() >= bound {
                break;
            }
            moves.push(Move { account: c.account, from: c.shard, to: ShardId(dest as u16) });
        }
    }
    MigrationAction { moves }
}
