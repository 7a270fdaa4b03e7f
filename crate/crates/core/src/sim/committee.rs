//! Validator committees: genesis placement, per-epoch churn and simulated votes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::fixed::FixedPoint;
use crate::safety::SafetyLimits;
use crate::types::{AccountId, BlockHeight, ShardState, Validator};

fn byzantine_fits(shard: &ShardState, limits: &SafetyLimits) -> bool {
    let total = shard.total_stake();
    let byz = shard.byzantine_stake() + FixedPoint::ONE;
    limits.stake_ok(byz, total)
}

/// Seats `per_shard` unit-stake validators on every shard; validator `i`
/// binds account `first_account + i`. `byzantine` of them are corrupted,
/// placed at random on shards that stay under the stake cap.
pub fn seat_genesis<R: Rng>(
    shards: &mut [ShardState],
    per_shard: usize,
    first_account: u64,
    byzantine: usize,
    limits: &SafetyLimits,
    rng: &mut R,
) -> Result<()> {
    let mut id = 0u32;
    for s in shards.iter_mut() {
        for _ in 0..per_shard {
            s.validators.push(Validator {
                id,
                account: AccountId(first_account + id as u64),
                stake: FixedPoint::ONE,
                byzantine: false,
                active_from: BlockHeight(0),
            });
            id += 1;
        }
    }
    for _ in 0..byzantine {
        let open: Vec<(usize, usize)> = shards
            .iter()
            .enumerate()
            .filter(|(_, s)| byzantine_fits(s, limits))
            .flat_map(|(q, s)| s.validators.iter().enumerate().filter(|(_, v)| !v.byzantine).map(move |(i, _)| (q, i)))
            .collect();
        if open.is_empty() {
            return Err(Error::config(
                "byzantine_share",
                "too many Byzantine validators to seat every committee under the stake cap",
            ));
        }
        let (q, i) = open[rng.random_range(0..open.len())];
        shards[q].validators[i].byzantine = true;
    }
    Ok(())
}

pub fn validator_count(shards: &[ShardState]) -> usize {
    shards.iter().map(|s| s.validators.len()).sum()
}

pub fn byzantine_count(shards: &[ShardState]) -> usize {
    shards.iter().flat_map(|s| &s.validators).filter(|v| v.byzantine).count()
}

/// Replaces `floor(rate * N)` validators chosen at random. Fresh validators
/// keep the seat's account and unit stake, vote from `height + sync_delay`,
/// and are Byzantine with probability `beta` while the global budget
/// `floor(beta * N)` and the per-shard stake cap allow. Returns `(old, new)` ids.
#[allow(clippy::too_many_arguments)]
pub fn churn<R: Rng>(
    shards: &mut [ShardState],
    rate: f64,
    beta: f64,
    height: BlockHeight,
    sync_delay: u64,
    next_id: &mut u32,
    limits: &SafetyLimits,
    rng: &mut R,
) -> Result<Vec<(u32, u32)>> {
    if !(0.0..=0.2).contains(&rate) {
        return Err(Error::config("churn_rate", format!("{rate} is outside [0, 0.2]")));
    }
    let seats: Vec<(usize, usize)> =
        shards.iter().enumerate().flat_map(|(q, s)| (0..s.validators.len()).map(move |i| (q, i))).collect();
    let n = seats.len();
    let replace = (rate * n as f64).floor() as usize;
    let budget = (beta * n as f64).floor() as usize;
    // partial Fisher-Yates over seat indices
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..replace {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let mut chosen: Vec<(usize, usize)> = order[..replace].iter().map(|&k| seats[k]).collect();
    chosen.sort_unstable();
    let mut out = Vec::with_capacity(replace);
    for (q, i) in chosen {
        let old = shards[q].validators[i].clone();
        shards[q].validators[i].byzantine = false;
        let wants = rng.random_bool(beta.clamp(0.0, 1.0));
        let byzantine = wants && byzantine_count(shards) < budget && byzantine_fits(&shards[q], limits);
        let fresh = Validator {
            id: *next_id,
            account: old.account,
            stake: FixedPoint::ONE,
            byzantine,
            active_from: BlockHeight(height.0 + sync_delay),
        };
        *next_id += 1;
        out.push((old.id, fresh.id));
        shards[q].validators[i] = fresh;
    }
    Ok(out)
}

/// Votes of one committee at `height`: synced honest validators always sign,
/// Byzantine ones withhold with probability `withhold`. Returns the signer
/// ids and the signed stake.
pub fn collect_votes<R: Rng>(
    validators: &[Validator],
    height: BlockHeight,
    withhold: f64,
    rng: &mut R,
) -> (Vec<u32>, FixedPoint) {
    let mut signers = Vec::with_capacity(validators.len());
    let mut signed = FixedPoint::ZERO;
    for v in validators {
        let withheld = v.byzantine && rng.random_bool(withhold);
        if v.active_from <= height && !withheld {
            signers.push(v.id);
            signed += v.stake;
        }
    }
    (signers, signed)
}
