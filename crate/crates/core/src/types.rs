//! Ledger-level domain types: identifiers, shards, transactions, the
//! account-to-shard allocation map.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fixed::FixedPoint;

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident, $inner:ty) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(ShardId, u16);
id_type!(AccountId, u64);
id_type!(BlockHeight, u64);
id_type!(EpochId, u64);

impl ShardId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl AccountId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl BlockHeight {
    pub fn next(self) -> Self {
        BlockHeight(self.0 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub src: AccountId,
    pub dst: AccountId,
    pub value: FixedPoint,
    pub gas: u64,
    pub arrival_block: BlockHeight,
}

impl Transaction {
    pub fn is_cross_shard(&self, alloc: &AllocationMap) -> bool {
        alloc.shard_of(self.src) != alloc.shard_of(self.dst)
    }
}

/// A committee member. A validator's shard is the shard of its bound account,
/// so relocating the account relocates the stake.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validator {
    pub id: u32,
    pub account: AccountId,
    pub stake: FixedPoint,
    pub byzantine: bool,
    /// Height from which the validator votes (fresh validators sync first).
    pub active_from: BlockHeight,
}

/// Per-shard executed load, one entry per block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadSample {
    pub executed: u32,
    pub gas: u64,
}

#[derive(Clone, Debug)]
pub struct ShardState {
    pub id: ShardId,
    /// Transactions per block.
    pub capacity: u32,
    pub gas_limit: u64,
    pub queue: VecDeque<Transaction>,
    pub validators: Vec<Validator>,
    history: VecDeque<LoadSample>,
    history_len: usize,
}

impl ShardState {
    pub fn new(id: ShardId, capacity: u32, gas_limit: u64, history_len: usize) -> Self {
        Self {
            id,
            capacity,
            gas_limit,
            queue: VecDeque::new(),
            validators: Vec::new(),
            history: VecDeque::with_capacity(history_len.max(1)),
            history_len: history_len.max(1),
        }
    }

    pub fn record(&mut self, sample: LoadSample) {
        debug_assert!(sample.executed <= self.capacity);
        if self.history.len() == self.history_len {
            self.history.pop_front();
        }
        self.history.push_back(sample);
    }

    pub fn history(&self) -> impl ExactSizeIterator<Item = &LoadSample> {
        self.history.iter()
    }

    pub fn last_sample(&self) -> LoadSample {
        self.history.back().copied().unwrap_or_default()
    }

    pub fn total_stake(&self) -> FixedPoint {
        self.validators.iter().map(|v| v.stake).sum()
    }

    pub fn byzantine_stake(&self) -> FixedPoint {
        self.validators.iter().filter(|v| v.byzantine).map(|v| v.stake).sum()
    }

    /// Byzantine share of this shard's stake; zero for an empty committee.
    pub fn byzantine_fraction(&self) -> FixedPoint {
        let total = self.total_stake();
        if total == FixedPoint::ZERO {
            FixedPoint::ZERO
        } else {
            self.byzantine_stake() / total
        }
    }

    /// Stake shares per validator, summing to one within one ulp per member.
    pub fn stake_shares(&self) -> Vec<FixedPoint> {
        let total = self.total_stake();
        self.validators.iter().map(|v| v.stake / total).collect()
    }
}

/// Account-to-shard mapping with per-account last-move heights.
///
/// Accounts are dense ids `0..len`; the domain never changes size after
/// construction, which is what makes conservation checkable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationMap {
    mapping: Vec<ShardId>,
    last_moved: Vec<Option<BlockHeight>>,
    pub epoch: EpochId,
    num_shards: u16,
}

impl AllocationMap {
    pub fn new(mapping: Vec<ShardId>, num_shards: u16) -> Self {
        assert!(num_shards >= 1);
        assert!(mapping.iter().all(|s| s.0 < num_shards), "shard id out of range");
        let n = mapping.len();
        Self { mapping, last_moved: vec![None; n], epoch: EpochId(0), num_shards }
    }

    pub fn from_fn(num_accounts: usize, num_shards: u16, f: impl Fn(AccountId) -> ShardId) -> Self {
        Self::new((0..num_accounts as u64).map(|a| f(AccountId(a))).collect(), num_shards)
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn num_shards(&self) -> u16 {
        self.num_shards
    }

    pub fn shard_of(&self, account: AccountId) -> ShardId {
        self.mapping[account.index()]
    }

    pub fn last_moved(&self, account: AccountId) -> Option<BlockHeight> {
        self.last_moved[account.index()]
    }

    /// True when `account` has not moved within the last `cooldown` blocks.
    pub fn cooled_down(&self, account: AccountId, now: BlockHeight, cooldown: u64) -> bool {
        match self.last_moved[account.index()] {
            None => true,
            Some(h) => now.0 >= h.0 + cooldown,
        }
    }

    pub fn relocate(&mut self, account: AccountId, to: ShardId, at: BlockHeight) {
        assert!(to.0 < self.num_shards);
        self.mapping[account.index()] = to;
        self.last_moved[account.index()] = Some(at);
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_shards as usize];
        for s in &self.mapping {
            c[s.index()] += 1;
        }
        c
    }

    pub fn accounts_in(&self, shard: ShardId) -> impl Iterator<Item = AccountId> + '_ {
        self.mapping
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == shard)
            .map(|(i, _)| AccountId(i as u64))
    }

    pub fn iter(&self) -> impl Iterator<Item = (AccountId, ShardId)> + '_ {
        self.mapping.iter().enumerate().map(|(i, s)| (AccountId(i as u64), *s))
    }
}

/// Per-shard values at one height.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoadVector(pub Vec<FixedPoint>);

impl LoadVector {
    pub fn from_f64(values: &[f64]) -> Self {
        Self(values.iter().map(|v| FixedPoint::from_f64(*v)).collect())
    }

    pub fn from_counts(values: &[u32]) -> Self {
        Self(values.iter().map(|v| FixedPoint::from_int(*v as i64)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.to_f64()).collect()
    }

    pub fn sum(&self) -> FixedPoint {
        self.0.iter().copied().sum()
    }
}

/// One account relocation `from -> to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Move {
    pub account: AccountId,
    pub from: ShardId,
    pub to: ShardId,
}

/// Upper bound on moves in one proposal.
pub const MAX_MOVES: usize = 100;

/// A proposed set of account moves; order is the proposer's preference.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigrationAction {
    pub moves: Vec<Move>,
}

impl MigrationAction {
    /// Checks distinct accounts, `from != to` and the size bound.
    pub fn new(moves: Vec<Move>) -> crate::Result<Self> {
        if moves.len() > MAX_MOVES {
            return Err(crate::Error::Shape(format!("{} moves exceed the bound of {MAX_MOVES}", moves.len())));
        }
        let mut seen = std::collections::HashSet::with_capacity(moves.len());
        for m in &moves {
            if m.from == m.to {
                return Err(crate::Error::Shape(format!("account {} moves to its own shard", m.account)));
            }
            if !seen.insert(m.account) {
                return Err(crate::Error::Shape(format!("account {} appears twice", m.account)));
            }
        }
        Ok(Self { moves })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.moves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stake_shares_sum_to_one() {
        let mut s = ShardState::new(ShardId(0), 1000, 1_000_000, 4);
        for (i, stake) in [3.0, 5.0, 7.0].into_iter().enumerate() {
            s.validators.push(Validator {
                id: i as u32,
                account: AccountId(i as u64),
                stake: FixedPoint::from_f64(stake),
                byzantine: i == 0,
                active_from: BlockHeight(0),
            });
        }
        let sum: FixedPoint = s.stake_shares().into_iter().sum();
        assert!((sum - FixedPoint::ONE).abs().raw() <= 3);
        assert_eq!(s.byzantine_fraction(), FixedPoint::from_ratio(3, 15).unwrap());
    }

    #[test]
    fn history_ring_is_bounded() {
        let mut s = ShardState::new(ShardId(1), 10, 100, 3);
        for i in 0..5 {
            s.record(LoadSample { executed: i, gas: 0 });
        }
        let got: Vec<u32> = s.history().map(|h| h.executed).collect();
        assert_eq!(got, vec![2, 3, 4]);
    }

    #[test]
    fn cooldown_window() {
        let mut m = AllocationMap::from_fn(4, 2, |a| ShardId((a.0 % 2) as u16));
        assert!(m.cooled_down(AccountId(1), BlockHeight(0), 10));
        m.relocate(AccountId(1), ShardId(0), BlockHeight(5));
        assert!(!m.cooled_down(AccountId(1), BlockHeight(14), 10));
        assert!(m.cooled_down(AccountId(1), BlockHeight(15), 10));
        assert_eq!(m.counts(), vec![3, 1]);
    }
}
