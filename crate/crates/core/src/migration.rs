//! Migration batches: wire format, Merkle commitment, quorum stub, and the
//! submit/apply/cancel/re-anchor lifecycle with escrowed balances.
//!
//! Wire layout, big-endian: a 32-byte header
//! `source u16 | destination bitmap u32 | anchor u64 | count u16 | gas u32 |
//! nonce u32 | root commitment [u8; 8]` followed by `count` 20-byte tuples
//! `account u64 | from u16 | to u16 | tag u64`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::FixedPoint;
use crate::hash::{sha256, Digest256};
use crate::safety::SafetyLimits;
use crate::types::{AccountId, AllocationMap, BlockHeight, Move, ShardId, ShardState, Validator};

pub const GAS_BASE: u64 = 12_400;
pub const GAS_PER_MOVE: u64 = 100;
pub const HEADER_BYTES: usize = 32;
pub const MOVE_BYTES: usize = 20;
/// Blocks after the anchor within which every destination must confirm.
pub const TIMEOUT_BLOCKS: u64 = 3;
/// Shards addressable by the destination bitmap.
pub const MAX_SHARDS: u16 = 32;

pub fn batch_gas(m: usize) -> u64 {
    GAS_BASE + GAS_PER_MOVE * m as u64
}

pub fn batch_size(m: usize) -> usize {
    HEADER_BYTES + MOVE_BYTES * m
}

fn leaf_hash(m: &Move) -> Digest256 {
    sha256(&[&[0u8], &m.account.0.to_be_bytes(), &m.from.0.to_be_bytes(), &m.to.0.to_be_bytes()])
}

/// Binary Merkle root over move leaves; odd levels duplicate their last node
/// and a single leaf is its own root.
pub fn merkle_root(moves: &[Move]) -> Digest256 {
    if moves.is_empty() {
        return sha256(&[b"psap/empty-merkle"]);
    }
    let mut level: Vec<Digest256> = moves.iter().map(leaf_hash).collect();
    while level.len() > 1 {
        if level.len() % 2 == 1 {
            level.push(*level.last().expect("nonempty"));
        }
        level = level.chunks(2).map(|p| sha256(&[&[1u8], p[0].as_bytes(), p[1].as_bytes()])).collect();
    }
    level[0]
}

fn commitment(root: &Digest256) -> [u8; 8] {
    let mut out = [0u8; 8];
    out.copy_from_slice(&root.as_bytes()[..8]);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchHeader {
    pub source: ShardId,
    /// Bit `q` set when shard `q` receives at least one account.
    pub destinations: u32,
    pub anchor: BlockHeight,
    pub count: u16,
    /// Claimed gas, which must equal the linear formula for `count`.
    pub gas: u32,
    pub nonce: u32,
    pub root: [u8; 8],
}

impl BatchHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut b = [0u8; HEADER_BYTES];
        b[0..2].copy_from_slice(&self.source.0.to_be_bytes());
        b[2..6].copy_from_slice(&self.destinations.to_be_bytes());
        b[6..14].copy_from_slice(&self.anchor.0.to_be_bytes());
        b[14..16].copy_from_slice(&self.count.to_be_bytes());
        b[16..20].copy_from_slice(&self.gas.to_be_bytes());
        b[20..24].copy_from_slice(&self.nonce.to_be_bytes());
        b[24..32].copy_from_slice(&self.root);
        b
    }

    pub fn from_bytes(b: &[u8; HEADER_BYTES]) -> Self {
        let u16_at = |i: usize| u16::from_be_bytes([b[i], b[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        let mut root = [0u8; 8];
        root.copy_from_slice(&b[24..32]);
        Self {
            source: ShardId(u16_at(0)),
            destinations: u32_at(2),
            anchor: BlockHeight(u64::from_be_bytes(b[6..14].try_into().expect("8 bytes"))),
            count: u16_at(14),
            gas: u32_at(16),
            nonce: u32_at(20),
            root,
        }
    }

    pub fn id(&self) -> Digest256 {
        sha256(&[b"psap-batch", &self.to_bytes()])
    }

    pub fn destination_set(&self) -> Vec<ShardId> {
        (0..MAX_SHARDS).filter(|q| self.destinations & (1 << q) != 0).map(ShardId).collect()
    }
}

/// Stub aggregate signature: a digest binding the header to a sorted signer set.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuorumCert {
    pub signers: Vec<u32>,
    pub digest: Digest256,
}

impl QuorumCert {
    pub fn sign(header: &BatchHeader, signers: &[u32]) -> Self {
        let mut signers = signers.to_vec();
        signers.sort_unstable();
        signers.dedup();
        let digest = Self::digest(header, &signers);
        Self { signers, digest }
    }

    fn digest(header: &BatchHeader, signers: &[u32]) -> Digest256 {
        let ids: Vec<u8> = signers.iter().flat_map(|s| s.to_be_bytes()).collect();
        sha256(&[b"psap-qc", &header.to_bytes(), &ids])
    }

    /// Binding holds and the signers carry more than two thirds of `committee` stake.
    pub fn verify(&self, header: &BatchHeader, committee: &[Validator]) -> bool {
        if self.digest != Self::digest(header, &self.signers) {
            return false;
        }
        let total: FixedPoint = committee.iter().map(|v| v.stake).sum();
        let signed: FixedPoint = committee.iter().filter(|v| self.signers.binary_search(&v.id).is_ok()).map(|v| v.stake).sum();
        quorum_reached(signed, total)
    }
}

/// Strict two-thirds stake quorum on raw units.
pub fn quorum_reached(signed: FixedPoint, total: FixedPoint) -> bool {
    total > FixedPoint::ZERO && 3 * signed.raw() as i128 > 2 * total.raw() as i128
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReplayTag {
    pub batch: Digest256,
    pub nonce: u32,
    pub epoch: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MigBatch {
    pub header: BatchHeader,
    pub moves: Vec<Move>,
    pub epoch: u32,
    pub quorum: QuorumCert,
}

impl MigBatch {
    /// Builds and signs a batch; every move must leave `source`.
    pub fn build(
        moves: &[Move],
        source: ShardId,
        anchor: BlockHeight,
        nonce: u32,
        epoch: u32,
        signers: &[u32],
    ) -> Result<Self> {
        if moves.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if moves.len() > u16::MAX as usize {
            return Err(Error::Shape(format!("{} moves do not fit the count field", moves.len())));
        }
        let mut destinations = 0u32;
        for m in moves {
            if m.from != source {
                return Err(Error::Shape(format!("move of account {} does not leave shard {source}", m.account)));
            }
            if m.to.0 >= MAX_SHARDS {
                return Err(Error::Shape(format!("destination {} outside the bitmap", m.to)));
            }
            destinations |= 1 << m.to.0;
        }
        let header = BatchHeader {
            source,
            destinations,
            anchor,
            count: moves.len() as u16,
            gas: batch_gas(moves.len()) as u32,
            nonce,
            root: commitment(&merkle_root(moves)),
        };
        let quorum = QuorumCert::sign(&header, signers);
        Ok(Self { header, moves: moves.to_vec(), epoch, quorum })
    }

    pub fn id(&self) -> Digest256 {
        self.header.id()
    }

    pub fn tag(&self) -> ReplayTag {
        ReplayTag { batch: self.id(), nonce: self.header.nonce, epoch: self.epoch }
    }

    fn move_tag(&self) -> u64 {
        ((self.epoch as u64) << 32) | self.header.nonce as u64
    }

    pub fn gas(&self) -> u64 {
        self.header.gas as u64
    }

    pub fn size(&self) -> usize {
        batch_size(self.moves.len())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size());
        out.extend_from_slice(&self.header.to_bytes());
        let tag = self.move_tag();
        for m in &self.moves {
            out.extend_from_slice(&m.account.0.to_be_bytes());
            out.extend_from_slice(&m.from.0.to_be_bytes());
            out.extend_from_slice(&m.to.0.to_be_bytes());
            out.extend_from_slice(&tag.to_be_bytes());
        }
        out
    }

    /// Parses the wire form; the quorum certificate travels separately.
    pub fn from_bytes(bytes: &[u8], quorum: QuorumCert) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || (bytes.len() - HEADER_BYTES) % MOVE_BYTES != 0 {
            return Err(Error::Shape(format!("{} bytes is not a batch", bytes.len())));
        }
        let header = BatchHeader::from_bytes(bytes[..HEADER_BYTES].try_into().expect("32 bytes"));
        let mut moves = Vec::new();
        let mut tag = None;
        for t in bytes[HEADER_BYTES..].chunks(MOVE_BYTES) {
            moves.push(Move {
                account: AccountId(u64::from_be_bytes(t[0..8].try_into().expect("8 bytes"))),
                from: ShardId(u16::from_be_bytes([t[8], t[9]])),
                to: ShardId(u16::from_be_bytes([t[10], t[11]])),
            });
            let this = u64::from_be_bytes(t[12..20].try_into().expect("8 bytes"));
            if tag.is_some_and(|x| x != this) || this as u32 != header.nonce {
                return Err(Error::Shape("inconsistent move tags".into()));
            }
            tag = Some(this);
        }
        let epoch = tag.map_or(0, |t| (t >> 32) as u32);
        Ok(Self { header, moves, epoch, quorum })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Destination height has not passed the anchor.
    Early,
    Sig,
    Gas,
    Root,
    Stake,
}

/// Destination-side re-check: signature, gas, Merkle root, then stake.
pub fn verify(
    batch: &MigBatch,
    dest_height: BlockHeight,
    shards: &[ShardState],
    limits: &SafetyLimits,
    block_gas: u64,
) -> std::result::Result<(), RejectReason> {
    let h = &batch.header;
    if dest_height.0 < h.anchor.0 + 1 {
        return Err(RejectReason::Early);
    }
    let committee = shards.get(h.source.index()).map_or(&[][..], |s| &s.validators[..]);
    if !batch.quorum.verify(h, committee) {
        return Err(RejectReason::Sig);
    }
    if h.gas as u64 != batch_gas(h.count as usize) || h.gas as u64 > limits.gas_limit(block_gas) {
        return Err(RejectReason::Gas);
    }
    if h.count as usize != batch.moves.len() || h.root != commitment(&merkle_root(&batch.moves)) {
        return Err(RejectReason::Root);
    }
    let mut byz_in = vec![FixedPoint::ZERO; shards.len()];
    let mut honest_out = vec![FixedPoint::ZERO; shards.len()];
    let validators: BTreeMap<AccountId, &Validator> =
        shards.iter().flat_map(|s| s.validators.iter().map(|v| (v.account, v))).collect();
    for m in &batch.moves {
        if m.to.index() >= shards.len() || m.from != h.source {
            return Err(RejectReason::Root);
        }
        if let Some(v) = validators.get(&m.account) {
            if v.byzantine {
                byz_in[m.to.index()] += v.stake;
            } else {
                honest_out[m.from.index()] += v.stake;
            }
        }
    }
    for (q, s) in shards.iter().enumerate() {
        let b = s.byzantine_stake() + byz_in[q];
        let t = s.total_stake() - honest_out[q] + byz_in[q];
        if !limits.stake_ok(b, t) {
            return Err(RejectReason::Stake);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum BatchStatus {
    Proposed,
    Submitted { at: BlockHeight },
    Applied { at: BlockHeight },
    Cancelled { at: BlockHeight },
    Reanchored { at: BlockHeight, successor: Digest256 },
}

impl BatchStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::Applied { .. } | Self::Cancelled { .. } | Self::Reanchored { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MigrationEvent {
    Submitted { batch: Digest256, height: BlockHeight, moves: usize },
    Confirmed { batch: Digest256, shard: ShardId, height: BlockHeight },
    Applied { batch: Digest256, height: BlockHeight, moves: Vec<Move> },
    /// Compensating receipt: escrow returned to the source.
    Cancelled { batch: Digest256, height: BlockHeight, refunded: u128 },
    Reanchored { batch: Digest256, successor: Digest256, height: BlockHeight },
    DuplicateApply { batch: Digest256 },
}

#[derive(Clone, Debug)]
struct Tracked {
    batch: MigBatch,
    status: BatchStatus,
    confirmed: BTreeSet<ShardId>,
    escrow: u128,
}

/// Owns in-flight batches, account balances, escrow and replay tags.
#[derive(Clone, Debug)]
pub struct MigrationEngine {
    batches: BTreeMap<Digest256, Tracked>,
    balances: Vec<u64>,
    shard_totals: Vec<u128>,
    escrow: u128,
    applied: HashSet<ReplayTag>,
    locked: HashSet<AccountId>,
    next_nonce: u32,
    pub duplicate_applies: u64,
    events: Vec<MigrationEvent>,
}

impl MigrationEngine {
    pub fn new(alloc: &AllocationMap, balances: Vec<u64>) -> Self {
        assert_eq!(balances.len(), alloc.len());
        let mut shard_totals = vec![0u128; alloc.num_shards() as usize];
        for (a, s) in alloc.iter() {
            shard_totals[s.index()] += balances[a.index()] as u128;
        }
        Self {
            batches: BTreeMap::new(),
            balances,
            shard_totals,
            escrow: 0,
            applied: HashSet::new(),
            locked: HashSet::new(),
            next_nonce: 0,
            duplicate_applies: 0,
            events: Vec::new(),
        }
    }

    pub fn next_nonce(&mut self) -> u32 {
        let n = self.next_nonce;
        self.next_nonce = self.next_nonce.wrapping_add(1);
        n
    }

    pub fn balance(&self, a: AccountId) -> u64 {
        self.balances[a.index()]
    }

    pub fn shard_totals(&self) -> &[u128] {
        &self.shard_totals
    }

    pub fn escrow(&self) -> u128 {
        self.escrow
    }

    /// Shard totals plus escrow; constant over the engine's life.
    pub fn total_balance(&self) -> u128 {
        self.shard_totals.iter().sum::<u128>() + self.escrow
    }

    pub fn is_locked(&self, a: AccountId) -> bool {
        self.locked.contains(&a)
    }

    pub fn status(&self, id: &Digest256) -> Option<&BatchStatus> {
        self.batches.get(id).map(|t| &t.status)
    }

    pub fn batch(&self, id: &Digest256) -> Option<&MigBatch> {
        self.batches.get(id).map(|t| &t.batch)
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &MigBatch> {
        self.batches.values().filter(|t| !t.status.is_terminal()).map(|t| &t.batch)
    }

    pub fn take_events(&mut self) -> Vec<MigrationEvent> {
        std::mem::take(&mut self.events)
    }

    /// Registers a freshly built batch.
    pub fn propose(&mut self, batch: MigBatch) -> Result<Digest256> {
        let id = batch.id();
        if self.batches.contains_key(&id) {
            return Err(Error::Shape(format!("batch {id:?} already known")));
        }
        if let Some(m) = batch.moves.iter().find(|m| self.locked.contains(&m.account)) {
            return Err(Error::Shape(format!("account {} is already in flight", m.account)));
        }
        for m in &batch.moves {
            self.locked.insert(m.account);
        }
        self.batches.insert(id, Tracked { batch, status: BatchStatus::Proposed, confirmed: BTreeSet::new(), escrow: 0 });
        Ok(id)
    }

    /// Includes the batch at the source and escrows the moving balances.
    pub fn submit(&mut self, id: &Digest256, height: BlockHeight) -> Result<()> {
        let t = self.batches.get_mut(id).ok_or_else(|| Error::Shape("unknown batch".into()))?;
        if t.status != BatchStatus::Proposed {
            return Err(Error::Shape(format!("submit from {:?}", t.status)));
        }
        let mut escrow = 0u128;
        for m in &t.batch.moves {
            let b = self.balances[m.account.index()] as u128;
            self.shard_totals[m.from.index()] -= b;
            escrow += b;
        }
        t.escrow = escrow;
        self.escrow += escrow;
        t.status = BatchStatus::Submitted { at: height };
        self.events.push(MigrationEvent::Submitted { batch: *id, height, moves: t.batch.moves.len() });
        Ok(())
    }

    /// Records a destination's `Apply_Mig`; late or foreign confirmations are ignored.
    pub fn confirm(&mut self, id: &Digest256, shard: ShardId, height: BlockHeight) -> bool {
        let Some(t) = self.batches.get_mut(id) else { return false };
        let BatchStatus::Submitted { .. } = t.status else { return false };
        let deadline = t.batch.header.anchor.0 + TIMEOUT_BLOCKS;
        if height.0 > deadline || t.batch.header.destinations & (1 << shard.0) == 0 {
            return false;
        }
        if t.confirmed.insert(shard) {
            self.events.push(MigrationEvent::Confirmed { batch: *id, shard, height });
        }
        true
    }

    /// End-of-block resolution: apply fully confirmed batches, cancel expired ones.
    pub fn resolve(&mut self, height: BlockHeight, alloc: &mut AllocationMap) -> Vec<Digest256> {
        let ids: Vec<Digest256> = self.batches.keys().copied().collect();
        let mut applied = Vec::new();
        for id in ids {
            let t = &self.batches[&id];
            if !matches!(t.status, BatchStatus::Submitted { .. }) {
                continue;
            }
            let all = t.batch.header.destination_set().iter().all(|q| t.confirmed.contains(q));
            if all {
                self.apply(&id, height, alloc);
                applied.push(id);
            } else if height.0 >= t.batch.header.anchor.0 + TIMEOUT_BLOCKS {
                self.cancel(&id, height);
            }
        }
        applied
    }

    fn apply(&mut self, id: &Digest256, height: BlockHeight, alloc: &mut AllocationMap) {
        let t = self.batches.get_mut(id).expect("tracked");
        let tag = t.batch.tag();
        if !self.applied.insert(tag) {
            self.duplicate_applies += 1;
            self.events.push(MigrationEvent::DuplicateApply { batch: *id });
            return;
        }
        for m in &t.batch.moves {
            let b = self.balances[m.account.index()] as u128;
            self.shard_totals[m.to.index()] += b;
            alloc.relocate(m.account, m.to, height);
            self.locked.remove(&m.account);
        }
        self.escrow -= t.escrow;
        t.escrow = 0;
        t.status = BatchStatus::Applied { at: height };
        self.events.push(MigrationEvent::Applied { batch: *id, height, moves: t.batch.moves.clone() });
    }

    fn cancel(&mut self, id: &Digest256, height: BlockHeight) {
        let t = self.batches.get_mut(id).expect("tracked");
        let refunded = t.escrow;
        if matches!(t.status, BatchStatus::Submitted { .. }) {
            for m in &t.batch.moves {
                self.shard_totals[m.from.index()] += self.balances[m.account.index()] as u128;
            }
            self.escrow -= refunded;
            t.escrow = 0;
        }
        for m in &t.batch.moves {
            self.locked.remove(&m.account);
        }
        t.status = BatchStatus::Cancelled { at: height };
        self.events.push(MigrationEvent::Cancelled { batch: *id, height, refunded });
    }

    /// Replays `Apply_Mig` for an already applied batch; a no-op that counts the duplicate.
    pub fn replay_apply(&mut self, id: &Digest256) -> bool {
        let Some(t) = self.batches.get(id) else { return false };
        if !matches!(t.status, BatchStatus::Applied { .. }) || !self.applied.contains(&t.batch.tag()) {
            return false;
        }
        self.duplicate_applies += 1;
        self.events.push(MigrationEvent::DuplicateApply { batch: *id });
        true
    }

    /// Handles a source-chain reorganization of `depth` blocks. Deeper than one
    /// block invalidates the certificate: the batch is retired, escrow refunded,
    /// and a successor anchored at `new_head` is proposed and returned.
    pub fn reanchor(
        &mut self,
        id: &Digest256,
        depth: u64,
        new_head: BlockHeight,
        signers: &[u32],
    ) -> Result<Option<Digest256>> {
        let Some(t) = self.batches.get(id) else { return Ok(None) };
        if depth <= 1 || t.status.is_terminal() {
            return Ok(None);
        }
        let old = t.batch.clone();
        let nonce = self.next_nonce();
        let fresh = MigBatch::build(&old.moves, old.header.source, new_head, nonce, old.epoch, signers)?;
        let successor = fresh.id();
        let t = self.batches.get_mut(id).expect("tracked");
        if matches!(t.status, BatchStatus::Submitted { .. }) {
            for m in &t.batch.moves {
                self.shard_totals[m.from.index()] += self.balances[m.account.index()] as u128;
            }
            self.escrow -= t.escrow;
            t.escrow = 0;
        }
        t.status = BatchStatus::Reanchored { at: new_head, successor };
        for m in &old.moves {
            self.locked.remove(&m.account);
        }
        self.events.push(MigrationEvent::Reanchored { batch: *id, successor, height: new_head });
        self.propose(fresh)?;
        Ok(Some(successor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(a: u64, from: u16, to: u16) -> Move {
        Move { account: AccountId(a), from: ShardId(from), to: ShardId(to) }
    }

    fn committee() -> Vec<Validator> {
        (0..4)
            .map(|i| Validator {
                id: i,
                account: AccountId(1000 + i as u64),
                stake: FixedPoint::ONE,
                byzantine: false,
                active_from: BlockHeight(0),
            })
            .collect()
    }

    fn shards() -> Vec<ShardState> {
        let mut s: Vec<ShardState> = (0..3).map(|q| ShardState::new(ShardId(q), 1000, 1_000_000, 4)).collect();
        s[0].validators = committee();
        s
    }

    #[test]
    fn formulas_match_examples() {
        assert_eq!((batch_size(1), batch_gas(1)), (52, 12_500));
        assert_eq!((batch_size(100), batch_gas(100)), (2_032, 22_400));
        let moves: Vec<Move> = (0..100).map(|a| mv(a, 0, 1 + (a % 2) as u16)).collect();
        let b = MigBatch::build(&moves, ShardId(0), BlockHeight(5), 0, 0, &[0, 1, 2]).unwrap();
        assert_eq!(b.to_bytes().len(), 2_032);
        assert_eq!(b.gas(), 22_400);
    }

    #[test]
    fn single_leaf_root_is_leaf_hash() {
        let m = mv(7, 0, 1);
        assert_eq!(merkle_root(&[m]), leaf_hash(&m));
        let three = [mv(1, 0, 1), mv(2, 0, 1), mv(3, 0, 1)];
        let l: Vec<Digest256> = three.iter().map(leaf_hash).collect();
        let n = |a: &Digest256, b: &Digest256| sha256(&[&[1u8], a.as_bytes(), b.as_bytes()]);
        assert_eq!(merkle_root(&three), n(&n(&l[0], &l[1]), &n(&l[2], &l[2])));
    }

    #[test]
    fn wire_round_trip() {
        let moves = [mv(3, 2, 0), mv(9, 2, 1)];
        let b = MigBatch::build(&moves, ShardId(2), BlockHeight(77), 5, 3, &[1, 0, 2]).unwrap();
        let bytes = b.to_bytes();
        assert_eq!(MigBatch::from_bytes(&bytes, b.quorum.clone()).unwrap(), b);
        assert_eq!(b.header.destination_set(), vec![ShardId(0), ShardId(1)]);
        assert_eq!(b.quorum.signers, vec![0, 1, 2]);
        assert!(matches!(MigBatch::build(&[], ShardId(0), BlockHeight(0), 0, 0, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn verify_checks_in_order() {
        let s = shards();
        let l = SafetyLimits::default();
        let b = MigBatch::build(&[mv(1, 0, 1), mv(2, 0, 2)], ShardId(0), BlockHeight(10), 0, 0, &[0, 1, 2]).unwrap();
        assert_eq!(verify(&b, BlockHeight(11), &s, &l, 1_000_000), Ok(()));
        assert_eq!(verify(&b, BlockHeight(10), &s, &l, 1_000_000), Err(RejectReason::Early));
        let weak = MigBatch::build(&[mv(1, 0, 1)], ShardId(0), BlockHeight(10), 0, 0, &[0, 1]).unwrap();
        assert_eq!(verify(&weak, BlockHeight(11), &s, &l, 1_000_000), Err(RejectReason::Sig));
        let mut tampered = b.clone();
        tampered.moves[1].to = ShardId(1);
        assert_eq!(verify(&tampered, BlockHeight(11), &s, &l, 1_000_000), Err(RejectReason::Root));
        // 12_400 + 100 m > 20_000 once m >= 77
        let big: Vec<Move> = (0..77).map(|a| mv(a, 0, 1)).collect();
        let g = MigBatch::build(&big, ShardId(0), BlockHeight(10), 0, 0, &[0, 1, 2]).unwrap();
        assert_eq!(verify(&g, BlockHeight(11), &s, &l, 1_000_000), Err(RejectReason::Gas));
        let ok: Vec<Move> = (0..76).map(|a| mv(a, 0, 1)).collect();
        let g = MigBatch::build(&ok, ShardId(0), BlockHeight(10), 0, 0, &[0, 1, 2]).unwrap();
        assert_eq!(verify(&g, BlockHeight(11), &s, &l, 1_000_000), Ok(()));
    }

    fn setup() -> (MigrationEngine, AllocationMap) {
        let alloc = AllocationMap::from_fn(10, 3, |a| ShardId((a.0 % 3) as u16));
        let e = MigrationEngine::new(&alloc, (0..10).map(|a| 100 + a).collect());
        (e, alloc)
    }

    #[test]
    fn happy_path_applies_at_anchor_plus_one() {
        let (mut e, mut alloc) = setup();
        let total = e.total_balance();
        let b = MigBatch::build(&[mv(0, 0, 1), mv(3, 0, 2)], ShardId(0), BlockHeight(5), 0, 0, &[]).unwrap();
        let id = e.propose(b).unwrap();
        e.submit(&id, BlockHeight(6)).unwrap();
        assert_eq!(e.total_balance(), total);
        assert!(e.confirm(&id, ShardId(1), BlockHeight(6)));
        assert!(e.confirm(&id, ShardId(2), BlockHeight(6)));
        assert_eq!(e.resolve(BlockHeight(6), &mut alloc), vec![id]);
        assert_eq!(alloc.shard_of(AccountId(3)), ShardId(2));
        assert_eq!(e.total_balance(), total);
        assert_eq!(e.escrow(), 0);
        let before = alloc.clone();
        assert!(e.replay_apply(&id));
        assert_eq!(e.duplicate_applies, 1);
        assert_eq!(alloc, before);
    }

    #[test]
    fn silent_destination_cancels() {
        let (mut e, mut alloc) = setup();
        let before = alloc.clone();
        let totals = e.shard_totals().to_vec();
        let b = MigBatch::build(&[mv(0, 0, 1), mv(3, 0, 2)], ShardId(0), BlockHeight(5), 0, 0, &[]).unwrap();
        let id = e.propose(b).unwrap();
        e.submit(&id, BlockHeight(6)).unwrap();
        e.confirm(&id, ShardId(1), BlockHeight(6));
        for h in 6..=7 {
            assert!(e.resolve(BlockHeight(h), &mut alloc).is_empty());
            assert!(matches!(e.status(&id), Some(BatchStatus::Submitted { .. })));
        }
        e.resolve(BlockHeight(8), &mut alloc);
        assert_eq!(e.status(&id), Some(&BatchStatus::Cancelled { at: BlockHeight(8) }));
        assert_eq!(alloc, before);
        assert_eq!(e.shard_totals(), &totals[..]);
        assert!(!e.is_locked(AccountId(0)));
        assert!(!e.confirm(&id, ShardId(2), BlockHeight(8)));
    }

    #[test]
    fn reanchor_threshold() {
        let (mut e, _) = setup();
        let b = MigBatch::build(&[mv(0, 0, 1)], ShardId(0), BlockHeight(5), 0, 0, &[]).unwrap();
        let id = e.propose(b).unwrap();
        assert_eq!(e.reanchor(&id, 1, BlockHeight(5), &[]).unwrap(), None);
        let succ = e.reanchor(&id, 2, BlockHeight(6), &[]).unwrap().unwrap();
        assert!(matches!(e.status(&id), Some(BatchStatus::Reanchored { .. })));
        assert_eq!(e.batch(&succ).unwrap().header.anchor, BlockHeight(6));
        assert!(e.is_locked(AccountId(0)));
    }
}
