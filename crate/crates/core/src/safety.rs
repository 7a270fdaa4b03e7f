//! Deterministic pre-commit filter on proposed migrations.
//!
//! Pruning runs stage by stage in a fixed order (cooldown, epoch cap, move
//! cap, stake, utilization, gas). Each stage removes the worst offending move
//! until its constraint holds; ties fall to the larger marginal gas, then the
//! higher account id. Every projection is conservative in the moves it
//! counts, so removing a move never breaks a constraint that held.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixed::FixedPoint;
use crate::migration::{batch_gas, GAS_BASE};
use crate::twf::ForecastBundle;
use crate::types::{AccountId, AllocationMap, BlockHeight, MigrationAction, Move, ShardState, MAX_MOVES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyLimits {
    /// Byzantine stake share every shard must stay strictly below.
    pub byz_cap: f64,
    /// Migration gas per block as a fraction of the block gas limit.
    pub gas_cap: f64,
    /// Moves per block as a fraction of all accounts.
    pub move_cap: f64,
    /// Hedged post-move utilization bound of a destination.
    pub util_cap: f64,
    /// Moves per epoch as a fraction of all accounts.
    pub epoch_move_cap: f64,
    /// Minimum safety score for an action to commit.
    pub score_threshold: f64,
    /// Blocks an account must wait between moves.
    pub cooldown: u64,
}

impl Default for SafetyLimits {
    fn default() -> Self {
        Self {
            byz_cap: 1.0 / 3.0,
            gas_cap: 0.02,
            move_cap: 0.005,
            util_cap: 0.75,
            epoch_move_cap: 0.20,
            score_threshold: 0.82,
            cooldown: 50,
        }
    }
}

impl SafetyLimits {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("byz_cap", self.byz_cap),
            ("gas_cap", self.gas_cap),
            ("move_cap", self.move_cap),
            ("util_cap", self.util_cap),
            ("epoch_move_cap", self.epoch_move_cap),
            ("score_threshold", self.score_threshold),
        ];
        for (k, v) in fields {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("limits.{k}"), format!("{v} is outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn gas_limit(&self, block_gas: u64) -> u64 {
        (self.gas_cap * block_gas as f64).floor() as u64
    }

    pub fn move_limit(&self, accounts: usize) -> usize {
        (self.move_cap * accounts as f64).floor() as usize
    }

    pub fn epoch_limit(&self, accounts: usize) -> usize {
        (self.epoch_move_cap * accounts as f64).floor() as usize
    }

    /// Strict `byzantine / total < byz_cap` on raw stake units.
    pub fn stake_ok(&self, byzantine: FixedPoint, total: FixedPoint) -> bool {
        if byzantine.raw() <= 0 {
            return true;
        }
        (byzantine.raw() as f64) < self.byz_cap * total.raw() as f64
    }

    fn threshold(&self) -> FixedPoint {
        FixedPoint::from_f64(self.score_threshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    Cooldown,
    EpochCap,
    MoveCap,
    Stake,
    Util,
    Gas,
    Score,
}

impl PruneReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cooldown => "cooldown",
            Self::EpochCap => "epoch_cap",
            Self::MoveCap => "move_cap",
            Self::Stake => "stake",
            Self::Util => "util",
            Self::Gas => "gas",
            Self::Score => "score",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedMove {
    #[serde(flatten)]
    pub mv: Move,
    pub reason: PruneReason,
}

/// Post-move state of a set of moves.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projection {
    pub moves: usize,
    pub migration_gas: u64,
    /// Byzantine stake fraction per shard after the moves.
    pub stake_fraction: Vec<FixedPoint>,
    /// Hedged utilization per shard after incoming moves.
    pub utilization: Vec<FixedPoint>,
}

/// Per-constraint normalized margins; 1 is far from the bound, 0 is at it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Margins {
    pub gas: FixedPoint,
    pub moves: FixedPoint,
    pub epoch: FixedPoint,
    pub stake: FixedPoint,
    pub util: FixedPoint,
}

impl Margins {
    pub fn min(&self) -> FixedPoint {
        [self.gas, self.moves, self.epoch, self.stake, self.util].into_iter().min().unwrap_or(FixedPoint::ONE)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateVerdict {
    /// Surviving moves in proposal order.
    pub accepted: Vec<Move>,
    /// Removed moves in prune order.
    pub pruned: Vec<PrunedMove>,
    pub score: FixedPoint,
    pub margins: Margins,
    pub projection: Projection,
}

impl GateVerdict {
    pub fn frozen(&self) -> bool {
        self.pruned.iter().any(|p| p.reason == PruneReason::Score)
    }

    pub fn reason_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for p in &self.pruned {
            *out.entry(p.reason.as_str()).or_insert(0) += 1;
        }
        out
    }
}

/// Read-only snapshot the gate evaluates against.
#[derive(Clone, Copy, Debug)]
pub struct GateInput<'a> {
    pub height: BlockHeight,
    pub shards: &'a [ShardState],
    pub forecast: &'a ForecastBundle,
    pub alloc: &'a AllocationMap,
    /// Recent per-account load, indexed by account id.
    pub account_load: &'a [FixedPoint],
    /// Moves already committed in the current epoch.
    pub epoch_moves: usize,
    pub block_gas: u64,
}

struct Context<'a> {
    input: GateInput<'a>,
    limits: &'a SafetyLimits,
    /// Hedged horizon-mean utilization before any move.
    base_util: Vec<FixedPoint>,
    byz: Vec<FixedPoint>,
    total: Vec<FixedPoint>,
    validators: HashMap<AccountId, (FixedPoint, bool)>,
}

#[derive(Default)]
struct Tally {
    incoming: Vec<FixedPoint>,
    byz_in: Vec<FixedPoint>,
    honest_out: Vec<FixedPoint>,
    per_source: BTreeMap<u16, usize>,
}

impl<'a> Context<'a> {
    fn new(input: GateInput<'a>, limits: &'a SafetyLimits) -> Self {
        let hedged = input.forecast.hedged_mean();
        let base_util = input
            .shards
            .iter()
            .map(|s| hedged.0[s.id.index()].saturating_div(FixedPoint::from_int(s.capacity.max(1) as i64)))
            .collect();
        let validators = input
            .shards
            .iter()
            .flat_map(|s| s.validators.iter().map(|v| (v.account, (v.stake, v.byzantine))))
            .collect();
        Self {
            input,
            limits,
            base_util,
            byz: input.shards.iter().map(|s| s.byzantine_stake()).collect(),
            total: input.shards.iter().map(|s| s.total_stake()).collect(),
            validators,
        }
    }

    fn k(&self) -> usize {
        self.input.shards.len()
    }

    fn load(&self, a: AccountId) -> FixedPoint {
        self.input.account_load.get(a.index()).copied().unwrap_or(FixedPoint::ZERO)
    }

    fn capacity(&self, q: usize) -> FixedPoint {
        FixedPoint::from_int(self.input.shards[q].capacity.max(1) as i64)
    }

    fn tally(&self, moves: &[Move]) -> Tally {
        let k = self.k();
        let mut t = Tally {
            incoming: vec![FixedPoint::ZERO; k],
            byz_in: vec![FixedPoint::ZERO; k],
            honest_out: vec![FixedPoint::ZERO; k],
            per_source: BTreeMap::new(),
        };
        for m in moves {
            t.incoming[m.to.index()] += self.load(m.account);
            if let Some(&(stake, byz)) = self.validators.get(&m.account) {
                if byz {
                    t.byz_in[m.to.index()] += stake;
                } else {
                    t.honest_out[m.from.index()] += stake;
                }
            }
            *t.per_source.entry(m.from.0).or_insert(0) += 1;
        }
        t
    }

    fn post_stake(&self, t: &Tally, q: usize) -> (FixedPoint, FixedPoint) {
        (self.byz[q] + t.byz_in[q], self.total[q] - t.honest_out[q] + t.byz_in[q])
    }

    fn stake_fraction(&self, t: &Tally, q: usize) -> FixedPoint {
        let (b, tot) = self.post_stake(t, q);
        if b <= FixedPoint::ZERO {
            FixedPoint::ZERO
        } else if tot <= FixedPoint::ZERO {
            FixedPoint::ONE
        } else {
            b / tot
        }
    }

    fn current_fraction(&self, q: usize) -> FixedPoint {
        if self.total[q] <= FixedPoint::ZERO {
            FixedPoint::ZERO
        } else {
            self.byz[q] / self.total[q]
        }
    }

    fn post_util(&self, t: &Tally, q: usize) -> FixedPoint {
        self.base_util[q] + t.incoming[q] / self.capacity(q)
    }

    fn gas(t: &Tally) -> u64 {
        t.per_source.values().map(|m| batch_gas(*m)).sum()
    }

    fn marginal_gas(t: &Tally, m: &Move) -> u64 {
        match t.per_source.get(&m.from.0) {
            Some(1) => batch_gas(1),
            _ => batch_gas(2) - batch_gas(1),
        }
    }

    fn projection(&self, moves: &[Move]) -> Projection {
        let t = self.tally(moves);
        Projection {
            moves: moves.len(),
            migration_gas: Self::gas(&t),
            stake_fraction: (0..self.k()).map(|q| self.stake_fraction(&t, q)).collect(),
            utilization: (0..self.k()).map(|q| self.post_util(&t, q)).collect(),
        }
    }

    fn stake_violations(&self, t: &Tally) -> Vec<bool> {
        (0..self.k())
            .map(|q| {
                let (b, tot) = self.post_stake(t, q);
                !self.limits.stake_ok(b, tot)
            })
            .collect()
    }

    fn margins(&self, moves: &[Move]) -> Margins {
        let l = self.limits;
        let t = self.tally(moves);
        let accounts = self.input.alloc.len();
        let m = moves.len() as i64;
        let gas_delta = Self::gas(&t).saturating_sub(GAS_BASE) as i64;
        let gas_room = l.gas_limit(self.input.block_gas) as i64 - GAS_BASE as i64;
        let gas = if moves.is_empty() { FixedPoint::ONE } else { margin_int(gas_delta, gas_room) };
        let moves_m = margin_int(m, l.move_limit(accounts) as i64);
        let epoch_room = l.epoch_limit(accounts) as i64 - self.input.epoch_moves as i64;
        let epoch = margin_int(m, epoch_room);
        let byz_cap = FixedPoint::from_f64(l.byz_cap);
        let util_cap = FixedPoint::from_f64(l.util_cap);
        let mut stake = FixedPoint::ONE;
        let mut util = FixedPoint::ONE;
        for q in 0..self.k() {
            let cur = self.current_fraction(q);
            let post = self.stake_fraction(&t, q);
            if post > cur {
                stake = stake.min(margin(post - cur, byz_cap - cur));
            }
            if t.incoming[q] > FixedPoint::ZERO {
                let delta = t.incoming[q] / self.capacity(q);
                util = util.min(margin(delta, util_cap - self.base_util[q]));
            }
        }
        Margins { gas, moves: moves_m, epoch, stake, util }
    }
}

/// `1 - delta / room` clamped to `[0, 1]`; a nonpositive room leaves only
/// the zero-delta case at 1.
fn margin(delta: FixedPoint, room: FixedPoint) -> FixedPoint {
    if delta <= FixedPoint::ZERO {
        FixedPoint::ONE
    } else if room <= FixedPoint::ZERO {
        FixedPoint::ZERO
    } else {
        (FixedPoint::ONE - delta.saturating_div(room)).max(FixedPoint::ZERO).min(FixedPoint::ONE)
    }
}

fn margin_int(delta: i64, room: i64) -> FixedPoint {
    if delta <= 0 {
        FixedPoint::ONE
    } else if room <= 0 {
        FixedPoint::ZERO
    } else {
        margin(FixedPoint::from_int(delta), FixedPoint::from_int(room))
    }
}

/// Removes the worst of `candidates` (indices into `kept`) by `(key, marginal
/// gas, account id)` descending.
fn remove_worst(
    kept: &mut Vec<Move>,
    pruned: &mut Vec<PrunedMove>,
    candidates: &[(usize, FixedPoint)],
    tally: &Tally,
    reason: PruneReason,
) {
    let &(idx, _) = candidates
        .iter()
        .max_by(|(i, a), (j, b)| {
            let (mi, mj) = (&kept[*i], &kept[*j]);
            a.cmp(b)
                .then(Context::marginal_gas(tally, mi).cmp(&Context::marginal_gas(tally, mj)))
                .then(mi.account.cmp(&mj.account))
        })
        .expect("nonempty candidates");
    let mv = kept.remove(idx);
    pruned.push(PrunedMove { mv, reason });
}

fn prune_to_count(kept: &mut Vec<Move>, pruned: &mut Vec<PrunedMove>, ctx: &Context, limit: usize, r: PruneReason) {
    while kept.len() > limit {
        let t = ctx.tally(kept);
        let all: Vec<(usize, FixedPoint)> = (0..kept.len()).map(|i| (i, FixedPoint::ZERO)).collect();
        remove_worst(kept, pruned, &all, &t, r);
    }
}

/// Prunes `action` until every limit holds, then freezes it wholesale if its
/// safety score is below the threshold.
pub fn gate(action: &MigrationAction, input: GateInput<'_>, limits: &SafetyLimits) -> GateVerdict {
    let ctx = Context::new(input, limits);
    let accounts = input.alloc.len();
    let mut pruned = Vec::new();
    let mut kept = Vec::with_capacity(action.len());
    for m in &action.moves {
        debug_assert_eq!(input.alloc.shard_of(m.account), m.from, "move source must match the allocation");
        if input.alloc.cooled_down(m.account, input.height, limits.cooldown) {
            kept.push(*m);
        } else {
            pruned.push(PrunedMove { mv: *m, reason: PruneReason::Cooldown });
        }
    }

    let epoch_room = limits.epoch_limit(accounts).saturating_sub(input.epoch_moves);
    prune_to_count(&mut kept, &mut pruned, &ctx, epoch_room, PruneReason::EpochCap);
    prune_to_count(&mut kept, &mut pruned, &ctx, limits.move_limit(accounts), PruneReason::MoveCap);

    loop {
        let t = ctx.tally(&kept);
        let bad = ctx.stake_violations(&t);
        let cands: Vec<(usize, FixedPoint)> = kept
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                let &(stake, byz) = ctx.validators.get(&m.account)?;
                let hits = if byz { bad[m.to.index()] } else { bad[m.from.index()] };
                hits.then_some((i, stake))
            })
            .collect();
        if cands.is_empty() {
            break;
        }
        remove_worst(&mut kept, &mut pruned, &cands, &t, PruneReason::Stake);
    }

    let util_cap = FixedPoint::from_f64(limits.util_cap);
    loop {
        let t = ctx.tally(&kept);
        let cands: Vec<(usize, FixedPoint)> = kept
            .iter()
            .enumerate()
            .filter(|(_, m)| ctx.post_util(&t, m.to.index()) > util_cap)
            .map(|(i, m)| (i, ctx.load(m.account)))
            .collect();
        if cands.is_empty() {
            break;
        }
        remove_worst(&mut kept, &mut pruned, &cands, &t, PruneReason::Util);
    }

    let gas_limit = limits.gas_limit(input.block_gas);
    loop {
        let t = ctx.tally(&kept);
        if Context::gas(&t) <= gas_limit {
            break;
        }
        let all: Vec<(usize, FixedPoint)> = (0..kept.len()).map(|i| (i, FixedPoint::ZERO)).collect();
        remove_worst(&mut kept, &mut pruned, &all, &t, PruneReason::Gas);
    }

    let mut margins = ctx.margins(&kept);
    let mut score = margins.min();
    if score < limits.threshold() {
        pruned.extend(kept.drain(..).map(|mv| PrunedMove { mv, reason: PruneReason::Score }));
        margins = ctx.margins(&kept);
        score = margins.min();
    }
    GateVerdict { projection: ctx.projection(&kept), accepted: kept, pruned, score, margins }
}

/// Minimum normalized margin of `moves` against the limits.
pub fn safety_score(moves: &[Move], input: GateInput<'_>, limits: &SafetyLimits) -> FixedPoint {
    Context::new(input, limits).margins(moves).min()
}

/// Projection of `moves` without pruning.
pub fn project(moves: &[Move], input: GateInput<'_>, limits: &SafetyLimits) -> Projection {
    Context::new(input, limits).projection(moves)
}

/// Largest move count whose count-type margins (moves, epoch, single-batch
/// gas) all clear the score threshold, capped at [`MAX_MOVES`].
pub fn budget(limits: &SafetyLimits, accounts: usize, epoch_moves: usize, block_gas: u64) -> usize {
    let tau = limits.threshold();
    let gas_room = limits.gas_limit(block_gas) as i64 - GAS_BASE as i64;
    let epoch_room = limits.epoch_limit(accounts) as i64 - epoch_moves as i64;
    let move_room = limits.move_limit(accounts) as i64;
    (0..=MAX_MOVES)
        .rev()
        .find(|&m| {
            let mi = m as i64;
            m == 0
                || (margin_int(batch_gas(m) as i64 - GAS_BASE as i64, gas_room) >= tau
                    && margin_int(mi, move_room) >= tau
                    && margin_int(mi, epoch_room) >= tau)
        })
        .unwrap_or(0)
}

/// Keeps the first `budget` moves of a verdict's accepted set.
pub fn apply_budget(accepted: &[Move], budget: usize) -> Vec<Move> {
    accepted[..accepted.len().min(budget)].to_vec()
}
