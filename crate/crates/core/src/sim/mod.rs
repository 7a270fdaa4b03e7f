//! Discrete-time engine: the per-block control loop, queue execution with a
//! two-block cross-shard commit path, bounded message delays, committee
//! churn and the audit log.
//!
//! Every random draw comes from a [`DeterministicRng`] keyed by the previous
//! block hash, so a `(config, trace)` pair fixes the whole run.

mod committee;
mod rng;

pub use committee::{byzantine_count, churn, collect_votes, seat_genesis, validator_count};
pub use rng::{block_hash, genesis_hash, DeterministicRng, GENESIS_TAG};

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::allocator::{
    baseline_reactive, baseline_static, cost, reward, shaped_reward, target_mix, Candidate, Observation, SafePpo,
};
use crate::error::{Error, Result};
use crate::fixed::FixedPoint;
use crate::hash::Digest256;
use crate::metrics::{cross_shard_ratio, imbalance, imbalance_index, utilization};
use crate::migration::{quorum_reached, verify, MigBatch, MigrationEngine, MigrationEvent, MAX_SHARDS};
use crate::safety::{apply_budget, budget, gate, GateInput, SafetyLimits};
use crate::twf::{forecast, FeatureVector, ForecastBundle, ForecastSettings, LoadSeries, NormalizerState, TwfModel};
use crate::types::{
    AccountId, AllocationMap, BlockHeight, LoadSample, LoadVector, MigrationAction, Move, ShardId, ShardState,
    Transaction, MAX_MOVES,
};
use crate::workload::{adaptive_adversary_step, generate, BlockBatch, TraceKind, TraceSpec};

/// Version of the audit-log line schema.
pub const AUDIT_SCHEMA: u32 = 1;

/// Starting balance of every account.
pub const INITIAL_BALANCE: u64 = 1_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Psap,
    Static,
    Reactive,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Psap => "psap",
            Policy::Static => "static",
            Policy::Reactive => "reactive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Run length in blocks.
    pub blocks: u64,
    /// Transactions per shard per block.
    pub capacity: u32,
    pub block_gas: u64,
    /// Block interval; only scales the latency proxy.
    pub block_interval_ms: u64,
    pub window: usize,
    pub horizon: usize,
    pub mc_samples: usize,
    pub policy: Policy,
    pub limits: SafetyLimits,
    pub validators_per_shard: usize,
    /// Global share of Byzantine validators.
    pub byzantine_share: f64,
    /// Probability that a Byzantine validator withholds a vote.
    pub withhold_prob: f64,
    /// Share of validators replaced at each epoch boundary.
    pub churn_rate: f64,
    pub epoch_length: u64,
    /// Blocks a fresh validator spends syncing before it votes.
    pub sync_delay: u64,
    /// Upper bound of the extra delay on cross-shard messages, in blocks.
    pub max_delay: u64,
    /// Observed utilization above which the reactive baseline sheds load.
    pub reactive_threshold: f64,
    pub candidates_per_shard: usize,
    /// Blocks of history behind per-account activity.
    pub activity_window: u64,
    /// Per-shard queue bound; arrivals beyond it are dropped.
    pub queue_limit: usize,
    /// Byzantine validators request relocation into the attack target.
    pub stake_bribery: bool,
    /// Per-block probability of a source-shard fork deeper than one block.
    pub reorg_rate: f64,
    /// Online Safe-PPO learning during the run.
    pub training: bool,
    pub seed: u64,
    pub twf_checkpoint: Option<PathBuf>,
    pub policy_checkpoint: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            blocks: 2000,
            capacity: 1000,
            block_gas: 1_000_000,
            block_interval_ms: 2000,
            window: 16,
            horizon: 8,
            mc_samples: 10,
            policy: Policy::Psap,
            limits: SafetyLimits::default(),
            validators_per_shard: 4,
            byzantine_share: 0.2,
            withhold_prob: 0.5,
            churn_rate: 0.0,
            epoch_length: 500,
            sync_delay: 1,
            max_delay: 1,
            reactive_threshold: 0.75,
            candidates_per_shard: 32,
            activity_window: 20,
            queue_limit: 50_000,
            stake_bribery: false,
            reorg_rate: 0.0,
            training: false,
            seed: 1,
            twf_checkpoint: None,
            policy_checkpoint: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, num_shards: u16) -> Result<()> {
        if num_shards == 0 || num_shards > MAX_SHARDS {
            return Err(Error::config("num_shards", format!("must lie in 1..={MAX_SHARDS}")));
        }
        if self.horizon == 0 || self.horizon > crate::twf::MAX_HORIZON {
            return Err(Error::config("horizon", format!("must lie in 1..={}", crate::twf::MAX_HORIZON)));
        }
        if self.window < self.horizon {
            return Err(Error::config("window", "must be at least the horizon"));
        }
        if self.capacity == 0 {
            return Err(Error::config("capacity", "must be positive"));
        }
        if self.block_gas == 0 {
            return Err(Error::config("block_gas", "must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("mc_samples", "need at least one sample"));
        }
        if self.validators_per_shard == 0 {
            return Err(Error::config("validators_per_shard", "must be positive"));
        }
        if !(0.0..1.0 / 3.0).contains(&self.byzantine_share) {
            return Err(Error::config("byzantine_share", "must lie in [0, 1/3)"));
        }
        if !(0.0..=1.0).contains(&self.withhold_prob) {
            return Err(Error::config("withhold_prob", "must lie in [0, 1]"));
        }
        if !(0.0..=0.2).contains(&self.churn_rate) {
            return Err(Error::config("churn_rate", format!("{} is outside [0, 0.2]", self.churn_rate)));
        }
        if self.epoch_length == 0 {
            return Err(Error::config("epoch_length", "must be positive"));
        }
        if !(self.reactive_threshold > 0.0 && self.reactive_threshold <= 1.0) {
            return Err(Error::config("reactive_threshold", "must lie in (0, 1]"));
        }
        if self.activity_window == 0 {
            return Err(Error::config("activity_window", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.reorg_rate) {
            return Err(Error::config("reorg_rate", "must lie in [0, 1]"));
        }
        self.limits.validate()
    }
}

/// Per-block metrics, all derived from committed state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub height: u64,
    pub arrivals: u64,
    /// Transactions completed in this block.
    pub tps: u64,
    /// Nearest-rank p95 queue residence of completed transactions, in ms.
    pub latency_p95_ms: u64,
    /// Max minus min shard utilization.
    pub imbalance: FixedPoint,
    /// Mean absolute relative deviation of executed loads.
    pub imbalance_index: FixedPoint,
    pub cross_ratio: FixedPoint,
    pub cross_gas_ratio: FixedPoint,
    pub migration_gas: u64,
    pub migration_share: FixedPoint,
    pub submitted_moves: u64,
    /// Accounts whose relocation took effect in this block.
    pub moved: u64,
    pub max_byzantine_fraction: FixedPoint,
    pub stake_violation: bool,
    pub gas_violation: bool,
    pub move_violation: bool,
    pub committed_shards: u32,
    pub queued: u64,
    pub dropped: u64,
    pub utilization: Vec<FixedPoint>,
    /// Slot demand per shard: routed arrivals plus released receipts.
    pub demand: Vec<u32>,
    pub arrival_gas: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastAudit {
    pub source: String,
    pub confidence: FixedPoint,
    pub sigma_max: FixedPoint,
    pub hedged_max: FixedPoint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateAudit {
    pub accepted: usize,
    pub pruned: usize,
    pub score: FixedPoint,
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAudit {
    pub id: Digest256,
    pub source: u16,
    pub moves: usize,
    pub gas: u64,
    pub signers: usize,
    pub quorum: bool,
    /// Quorum certificate digest.
    pub cert: Option<Digest256>,
}

/// One line of the audit log. Field order follows the control loop:
/// forecast, policy, gate, budget, cooldown, batches, finality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub schema: u32,
    pub height: u64,
    pub epoch: u64,
    pub forecast: Option<ForecastAudit>,
    pub proposed: usize,
    pub injected: usize,
    pub locked: usize,
    pub gate: Option<GateAudit>,
    pub budget: usize,
    pub cooldown_dropped: usize,
    pub batches: Vec<BatchAudit>,
    pub reanchored: usize,
    pub applied: Vec<Digest256>,
    pub cancelled: usize,
    pub churned: usize,
    pub byzantine_global: FixedPoint,
    pub block_hash: Digest256,
    pub breach: Option<String>,
    pub record: BlockRecord,
}

/// Wall-clock nanoseconds per control-loop stage, summed over the run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub forecast_ns: u64,
    pub policy_ns: u64,
    pub gate_ns: u64,
    pub batch_ns: u64,
    pub execute_ns: u64,
    pub finality_ns: u64,
    pub blocks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub height: u64,
    pub block_hash: Digest256,
    pub epoch: u64,
    pub accounts_per_shard: Vec<usize>,
    pub total_balance: u128,
    pub arrivals: u64,
    pub completed: u64,
    pub dropped: u64,
    pub policy_updates: usize,
    pub policy_lambda: Option<f64>,
    /// SHA-256 over the raw trace arrivals fed to the run.
    pub trace_digest: Digest256,
}

#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub policy: Policy,
    pub records: Vec<BlockRecord>,
    pub audit: Vec<AuditRecord>,
    pub final_state: FinalState,
    pub timings: StageTimings,
}

#[derive(Clone, Copy, Debug, Default)]
struct Totals {
    arrivals: u64,
    completed: u64,
    dropped: u64,
}

#[derive(Clone, Copy, Debug)]
struct PendingConfirm {
    batch: Digest256,
    dest: ShardId,
    due: u64,
}

struct Control {
    forecast: Option<ForecastAudit>,
    proposed: usize,
    injected: usize,
    locked: usize,
    gate: Option<GateAudit>,
    pruned_fraction: f64,
    budget: usize,
    cooldown_dropped: usize,
    batches: Vec<BatchAudit>,
    reanchored: usize,
    migration_gas: u64,
    submitted: Vec<Move>,
}

struct Execution {
    executed: Vec<u32>,
    committed: Vec<bool>,
    completed: u64,
    residence: BTreeMap<u64, u64>,
}

/// Engine state between blocks.
pub struct Simulation {
    cfg: SimConfig,
    trace: TraceSpec,
    k: usize,
    height: u64,
    prev_hash: Digest256,
    alloc: AllocationMap,
    shards: Vec<ShardState>,
    receipts: Vec<VecDeque<BlockHeight>>,
    in_transit: BTreeMap<u64, Vec<(u16, BlockHeight)>>,
    in_transit_count: u64,
    migration: MigrationEngine,
    initial_balance: u128,
    confirms: Vec<PendingConfirm>,
    activity: Vec<u32>,
    activity_log: VecDeque<Vec<AccountId>>,
    features: VecDeque<FeatureVector>,
    arrival_log: VecDeque<Vec<(AccountId, AccountId)>>,
    lagged: Option<NormalizerState>,
    model: Option<TwfModel>,
    agent: Option<SafePpo>,
    epoch: u64,
    epoch_moves: usize,
    prev_mix: Vec<f64>,
    last_executed: Vec<u32>,
    last_demand: Vec<u32>,
    next_validator_id: u32,
    trace_accounts: u64,
    totals: Totals,
    timings: StageTimings,
    trace_hasher: Sha256,
}

fn ns(since: Instant) -> u64 {
    since.elapsed().as_nanos() as u64
}

fn nearest_rank(hist: &BTreeMap<u64, u64>, q: f64) -> u64 {
    let n: u64 = hist.values().sum();
    if n == 0 {
        return 0;
    }
    let rank = ((q * n as f64).ceil() as u64).max(1);
    let mut acc = 0;
    for (v, c) in hist {
        acc += c;
        if acc >= rank {
            return *v;
        }
    }
    *hist.keys().next_back().expect("nonempty")
}

impl Simulation {
    /// Builds the genesis state. `model` is required for forecasts (psap falls
    /// back to persistence without one); `agent` is required for psap.
    pub fn new(cfg: SimConfig, trace: TraceSpec, model: Option<TwfModel>, agent: Option<SafePpo>) -> Result<Self> {
        trace.validate()?;
        cfg.validate(trace.num_shards)?;
        let k = trace.num_shards as usize;
        if let Some(m) = &model {
            if m.num_shards() != k {
                return Err(Error::config("twf_checkpoint", format!("model has {} shards, trace {k}", m.num_shards())));
            }
            if m.window != cfg.window {
                return Err(Error::config("window", format!("model expects a window of {}", m.window)));
            }
        }
        let agent = match (cfg.policy, agent) {
            (Policy::Psap, None) => return Err(Error::config("policy", "psap needs a policy network")),
            (Policy::Psap, Some(mut a)) => {
                let dim = crate::allocator::RlState::dim(k, cfg.horizon);
                if a.state_dim() != dim {
                    return Err(Error::config(
                        "policy_checkpoint",
                        format!("policy state has {} inputs, scenario needs {dim}", a.state_dim()),
                    ));
                }
                a.training = cfg.training;
                Some(a)
            }
            (_, _) => None,
        };
        let n = trace.num_accounts;
        let seats = (k * cfg.validators_per_shard) as u64;
        let mut mapping: Vec<ShardId> = (0..n).map(|a| baseline_static(AccountId(a), trace.num_shards)).collect();
        for v in 0..seats {
            mapping.push(ShardId((v / cfg.validators_per_shard as u64) as u16));
        }
        let alloc = AllocationMap::new(mapping, trace.num_shards);
        let genesis = genesis_hash(cfg.seed);
        let mut shards: Vec<ShardState> = (0..k)
            .map(|q| ShardState::new(ShardId(q as u16), cfg.capacity, cfg.block_gas, cfg.window.max(1)))
            .collect();
        let byz = (cfg.byzantine_share * seats as f64).floor() as usize;
        let mut rng = DeterministicRng::new(&genesis, 0, "committee");
        seat_genesis(&mut shards, cfg.validators_per_shard, n, byz, &cfg.limits, &mut rng)?;
        let balances = vec![INITIAL_BALANCE; alloc.len()];
        let migration = MigrationEngine::new(&alloc, balances);
        let initial_balance = migration.total_balance();
        let lagged = model.as_ref().map(|m| m.normalizer.clone());
        let accounts = alloc.len();
        Ok(Self {
            k,
            height: 0,
            prev_hash: genesis,
            alloc,
            shards,
            receipts: vec![VecDeque::new(); k],
            in_transit: BTreeMap::new(),
            in_transit_count: 0,
            migration,
            initial_balance,
            confirms: Vec::new(),
            activity: vec![0; accounts],
            activity_log: VecDeque::new(),
            features: VecDeque::new(),
            arrival_log: VecDeque::new(),
            lagged,
            model,
            agent,
            epoch: 0,
            epoch_moves: 0,
            prev_mix: vec![0.0; k],
            last_executed: vec![0; k],
            last_demand: vec![0; k],
            next_validator_id: seats as u32,
            trace_accounts: n,
            totals: Totals::default(),
            timings: StageTimings::default(),
            trace_hasher: Sha256::new(),
            cfg,
            trace,
        })
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn block_hash(&self) -> Digest256 {
        self.prev_hash
    }

    pub fn allocation(&self) -> &AllocationMap {
        &self.alloc
    }

    pub fn shards(&self) -> &[ShardState] {
        &self.shards
    }

    pub fn migration(&self) -> &MigrationEngine {
        &self.migration
    }

    pub fn agent(&self) -> Option<&SafePpo> {
        self.agent.as_ref()
    }

    pub fn into_agent(self) -> Option<SafePpo> {
        self.agent
    }

    pub fn timings(&self) -> &StageTimings {
        &self.timings
    }

    fn capacity_total(&self) -> u64 {
        self.cfg.capacity as u64 * self.k as u64
    }

    fn is_validator(&self, a: AccountId) -> bool {
        a.0 >= self.trace_accounts
    }

    fn account_loads(&self) -> Vec<FixedPoint> {
        let w = self.cfg.activity_window as i64;
        self.activity.iter().map(|c| FixedPoint::from_ratio(*c as i64, w).unwrap_or_default()).collect()
    }

    /// Most active movable accounts of every shard.
    fn candidates(&self, h: BlockHeight) -> Vec<Candidate> {
        let mut per: Vec<Vec<(u32, u64)>> = vec![Vec::new(); self.k];
        for (a, &c) in self.activity.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let acct = AccountId(a as u64);
            if self.migration.is_locked(acct) || !self.alloc.cooled_down(acct, h, self.cfg.limits.cooldown) {
                continue;
            }
            per[self.alloc.shard_of(acct).index()].push((c, a as u64));
        }
        let w = self.cfg.activity_window as i64;
        let mut out = Vec::new();
        for (q, mut list) in per.into_iter().enumerate() {
            list.sort_unstable_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
            for (c, a) in list.into_iter().take(self.cfg.candidates_per_shard) {
                out.push(Candidate {
                    account: AccountId(a),
                    shard: ShardId(q as u16),
                    load: FixedPoint::from_ratio(c as i64, w).unwrap_or_default(),
                    validator: self.is_validator(AccountId(a)),
                });
            }
        }
        out
    }

    /// Slot demand `pairs` would place on each shard under the current map:
    /// one slot at the sender, one receipt slot at a foreign receiver.
    fn attributed(&self, pairs: &[(AccountId, AccountId)]) -> Vec<u32> {
        let mut d = vec![0u32; self.k];
        for (src, dst) in pairs {
            let (a, b) = (self.alloc.shard_of(*src).index(), self.alloc.shard_of(*dst).index());
            d[a] += 1;
            if a != b {
                d[b] += 1;
            }
        }
        d
    }

    /// Last block's demand as the current allocation would see it.
    fn recent_demand(&self) -> Vec<u32> {
        match self.arrival_log.back() {
            Some(p) => self.attributed(p),
            None => self.last_demand.clone(),
        }
    }

    fn persistence(&self) -> ForecastBundle {
        ForecastBundle::persistence(&LoadVector::from_counts(&self.recent_demand()), self.cfg.horizon)
    }

    /// Forecast input window with each block's arrivals re-attributed to the
    /// current allocation, so completed migrations show up immediately.
    fn current_window(&self) -> Vec<FeatureVector> {
        self.features
            .iter()
            .zip(&self.arrival_log)
            .map(|(f, pairs)| FeatureVector { loads: LoadVector::from_counts(&self.attributed(pairs)), ..f.clone() })
            .collect()
    }

    fn forecast_bundle(&self, h: BlockHeight, prev: &Digest256) -> Result<(ForecastBundle, &'static str)> {
        if let (Some(model), Some(lag)) = (&self.model, &self.lagged) {
            if self.features.len() == model.window && h.0 > 0 {
                let window = self.current_window();
                let settings = ForecastSettings { horizon: self.cfg.horizon, samples: self.cfg.mc_samples, dropout: true };
                let seed = DeterministicRng::seed_of(prev, h.0, "dropout") as u64;
                return Ok((forecast(model, &window, lag, h.0 - 1, &settings, seed)?, "twf"));
            }
        }
        Ok((self.persistence(), "persistence"))
    }

    /// Zero-sum reshaping of this block's arrivals toward the shard that
    /// received the most recent migrations.
    fn adapt(&mut self, arrivals: &mut BlockBatch, prev: &Digest256, t: u64) {
        let k = self.k;
        let mut counts = vec![0u32; k];
        for tx in arrivals.iter() {
            counts[self.alloc.shard_of(tx.src).index()] += 1;
        }
        let prev_w: Vec<FixedPoint> = self.prev_mix.iter().map(|w| FixedPoint::from_f64(*w)).collect();
        let a = &self.trace.attack;
        let desired = adaptive_adversary_step(&LoadVector::from_counts(&counts), t, &prev_w, a.amplitude, a.period);
        let target: Vec<u32> =
            desired.0.iter().map(|d| (d.to_f64().round().max(0.0)) as u32).collect();
        let mut keep = counts.clone();
        let mut out = Vec::with_capacity(arrivals.len());
        for tx in arrivals.drain(..).rev() {
            let q = self.alloc.shard_of(tx.src).index();
            if keep[q] > target[q] {
                keep[q] -= 1;
                continue;
            }
            out.push(tx);
        }
        out.reverse();
        let mut rng = DeterministicRng::new(prev, t, "adaptive");
        let mid = (self.trace.gas_min + self.trace.gas_max) / 2;
        for q in 0..k {
            let deficit = target[q].saturating_sub(counts[q]);
            if deficit == 0 {
                continue;
            }
            let local: Vec<AccountId> = self
                .alloc
                .accounts_in(ShardId(q as u16))
                .filter(|a| a.0 < self.trace_accounts)
                .collect();
            if local.is_empty() {
                continue;
            }
            for _ in 0..deficit {
                let src = local[rng.random_range(0..local.len())];
                let dst = AccountId(rng.random_range(0..self.trace_accounts));
                out.push(Transaction { src, dst, value: FixedPoint::ONE, gas: mid, arrival_block: BlockHeight(t) });
            }
        }
        *arrivals = out;
    }

    /// Relocation request of a bribed Byzantine validator.
    fn bribery(&self, h: BlockHeight, prev: &Digest256, action: &mut MigrationAction) -> usize {
        let a = &self.trace.attack;
        let enabled = self.cfg.stake_bribery || self.trace.kind == TraceKind::StakeBribery;
        if !enabled || !a.active(h.0) || action.len() >= MAX_MOVES {
            return 0;
        }
        let mut rng = DeterministicRng::new(prev, h.0, "bribery");
        if !rng.random_bool(a.bribery_rate.clamp(0.0, 1.0)) {
            return 0;
        }
        let target = ShardId(a.target_shard);
        let pool: Vec<AccountId> = self
            .shards
            .iter()
            .filter(|s| s.id != target)
            .flat_map(|s| s.validators.iter().filter(|v| v.byzantine).map(|v| v.account))
            .filter(|acct| !action.moves.iter().any(|m| m.account == *acct))
            .collect();
        if pool.is_empty() {
            return 0;
        }
        let account = pool[rng.random_range(0..pool.len())];
        action.moves.push(Move { account, from: self.alloc.shard_of(account), to: target });
        1
    }

    fn control(&mut self, h: BlockHeight, prev: &Digest256) -> Result<Control> {
        let t = h.0;
        let limits = self.cfg.limits.clone();
        let accounts = self.alloc.len();
        let b = budget(&limits, accounts, self.epoch_moves, self.cfg.block_gas);
        let mut c = Control {
            forecast: None,
            proposed: 0,
            injected: 0,
            locked: 0,
            gate: None,
            pruned_fraction: 0.0,
            budget: b,
            cooldown_dropped: 0,
            batches: Vec::new(),
            reanchored: 0,
            migration_gas: 0,
            submitted: Vec::new(),
        };
        if self.cfg.policy == Policy::Static {
            return Ok(c);
        }

        let clock = Instant::now();
        let (bundle, source) = match self.cfg.policy {
            Policy::Psap => self.forecast_bundle(h, prev)?,
            _ => (self.persistence(), "persistence"),
        };
        c.forecast = Some(ForecastAudit {
            source: source.to_string(),
            confidence: bundle.confidence(),
            sigma_max: bundle.sigma_mean().0.iter().copied().max().unwrap_or_default(),
            hedged_max: bundle.hedged_mean().0.iter().copied().max().unwrap_or_default(),
        });
        self.timings.forecast_ns += ns(clock);

        let clock = Instant::now();
        let cands = self.candidates(h);
        let cap = self.cfg.capacity as i64;
        let mut action = match self.cfg.policy {
            Policy::Psap => {
                let loads: Vec<FixedPoint> = self.last_executed.iter().map(|x| FixedPoint::from_int(*x as i64)).collect();
                let demand: Vec<FixedPoint> = self.recent_demand().iter().map(|x| FixedPoint::from_int(*x as i64)).collect();
                let byz: Vec<FixedPoint> = self.shards.iter().map(|s| s.byzantine_fraction()).collect();
                let capacity = vec![self.cfg.capacity; self.k];
                let obs = Observation {
                    height: h,
                    seed: DeterministicRng::seed_of(prev, t, "policy") as u64,
                    loads: &loads,
                    demand: &demand,
                    forecast: &bundle,
                    byz_fraction: &byz,
                    capacity: &capacity,
                    candidates: &cands,
                    budget: b,
                };
                self.agent.as_mut().expect("psap agent").act(&obs).action
            }
            Policy::Reactive => {
                let utils: Vec<FixedPoint> = self
                    .last_executed
                    .iter()
                    .map(|x| FixedPoint::from_ratio(*x as i64, cap).unwrap_or_default())
                    .collect();
                baseline_reactive(&utils, FixedPoint::from_f64(self.cfg.reactive_threshold), &cands, b)
            }
            Policy::Static => unreachable!(),
        };
        c.proposed = action.len();
        c.injected = self.bribery(h, prev, &mut action);
        let before = action.len();
        action.moves.retain(|m| !self.migration.is_locked(m.account));
        c.locked = before - action.len();
        self.timings.policy_ns += ns(clock);

        if !action.is_empty() {
            let clock = Instant::now();
            let account_load = self.account_loads();
            let mut gate_limits = limits.clone();
            if self.cfg.policy == Policy::Reactive {
                // the baseline has no learned score; it answers to the hard bounds only
                gate_limits.score_threshold = 0.0;
            }
            let input = GateInput {
                height: h,
                shards: &self.shards,
                forecast: &bundle,
                alloc: &self.alloc,
                account_load: &account_load,
                epoch_moves: self.epoch_moves,
                block_gas: self.cfg.block_gas,
            };
            let verdict = gate(&action, input, &gate_limits);
            c.pruned_fraction = verdict.pruned.len() as f64 / action.len() as f64;
            c.gate = Some(GateAudit {
                accepted: verdict.accepted.len(),
                pruned: verdict.pruned.len(),
                score: verdict.score,
                reasons: verdict.reason_counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            });
            let mut moves = apply_budget(&verdict.accepted, b);
            let n = moves.len();
            moves.retain(|m| self.alloc.cooled_down(m.account, h, limits.cooldown));
            c.cooldown_dropped = n - moves.len();
            self.timings.gate_ns += ns(clock);

            let clock = Instant::now();
            self.build_batches(h, prev, moves, &mut c)?;
            self.timings.batch_ns += ns(clock);
        }
        if self.cfg.reorg_rate > 0.0 {
            self.maybe_reorg(h, prev, &mut c)?;
        }
        Ok(c)
    }

    fn build_batches(&mut self, h: BlockHeight, prev: &Digest256, moves: Vec<Move>, c: &mut Control) -> Result<()> {
        let mut by_source: BTreeMap<u16, Vec<Move>> = BTreeMap::new();
        for m in moves {
            by_source.entry(m.from.0).or_default().push(m);
        }
        let mut votes = DeterministicRng::new(prev, h.0, "batch-votes");
        let mut delays = DeterministicRng::new(prev, h.0, "batch-delay");
        for (src, ms) in by_source {
            let committee = &self.shards[src as usize].validators;
            let (signers, signed) = collect_votes(committee, h, self.cfg.withhold_prob, &mut votes);
            let total: FixedPoint = committee.iter().map(|v| v.stake).sum();
            if !quorum_reached(signed, total) {
                c.batches.push(BatchAudit {
                    id: Digest256::default(),
                    source: src,
                    moves: ms.len(),
                    gas: 0,
                    signers: signers.len(),
                    quorum: false,
                    cert: None,
                });
                continue;
            }
            let nonce = self.migration.next_nonce();
            let batch = MigBatch::build(&ms, ShardId(src), h, nonce, self.epoch as u32, &signers)?;
            let (gas, cert, dests) = (batch.gas(), batch.quorum.digest, batch.header.destination_set());
            let id = self.migration.propose(batch)?;
            self.migration.submit(&id, h)?;
            for dest in dests {
                let due = h.0 + 1 + delays.random_range(0..=self.cfg.max_delay);
                self.confirms.push(PendingConfirm { batch: id, dest, due });
            }
            c.migration_gas += gas;
            c.submitted.extend_from_slice(&ms);
            c.batches.push(BatchAudit {
                id,
                source: src,
                moves: ms.len(),
                gas,
                signers: signers.len(),
                quorum: true,
                cert: Some(cert),
            });
        }
        Ok(())
    }

    /// A fork deeper than one block on the source chain forces the batch to
    /// be rebuilt on the new head.
    fn maybe_reorg(&mut self, h: BlockHeight, prev: &Digest256, c: &mut Control) -> Result<()> {
        let mut rng = DeterministicRng::new(prev, h.0, "reorg");
        if !rng.random_bool(self.cfg.reorg_rate) {
            return Ok(());
        }
        let Some(old) = self.migration.in_flight().next().cloned() else { return Ok(()) };
        let depth = rng.random_range(1..=3u64);
        let committee = &self.shards[old.header.source.index()].validators;
        let (signers, _) = collect_votes(committee, h, self.cfg.withhold_prob, &mut rng);
        let old_id = old.id();
        if let Some(succ) = self.migration.reanchor(&old_id, depth, h, &signers)? {
            self.confirms.retain(|p| p.batch != old_id);
            self.migration.submit(&succ, h)?;
            let dests = self.migration.batch(&succ).expect("proposed").header.destination_set();
            for dest in dests {
                let due = h.0 + 1 + rng.random_range(0..=self.cfg.max_delay);
                self.confirms.push(PendingConfirm { batch: succ, dest, due });
            }
            c.reanchored += 1;
        }
        Ok(())
    }

    fn execute(&mut self, h: BlockHeight, prev: &Digest256) -> Execution {
        let t = h.0;
        let mut votes = DeterministicRng::new(prev, t, "consensus");
        let mut delays = DeterministicRng::new(prev, t, "receipts");
        let mut ex = Execution {
            executed: vec![0; self.k],
            committed: vec![false; self.k],
            completed: 0,
            residence: BTreeMap::new(),
        };
        for q in 0..self.k {
            let (_, signed) = collect_votes(&self.shards[q].validators, h, self.cfg.withhold_prob, &mut votes);
            let total = self.shards[q].total_stake();
            if !quorum_reached(signed, total) {
                self.shards[q].record(LoadSample::default());
                continue;
            }
            ex.committed[q] = true;
            let cap = self.cfg.capacity;
            let mut used = 0u32;
            let mut gas = 0u64;
            while used < cap {
                let Some(arrived) = self.receipts[q].pop_front() else { break };
                used += 1;
                ex.completed += 1;
                *ex.residence.entry(t - arrived.0 + 1).or_insert(0) += 1;
            }
            while used < cap {
                let Some(tx) = self.shards[q].queue.pop_front() else { break };
                used += 1;
                gas += tx.gas;
                let dq = self.alloc.shard_of(tx.dst);
                if dq.index() != q {
                    let due = t + 1 + delays.random_range(0..=self.cfg.max_delay);
                    self.in_transit.entry(due).or_default().push((dq.0, tx.arrival_block));
                    self.in_transit_count += 1;
                } else {
                    ex.completed += 1;
                    *ex.residence.entry(t - tx.arrival_block.0 + 1).or_insert(0) += 1;
                }
            }
            ex.executed[q] = used;
            self.shards[q].record(LoadSample { executed: used, gas });
        }
        ex
    }

    /// Destination confirmations due now, then commit or rollback.
    fn finality(&mut self, h: BlockHeight, committed: &[bool]) -> (Vec<Digest256>, u64, usize) {
        let mut keep = Vec::with_capacity(self.confirms.len());
        for mut p in std::mem::take(&mut self.confirms) {
            if self.migration.status(&p.batch).is_none_or(|s| s.is_terminal()) {
                continue;
            }
            if p.due > h.0 {
                keep.push(p);
                continue;
            }
            if !committed[p.dest.index()] {
                p.due = h.0 + 1;
                keep.push(p);
                continue;
            }
            let batch = self.migration.batch(&p.batch).expect("tracked");
            if verify(batch, h, &self.shards, &self.cfg.limits, self.cfg.block_gas).is_ok() {
                self.migration.confirm(&p.batch, p.dest, h);
            }
        }
        self.confirms = keep;
        let applied = self.migration.resolve(h, &mut self.alloc);
        let mut moved = 0u64;
        let mut cancelled = 0usize;
        for ev in self.migration.take_events() {
            match ev {
                MigrationEvent::Applied { moves, .. } => {
                    moved += moves.len() as u64;
                    self.epoch_moves += moves.len();
                    for m in &moves {
                        self.relocate_validator(m);
                    }
                }
                MigrationEvent::Cancelled { .. } => cancelled += 1,
                _ => {}
            }
        }
        (applied, moved, cancelled)
    }

    fn relocate_validator(&mut self, m: &Move) {
        let from = &mut self.shards[m.from.index()].validators;
        if let Some(i) = from.iter().position(|v| v.account == m.account) {
            let v = from.remove(i);
            self.shards[m.to.index()].validators.push(v);
        }
    }

    fn pending(&self) -> (u64, u64) {
        let queued: u64 = self.shards.iter().map(|s| s.queue.len() as u64).sum();
        let receipts: u64 = self.receipts.iter().map(|r| r.len() as u64).sum::<u64>() + self.in_transit_count;
        (queued, receipts)
    }

    /// Executes one block of the control loop on `arrivals`.
    pub fn step(&mut self, mut arrivals: BlockBatch) -> Result<AuditRecord> {
        let t = self.height;
        let h = BlockHeight(t);
        let prev = self.prev_hash;
        self.trace_hasher.update(t.to_be_bytes());
        for tx in &arrivals {
            for v in [tx.arrival_block.0, tx.src.0, tx.dst.0, tx.gas, tx.value.raw() as u64] {
                self.trace_hasher.update(v.to_be_bytes());
            }
        }

        let mut churned = 0;
        if t > 0 && t % self.cfg.epoch_length == 0 {
            self.epoch += 1;
            self.epoch_moves = 0;
            if self.cfg.churn_rate > 0.0 {
                let mut rng = DeterministicRng::new(&prev, t, "churn");
                churned = churn(
                    &mut self.shards,
                    self.cfg.churn_rate,
                    self.cfg.byzantine_share,
                    h,
                    self.cfg.sync_delay,
                    &mut self.next_validator_id,
                    &self.cfg.limits,
                    &mut rng,
                )?
                .len();
            }
        }
        if self.trace.kind == TraceKind::Adaptive && self.trace.attack.active(t) {
            self.adapt(&mut arrivals, &prev, t);
        }

        let cross = cross_shard_ratio(arrivals.iter(), &self.alloc);
        let mut demand = vec![0u32; self.k];
        let mut arrival_gas = 0u64;
        let mut touched = Vec::with_capacity(arrivals.len() * 2);
        let pairs: Vec<(AccountId, AccountId)> = arrivals.iter().map(|tx| (tx.src, tx.dst)).collect();
        let n_arrivals = arrivals.len() as u64;
        for tx in arrivals {
            let q = self.alloc.shard_of(tx.src).index();
            demand[q] += 1;
            arrival_gas += tx.gas;
            touched.push(tx.src);
            touched.push(tx.dst);
            if self.shards[q].queue.len() >= self.cfg.queue_limit {
                self.totals.dropped += 1;
            } else {
                self.shards[q].queue.push_back(tx);
            }
        }
        self.totals.arrivals += n_arrivals;
        for a in &touched {
            self.activity[a.index()] += 1;
        }
        self.activity_log.push_back(touched);
        if self.activity_log.len() as u64 > self.cfg.activity_window {
            for a in self.activity_log.pop_front().expect("nonempty") {
                self.activity[a.index()] -= 1;
            }
        }
        if let Some(released) = self.in_transit.remove(&t) {
            self.in_transit_count -= released.len() as u64;
            for (q, arrived) in released {
                demand[q as usize] += 1;
                self.receipts[q as usize].push_back(arrived);
            }
        }

        let control = self.control(h, &prev)?;

        let clock = Instant::now();
        let ex = self.execute(h, &prev);
        self.timings.execute_ns += ns(clock);
        let clock = Instant::now();
        let (applied, moved, cancelled) = self.finality(h, &ex.committed);
        self.timings.finality_ns += ns(clock);
        self.totals.completed += ex.completed;

        let cap = self.cfg.capacity as u64;
        let utils: Vec<FixedPoint> =
            ex.executed.iter().map(|x| utilization(*x as u64, cap).expect("positive capacity")).collect();
        let imb = imbalance(&LoadVector(utils.clone()))?;
        let index = imbalance_index(&LoadVector::from_counts(&ex.executed)).unwrap_or(FixedPoint::ZERO);
        let limits = &self.cfg.limits;
        let mut max_byz = FixedPoint::ZERO;
        let mut stake_violation = false;
        for s in &self.shards {
            max_byz = max_byz.max(s.byzantine_fraction());
            stake_violation |= !limits.stake_ok(s.byzantine_stake(), s.total_stake());
        }
        let (queued, receipts) = self.pending();
        let record = BlockRecord {
            height: t,
            arrivals: n_arrivals,
            tps: ex.completed,
            latency_p95_ms: nearest_rank(&ex.residence, 0.95) * self.cfg.block_interval_ms,
            imbalance: imb,
            imbalance_index: index,
            cross_ratio: cross.count,
            cross_gas_ratio: cross.gas,
            migration_gas: control.migration_gas,
            migration_share: FixedPoint::from_ratio(control.migration_gas as i64, self.cfg.block_gas as i64)
                .unwrap_or_default(),
            submitted_moves: control.submitted.len() as u64,
            moved,
            max_byzantine_fraction: max_byz,
            stake_violation,
            gas_violation: control.migration_gas > limits.gas_limit(self.cfg.block_gas),
            move_violation: control.submitted.len() > limits.move_limit(self.alloc.len()),
            committed_shards: ex.committed.iter().filter(|c| **c).count() as u32,
            queued,
            dropped: self.totals.dropped,
            utilization: utils,
            demand: demand.clone(),
            arrival_gas,
        };

        let mut breach = None;
        if ex.completed > self.capacity_total() {
            breach = Some(format!("{} completions exceed total capacity", ex.completed));
        }
        let tot = self.totals;
        if tot.arrivals != tot.completed + queued + receipts + tot.dropped {
            breach = Some(format!(
                "work not conserved: {} arrivals vs {} completed + {queued} queued + {receipts} receipts + {} dropped",
                tot.arrivals, tot.completed, tot.dropped
            ));
        }
        if self.migration.total_balance() != self.initial_balance {
            breach = Some("balance not conserved across migrations".to_string());
        }
        if record.stake_violation || record.gas_violation || record.move_violation {
            breach = Some("committed block violates a safety limit".to_string());
        }

        let total_cap = FixedPoint::from_int(self.capacity_total() as i64);
        if let Some(agent) = self.agent.as_mut() {
            if agent.training {
                let tps_share = FixedPoint::from_int(record.tps as i64) / total_cap;
                let base = reward(tps_share, record.imbalance, record.migration_share).to_f64();
                let mix = target_mix(&control.submitted, self.k);
                let r = shaped_reward(base, &self.prev_mix, &mix, control.pruned_fraction);
                agent.observe(r, cost(record.migration_share).to_f64());
            }
        }
        if !control.submitted.is_empty() {
            self.prev_mix = target_mix(&control.submitted, self.k);
        }

        let feature = FeatureVector::new(&demand, arrival_gas, t, self.trace.blocks_per_hour);
        self.features.push_back(feature);
        self.arrival_log.push_back(pairs);
        if self.arrival_log.len() > self.cfg.window {
            self.arrival_log.pop_front();
        }
        if self.features.len() > self.cfg.window {
            let old = self.features.pop_front().expect("nonempty");
            if let Some(lag) = self.lagged.as_mut() {
                lag.observe(&old);
            }
        }
        self.last_executed = ex.executed;
        self.last_demand = demand;

        let mut content = serde_json::to_vec(&record)?;
        for id in &applied {
            content.extend_from_slice(id.as_bytes());
        }
        let hash = block_hash(t, &prev, &content);
        self.prev_hash = hash;
        self.height += 1;
        self.timings.blocks += 1;
        let seats = validator_count(&self.shards).max(1) as i64;
        Ok(AuditRecord {
            schema: AUDIT_SCHEMA,
            height: t,
            epoch: self.epoch,
            forecast: control.forecast,
            proposed: control.proposed,
            injected: control.injected,
            locked: control.locked,
            gate: control.gate,
            budget: control.budget,
            cooldown_dropped: control.cooldown_dropped,
            batches: control.batches,
            reanchored: control.reanchored,
            applied,
            cancelled,
            churned,
            byzantine_global: FixedPoint::from_ratio(byzantine_count(&self.shards) as i64, seats).unwrap_or_default(),
            block_hash: hash,
            breach,
            record,
        })
    }

    pub fn final_state(&self) -> FinalState {
        FinalState {
            height: self.height,
            block_hash: self.prev_hash,
            epoch: self.epoch,
            accounts_per_shard: self.alloc.counts(),
            total_balance: self.migration.total_balance(),
            arrivals: self.totals.arrivals,
            completed: self.totals.completed,
            dropped: self.totals.dropped,
            policy_updates: self.agent.as_ref().map_or(0, |a| a.updates.len()),
            policy_lambda: self.agent.as_ref().map(|a| a.lambda),
            trace_digest: Digest256(self.trace_hasher.clone().finalize().into()),
        }
    }
}

/// Runs `cfg.blocks` blocks of `trace`, calling `sink` after every block.
/// A breached invariant stops the run after its record reached the sink.
pub fn run_with(
    cfg: &SimConfig,
    trace: &TraceSpec,
    model: Option<TwfModel>,
    agent: Option<SafePpo>,
    mut sink: impl FnMut(&AuditRecord) -> Result<()>,
) -> Result<Simulation> {
    if cfg.blocks > trace.duration {
        return Err(Error::config("blocks", format!("{} exceeds the trace duration {}", cfg.blocks, trace.duration)));
    }
    let mut sim = Simulation::new(cfg.clone(), trace.clone(), model, agent)?;
    let source = generate(trace)?;
    for batch in source.take(cfg.blocks as usize) {
        let audit = sim.step(batch)?;
        sink(&audit)?;
        if let Some(msg) = audit.breach {
            return Err(Error::Invariant { height: audit.height, msg });
        }
    }
    Ok(sim)
}

/// Runs and collects every record in memory.
pub fn run(cfg: &SimConfig, trace: &TraceSpec, model: Option<TwfModel>, agent: Option<SafePpo>) -> Result<RunArtifact> {
    let mut audit = Vec::with_capacity(cfg.blocks as usize);
    let sim = run_with(cfg, trace, model, agent, |a| {
        audit.push(a.clone());
        Ok(())
    })?;
    Ok(RunArtifact {
        policy: cfg.policy,
        records: audit.iter().map(|a| a.record.clone()).collect(),
        final_state: sim.final_state(),
        timings: sim.timings().clone(),
        audit,
    })
}

/// Per-shard slot demand of a run as a forecaster training series.
pub fn load_series(records: &[BlockRecord], blocks_per_hour: u32) -> LoadSeries {
    LoadSeries {
        loads: records.iter().map(|r| r.demand.clone()).collect(),
        gas: records.iter().map(|r| r.arrival_gas).collect(),
        start_height: records.first().map_or(0, |r| r.height),
        blocks_per_hour,
    }
}

/// Demand series of `trace` under the static placement, the forecaster's
/// training material.
pub fn collect_series(cfg: &SimConfig, trace: &TraceSpec) -> Result<LoadSeries> {
    let cfg = SimConfig { policy: Policy::Static, ..cfg.clone() };
    let a = run(&cfg, trace, None, None)?;
    Ok(load_series(&a.records, trace.blocks_per_hour))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: u64,
    pub trace_seed: u64,
    pub target_shard: u16,
    pub blocks: u64,
    pub mean_imbalance: f64,
    pub moved: u64,
    pub updates: usize,
    pub lambda: f64,
}

/// Training variant `episode` of `base`: fresh trace seed, attack target
/// rotated across shards.
pub fn episode_trace(base: &TraceSpec, episode: u64) -> TraceSpec {
    let mut t = base.clone();
    t.seed = base.seed.wrapping_add(1 + episode).wrapping_mul(0x9E37_79B9);
    t.attack.target_shard = ((base.attack.target_shard as u64 + episode) % base.num_shards.max(1) as u64) as u16;
    t
}

/// Online Safe-PPO training over `episodes` variants of `base`.
pub fn train_policy(
    cfg: &SimConfig,
    base: &TraceSpec,
    episodes: u64,
    model: Option<TwfModel>,
    mut agent: SafePpo,
) -> Result<(SafePpo, Vec<EpisodeStats>)> {
    let mut stats = Vec::new();
    for ep in 0..episodes {
        let trace = episode_trace(base, ep);
        let c = SimConfig { policy: Policy::Psap, training: true, seed: cfg.seed.wrapping_add(ep), ..cfg.clone() };
        let before = agent.updates.len();
        let (mut sum, mut moved, mut n) = (0.0, 0, 0u64);
        let sim = run_with(&c, &trace, model.clone(), Some(agent), |a| {
            sum += a.record.imbalance.to_f64();
            moved += a.record.moved;
            n += 1;
            Ok(())
        })?;
        agent = sim.into_agent().expect("psap agent");
        stats.push(EpisodeStats {
            episode: ep,
            trace_seed: trace.seed,
            target_shard: trace.attack.target_shard,
            blocks: n,
            mean_imbalance: if n > 0 { sum / n as f64 } else { 0.0 },
            moved,
            updates: agent.updates.len() - before,
            lambda: agent.lambda,
        });
    }
    agent.training = false;
    Ok((agent, stats))
}
