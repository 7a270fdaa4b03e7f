//! Migration policies: the Safe-PPO pointer policy and the static-hash and
//! threshold-reactive baselines.

mod baseline;
pub mod decode;
pub mod policy;
pub mod ppo;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use baseline::{baseline_reactive, baseline_static};
pub use decode::{decode, DecodeMode, DecodeStep, Decoded};
pub use policy::{PolicyInput, PolicyNet, QuantInput, QuantPolicy, FEATURES};
pub use ppo::{gae, update, Adam, PpoConfig, RolloutBuffer, Transition, UpdateStats};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::fixed::FixedPoint;
use crate::hash::Digest256;
use crate::twf::ForecastBundle;
use crate::types::{AccountId, BlockHeight, MigrationAction, Move, ShardId};

/// Reward weight on imbalance.
pub const ALPHA: f64 = 0.5;
/// Reward weight on migration gas share.
pub const BETA: f64 = 0.5;
/// Migration gas share above which a block incurs cost.
pub const COST_HINGE: f64 = 0.02;
/// Weight of the squared change in migration targets between decisions.
pub const SMOOTHNESS: f64 = 0.10;
/// Penalty per unit fraction of proposed moves the gate pruned.
pub const UNSAFE_PENALTY: f64 = 0.25;
/// Scale of the activity prior added to candidate logits.
pub const PRIOR_SCALE: i64 = 4;

/// An account the engine offers for relocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub account: AccountId,
    pub shard: ShardId,
    /// Recent activity in transactions per block.
    pub load: FixedPoint,
    /// Whether the account anchors a validator.
    pub validator: bool,
}

/// Everything a policy sees at one height.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub height: BlockHeight,
    /// Seed derived from the block hash for sampled decisions.
    pub seed: u64,
    /// Executed transactions per shard at the last block.
    pub loads: &'a [FixedPoint],
    /// Slot demand per shard at the last block (arrivals plus receipts).
    pub demand: &'a [FixedPoint],
    pub forecast: &'a ForecastBundle,
    pub byz_fraction: &'a [FixedPoint],
    pub capacity: &'a [u32],
    pub candidates: &'a [Candidate],
    /// Move budget for this block.
    pub budget: usize,
}

impl Observation<'_> {
    pub fn num_shards(&self) -> usize {
        self.loads.len()
    }

    /// Per shard, the larger of the hedged horizon mean and the observed demand.
    pub fn projected(&self) -> Vec<FixedPoint> {
        let hedged = self.forecast.hedged_mean();
        hedged.0.iter().zip(self.demand).map(|(a, b)| (*a).max(*b)).collect()
    }

    fn cap(&self, s: usize) -> FixedPoint {
        FixedPoint::from_int(self.capacity[s].max(1) as i64)
    }

    /// Moves allowed this block: the budget scaled by forecast confidence.
    pub fn move_cap(&self) -> usize {
        let c = self.forecast.confidence().max(FixedPoint::ZERO).min(FixedPoint::ONE);
        let v = FixedPoint::from_int(self.budget as i64) * c;
        (v.raw() >> crate::fixed::FRAC_BITS).max(0) as usize
    }
}

/// Flat policy state `[x/C, x̃/C (H steps), σ/C (H steps), byzantine share]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlState(pub Vec<FixedPoint>);

impl RlState {
    pub fn dim(num_shards: usize, horizon: usize) -> usize {
        2 * num_shards * horizon + 2 * num_shards
    }

    pub fn assemble(obs: &Observation<'_>) -> Self {
        let k = obs.num_shards();
        let f = obs.forecast;
        let mut v = Vec::with_capacity(Self::dim(k, f.horizon()));
        for s in 0..k {
            v.push(obs.loads[s] / obs.cap(s));
        }
        for step in &f.hedged {
            for s in 0..k {
                v.push(step.0[s] / obs.cap(s));
            }
        }
        for step in &f.variance {
            for s in 0..k {
                v.push(step.0[s].max(FixedPoint::ZERO).sqrt() / obs.cap(s));
            }
        }
        v.extend_from_slice(obs.byz_fraction);
        Self(v)
    }
}

/// Candidate features and activity priors for `obs`.
pub fn policy_input(obs: &Observation<'_>) -> QuantInput {
    let k = obs.num_shards();
    let projected = obs.projected();
    let sigma = obs.forecast.sigma_mean();
    let mean = projected.iter().copied().sum::<FixedPoint>() / FixedPoint::from_int(k.max(1) as i64);
    let max_load = obs.candidates.iter().map(|c| c.load).max().unwrap_or(FixedPoint::ZERO);
    let mut features = Vec::with_capacity(obs.candidates.len() * FEATURES);
    let mut prior = Vec::with_capacity(obs.candidates.len());
    for c in obs.candidates {
        let s = c.shard.index();
        let cap = obs.cap(s);
        features.extend_from_slice(&[
            c.load / cap,
            projected[s] / cap,
            (projected[s] - mean) / cap,
            sigma.0[s] / cap,
            obs.loads[s] / cap,
            if c.validator { FixedPoint::ONE } else { FixedPoint::ZERO },
        ]);
        prior.push(if max_load > FixedPoint::ZERO {
            FixedPoint::from_int(PRIOR_SCALE) * c.load.saturating_div(max_load)
        } else {
            FixedPoint::ZERO
        });
    }
    QuantInput { state: RlState::assemble(obs).0, features, prior }
}

/// `tps - α I - β M`.
pub fn reward(tps: FixedPoint, imbalance: FixedPoint, migration_share: FixedPoint) -> FixedPoint {
    tps - FixedPoint::from_f64(ALPHA) * imbalance - FixedPoint::from_f64(BETA) * migration_share
}

/// Hinge on the migration gas share.
pub fn cost(migration_share: FixedPoint) -> FixedPoint {
    (migration_share - FixedPoint::from_f64(COST_HINGE)).max(FixedPoint::ZERO)
}

/// Fraction of moves sent to each shard.
pub fn target_mix(moves: &[Move], num_shards: usize) -> Vec<f64> {
    let mut w = vec![0.0; num_shards];
    if moves.is_empty() {
        return w;
    }
    for m in moves {
        w[m.to.index()] += 1.0;
    }
    let n = moves.len() as f64;
    w.iter_mut().for_each(|x| *x /= n);
    w
}

/// Training reward: the base reward minus the smoothness and unsafe-proposal penalties.
pub fn shaped_reward(base: f64, prev_mix: &[f64], mix: &[f64], pruned_fraction: f64) -> f64 {
    let d2: f64 = prev_mix.iter().zip(mix).map(|(a, b)| (a - b).powi(2)).sum();
    base - SMOOTHNESS * d2 - UNSAFE_PENALTY * pruned_fraction
}

/// A decision and the bookkeeping the engine logs with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: MigrationAction,
    pub steps: usize,
    pub value: f64,
}

/// Safe-PPO agent: `f64` training net, quantized evaluation twin, rollout
/// buffer and dual variable.
#[derive(Clone, Debug)]
pub struct SafePpo {
    pub net: PolicyNet,
    quant: QuantPolicy,
    opt: Adam,
    pub cfg: PpoConfig,
    pub lambda: f64,
    pub training: bool,
    buffer: RolloutBuffer,
    pending: Option<Transition>,
    pub updates: Vec<UpdateStats>,
    /// Updates aborted on non-finite values.
    pub incidents: u64,
}

impl SafePpo {
    pub fn new(state_dim: usize, seed: u64, cfg: PpoConfig) -> Self {
        Self::from_net(PolicyNet::init(state_dim, seed), cfg.lambda_init, cfg)
    }

    pub fn from_net(net: PolicyNet, lambda: f64, cfg: PpoConfig) -> Self {
        let quant = net.quantize();
        let opt = Adam::new(net.num_params());
        let buffer = RolloutBuffer::new(cfg.rollout.max(1));
        Self { net, quant, opt, cfg, lambda, training: false, buffer, pending: None, updates: Vec::new(), incidents: 0 }
    }

    pub fn state_dim(&self) -> usize {
        self.net.state_dim()
    }

    pub fn quantized(&self) -> &QuantPolicy {
        &self.quant
    }

    pub fn act(&mut self, obs: &Observation<'_>) -> Decision {
        let qin = policy_input(obs);
        assert_eq!(qin.state.len(), self.state_dim(), "state layout does not match the policy");
        let projected = obs.projected();
        let cap = obs.move_cap();
        if !self.training {
            let (logits, stop) = self.quant.logits(&qin);
            let logits: Vec<f64> = logits.iter().map(|v| v.to_f64()).collect();
            let d = decode::<ChaCha8Rng>(obs.candidates, &projected, cap, &logits, stop.to_f64(), DecodeMode::Greedy);
            return Decision { action: MigrationAction { moves: d.moves }, steps: d.steps.len(), value: 0.0 };
        }
        let input = qin.to_f64();
        let mut f = self.net.forward(&input);
        if self.buffer.is_full() {
            match update(&mut self.net, &mut self.opt, &mut self.lambda, &self.buffer, (f.value, f.cost_value), &self.cfg)
            {
                Ok(s) => self.updates.push(s),
                Err(_) => self.incidents += 1,
            }
            self.buffer.clear();
            self.quant = self.net.quantize();
            f = self.net.forward(&input);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(obs.seed);
        let d = decode(obs.candidates, &projected, cap, &f.logits, f.stop, DecodeMode::Sample(&mut rng));
        let (lp, _) = decode::log_prob_entropy(&d.steps, &f.logits, f.stop);
        let steps = d.steps.len();
        self.pending = Some(Transition {
            input,
            steps: d.steps,
            old_log_prob: lp,
            value: f.value,
            cost_value: f.cost_value,
            reward: 0.0,
            cost: 0.0,
        });
        Decision { action: MigrationAction { moves: d.moves }, steps, value: f.value }
    }

    /// Completes the pending transition with its outcome.
    pub fn observe(&mut self, reward: f64, cost: f64) {
        if let Some(mut t) = self.pending.take() {
            t.reward = reward;
            t.cost = cost;
            if !self.buffer.is_full() {
                self.buffer.push(t);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(
            CheckpointKind::Policy,
            json!({
                "state_dim": self.state_dim(),
                "hidden": policy::HIDDEN,
                "embed": policy::EMBED,
                "features": FEATURES,
                "lambda_raw": FixedPoint::from_f64(self.lambda).raw(),
            }),
        );
        c.push("theta", self.quant.theta.clone());
        c
    }

    pub fn content_hash(&self) -> Digest256 {
        self.to_checkpoint().content_hash()
    }

    pub fn from_checkpoint(c: &Checkpoint, cfg: PpoConfig) -> Result<Self> {
        if c.kind != CheckpointKind::Policy {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let get = |k: &str| {
            c.meta.get(k).and_then(|v| v.as_i64()).ok_or_else(|| Error::Checkpoint(format!("missing meta field {k}")))
        };
        if get("hidden")? as usize != policy::HIDDEN
            || get("embed")? as usize != policy::EMBED
            || get("features")? as usize != FEATURES
        {
            return Err(Error::Checkpoint("policy architecture mismatch".into()));
        }
        let layout = policy::Layout::new(get("state_dim")? as usize);
        let theta = c.tensor_len("theta", layout.len())?;
        let quant = QuantPolicy { layout, theta };
        let lambda = FixedPoint::from_raw(get("lambda_raw")?).to_f64();
        let mut agent = Self::from_net(PolicyNet::from_quantized(&quant), lambda, cfg);
        agent.quant = quant;
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<Digest256> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>, cfg: PpoConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, cfg)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::LoadVector;

    pub(crate) struct Scene {
        pub loads: Vec<FixedPoint>,
        pub forecast: ForecastBundle,
        pub byz: Vec<FixedPoint>,
        pub capacity: Vec<u32>,
        pub candidates: Vec<Candidate>,
    }

    impl Scene {
        pub fn new(loads: &[f64], candidates: Vec<Candidate>) -> Self {
            let lv = LoadVector::from_f64(loads);
            Self {
                loads: lv.0.clone(),
                forecast: ForecastBundle::persistence(&lv, 4),
                byz: vec![FixedPoint::ZERO; loads.len()],
                capacity: vec![1000; loads.len()],
                candidates,
            }
        }

        pub fn obs(&self, budget: usize) -> Observation<'_> {
            Observation {
                height: BlockHeight(10),
                seed: 42,
                loads: &self.loads,
                demand: &self.loads,
                forecast: &self.forecast,
                byz_fraction: &self.byz,
                capacity: &self.capacity,
                candidates: &self.candidates,
                budget,
            }
        }
    }

    pub(crate) fn cands(per_shard: &[(u16, usize)], load: i64) -> Vec<Candidate> {
        let mut out = Vec::new();
        let mut id = 0;
        for &(s, n) in per_shard {
            for i in 0..n {
                out.push(Candidate {
                    account: AccountId(id),
                    shard: ShardId(s),
                    load: FixedPoint::from_int(load + i as i64 % 3),
                    validator: false,
                });
                id += 1;
            }
        }
        out
    }

    #[test]
    fn reward_and_cost_examples() {
        let r = |t: f64, i: f64, m: f64| {
            reward(FixedPoint::from_f64(t), FixedPoint::from_f64(i), FixedPoint::from_f64(m)).to_f64()
        };
        assert_eq!(r(1000.0, 0.0, 0.0), 1000.0);
        assert!((r(1000.0, 0.2, 0.01) - 999.895).abs() < 1e-4);
        let c = |m: f64| cost(FixedPoint::from_f64(m)).to_f64();
        assert_eq!(c(0.015), 0.0);
        assert!(c(0.02) < 1e-4);
        assert!((c(0.035) - 0.015).abs() < 1e-4);
    }

    #[test]
    fn state_layout_dimension() {
        let s = Scene::new(&[500.0, 300.0, 100.0], Vec::new());
        let st = RlState::assemble(&s.obs(5));
        assert_eq!(st.0.len(), RlState::dim(3, 4));
        assert_eq!(st.0[0], FixedPoint::from_f64(0.5));
    }

    #[test]
    fn balanced_forecast_gives_empty_action() {
        let s = Scene::new(&[400.0; 4], cands(&[(0, 5), (1, 5)], 10));
        let mut agent = SafePpo::new(RlState::dim(4, 4), 1, PpoConfig::default());
        assert!(agent.act(&s.obs(7)).action.is_empty());
    }

    #[test]
    fn hot_shard_is_the_only_source() {
        let s = Scene::new(&[800.0, 400.0, 400.0, 400.0], cands(&[(0, 30), (1, 10)], 12));
        let mut agent = SafePpo::new(RlState::dim(4, 4), 2, PpoConfig::default());
        let d = agent.act(&s.obs(7));
        assert!(!d.action.is_empty());
        assert!(d.action.len() <= 7);
        assert!(d.action.moves.iter().all(|m| m.from == ShardId(0)));
        let again = agent.act(&s.obs(7));
        assert_eq!(again.action, d.action);
    }

    #[test]
    fn bound_holds_with_many_candidates() {
        let s = Scene::new(&[990.0, 10.0, 10.0, 10.0], cands(&[(0, 500)], 1));
        let mut agent = SafePpo::new(RlState::dim(4, 4), 3, PpoConfig::default());
        let d = agent.act(&s.obs(100));
        assert!(d.action.len() <= 100);
        assert!(MigrationAction::new(d.action.moves).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let agent = SafePpo::new(RlState::dim(2, 4), 5, PpoConfig::default());
        let c = agent.to_checkpoint();
        let back = SafePpo::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap(), PpoConfig::default()).unwrap();
        assert_eq!(back.quantized(), agent.quantized());
        assert_eq!(back.content_hash(), agent.content_hash());
    }
}
