//! Transaction traces: synthetic generators, attack overlays, CSV replay and
//! UTXO-to-account mapping.

mod adversary;
mod csv_io;
mod sampling;
mod utxo;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

pub use adversary::{adaptive_adversary_step, adversary_pattern, hot_accounts};
pub use csv_io::{export_csv, ingest_csv, read_utxo_csv, write_utxo_csv};
pub use sampling::{hour_of, poisson};
pub use utxo::{cluster_utxo, ClusterOutput, PseudoAccount, UtxoRecord};

use crate::allocator::baseline_static;
use crate::error::{Error, Result};
use crate::fixed::{math, FixedPoint};
use crate::types::{AccountId, BlockHeight, ShardId, Transaction};

/// Transactions arriving in one block.
pub type BlockBatch = Vec<Transaction>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Poisson,
    Diurnal,
    Hotspot,
    StakeBribery,
    Adaptive,
    Replay,
}

impl TraceKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "poisson" => Self::Poisson,
            "diurnal" => Self::Diurnal,
            "hotspot" => Self::Hotspot,
            "stake_bribery" => Self::StakeBribery,
            "adaptive" => Self::Adaptive,
            "replay" => Self::Replay,
            other => return Err(Error::config("kind", format!("unknown trace kind `{other}`"))),
        })
    }
}

/// Rate multiplier over a window of blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub start: u64,
    pub length: u64,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    /// Share of all arrivals diverted to the target shard (hotspot).
    pub fraction: f64,
    pub target_shard: u16,
    pub start: u64,
    /// Exclusive end; `None` runs to the end of the trace.
    pub stop: Option<u64>,
    /// Size of the diverted-to account set inside the target shard.
    pub hot_accounts: usize,
    /// Oscillation amplitude of the adaptive adversary.
    pub amplitude: f64,
    /// Blocks per oscillation cycle of the adaptive adversary (ω = 1/period).
    pub period: u64,
    /// Byzantine validator relocation requests per block (stake bribery).
    pub bribery_rate: f64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            fraction: 0.35,
            target_shard: 3,
            start: 500,
            stop: None,
            hot_accounts: 64,
            amplitude: 0.35,
            period: 100,
            bribery_rate: 0.5,
        }
    }
}

impl AttackSpec {
    pub fn active(&self, height: u64) -> bool {
        height >= self.start && self.stop.is_none_or(|s| height < s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSpec {
    pub kind: TraceKind,
    pub num_shards: u16,
    pub num_accounts: u64,
    /// Mean arrivals per block per shard.
    pub base_rate: f64,
    pub duration: u64,
    pub seed: u64,
    /// Zipf exponent of per-account activity.
    pub activity_skew: f64,
    /// Relative amplitude of the day cycle; defaults to 0.3 for `diurnal`, 0 otherwise.
    pub diurnal_amplitude: Option<f64>,
    pub blocks_per_hour: u32,
    pub gas_min: u64,
    pub gas_max: u64,
    pub bursts: Vec<Burst>,
    pub attack: AttackSpec,
    pub replay_path: Option<PathBuf>,
}

impl Default for TraceSpec {
    fn default() -> Self {
        Self {
            kind: TraceKind::Poisson,
            num_shards: 8,
            num_accounts: 8192,
            base_rate: 500.0,
            duration: 2000,
            seed: 7,
            activity_skew: 0.9,
            diurnal_amplitude: None,
            blocks_per_hour: 10,
            gas_min: 300,
            gas_max: 1000,
            bursts: Vec::new(),
            attack: AttackSpec::default(),
            replay_path: None,
        }
    }
}

impl TraceSpec {
    pub fn validate(&self) -> Result<()> {
        let a = &self.attack;
        if !(0.0..=1.0).contains(&a.fraction) {
            return Err(Error::config("attack.fraction", format!("{} is outside [0, 1]", a.fraction)));
        }
        if !(0.0..1.0).contains(&a.amplitude) {
            return Err(Error::config("attack.amplitude", format!("{} is outside [0, 1)", a.amplitude)));
        }
        if self.duration == 0 {
            return Err(Error::config("duration", "must be positive"));
        }
        if self.num_shards == 0 {
            return Err(Error::config("num_shards", "must be positive"));
        }
        if a.target_shard >= self.num_shards {
            return Err(Error::config("attack.target_shard", "must be below num_shards"));
        }
        if self.num_accounts < 2 {
            return Err(Error::config("num_accounts", "need at least two accounts"));
        }
        if self.base_rate < 0.0 || !self.base_rate.is_finite() {
            return Err(Error::config("base_rate", "must be a finite non-negative rate"));
        }
        if self.gas_min == 0 || self.gas_max < self.gas_min {
            return Err(Error::config("gas_min", "need 0 < gas_min <= gas_max"));
        }
        if self.blocks_per_hour == 0 {
            return Err(Error::config("blocks_per_hour", "must be positive"));
        }
        if a.period == 0 {
            return Err(Error::config("attack.period", "must be positive"));
        }
        if let Some(d) = self.diurnal_amplitude {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config("diurnal_amplitude", "must lie in [0, 1)"));
            }
        }
        if self.kind == TraceKind::Replay && self.replay_path.is_none() {
            return Err(Error::config("replay_path", "required for replay traces"));
        }
        Ok(())
    }

    pub fn effective_diurnal_amplitude(&self) -> f64 {
        self.diurnal_amplitude
            .unwrap_or(if self.kind == TraceKind::Diurnal { 0.3 } else { 0.0 })
    }

    /// Expected arrivals across all shards at `height`, before attack overlays.
    pub fn rate_at(&self, height: u64) -> f64 {
        let mut rate = self.base_rate * self.num_shards as f64;
        let amp = self.effective_diurnal_amplitude();
        if amp > 0.0 {
            let hour = hour_of(height, self.blocks_per_hour);
            let (s, _) = math::portable_sin_cos(std::f64::consts::TAU * hour / 24.0);
            rate *= 1.0 + amp * s;
        }
        for b in &self.bursts {
            if height >= b.start && height < b.start + b.length {
                rate *= b.multiplier;
            }
        }
        rate
    }
}

/// Build a trace source for `spec`: a synthetic generator or a CSV replay.
pub fn generate(spec: &TraceSpec) -> Result<Box<dyn Iterator<Item = BlockBatch> + Send>> {
    spec.validate()?;
    if spec.kind == TraceKind::Replay {
        let path = spec.replay_path.as_ref().expect("validated");
        let blocks = ingest_csv(path)?;
        return Ok(Box::new(blocks.into_iter().take(spec.duration as usize)));
    }
    Ok(Box::new(TraceGenerator::new(spec.clone())?))
}

/// Pull-based synthetic generator; deterministic in `(spec, seed)`.
pub struct TraceGenerator {
    spec: TraceSpec,
    rng: ChaCha8Rng,
    height: u64,
    accounts: WeightedAliasIndex<f64>,
    rank_to_account: Vec<u64>,
    hot: Vec<AccountId>,
}

impl TraceGenerator {
    pub fn new(spec: TraceSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.num_accounts as usize;
        // Random rank permutation so heavy hitters are spread over the id space.
        let mut rank_to_account: Vec<u64> = (0..n as u64).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i as u64) as usize;
            rank_to_account.swap(i, j);
        }
        let weights: Vec<f64> = (0..n)
            .map(|r| 1.0 / math::portable_exp(spec.activity_skew * ln_portable((r + 1) as f64)))
            .collect();
        let accounts = WeightedAliasIndex::new(weights)
            .map_err(|e| Error::config("activity_skew", e.to_string()))?;
        let hot = hot_accounts(&spec);
        Ok(Self { spec, rng, height: 0, accounts, rank_to_account, hot })
    }

    pub fn spec(&self) -> &TraceSpec {
        &self.spec
    }

    fn draw_account(&mut self) -> AccountId {
        AccountId(self.rank_to_account[self.accounts.sample(&mut self.rng)])
    }

    fn draw_outside(&mut self, shard: ShardId) -> AccountId {
        let k = self.spec.num_shards;
        loop {
            let a = self.draw_account();
            if baseline_static(a, k) != shard {
                return a;
            }
        }
    }

    fn next_batch(&mut self) -> BlockBatch {
        let h = self.height;
        let rate = self.spec.rate_at(h);
        let n = poisson(&mut self.rng, rate);
        let attack = &self.spec.attack;
        let hotspot = self.spec.kind == TraceKind::Hotspot && attack.active(h) && !self.hot.is_empty();
        let target = ShardId(attack.target_shard);
        let fraction = attack.fraction;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let src = if hotspot {
                if self.rng.random_bool(fraction) {
                    self.hot[self.rng.random_range(0..self.hot.len() as u64) as usize]
                } else {
                    self.draw_outside(target)
                }
            } else {
                self.draw_account()
            };
            let mut dst = self.draw_account();
            if dst == src {
                dst = self.draw_account();
            }
            let gas = self.rng.random_range(self.spec.gas_min..=self.spec.gas_max);
            let value = FixedPoint::from_int(self.rng.random_range(1..=100));
            out.push(Transaction { src, dst, value, gas, arrival_block: BlockHeight(h) });
        }
        out
    }
}

impl Iterator for TraceGenerator {
    type Item = BlockBatch;

    fn next(&mut self) -> Option<BlockBatch> {
        if self.height >= self.spec.duration {
            return None;
        }
        let batch = self.next_batch();
        self.height += 1;
        Some(batch)
    }
}

/// Natural log from basic IEEE operations (bisection on the exponent, then
/// Newton on `portable_exp`), so generator weights are platform-independent.
fn ln_portable(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut y = 0.0;
    let mut m = x;
    while m > 2.0 {
        m /= 2.0;
        y += std::f64::consts::LN_2;
    }
    while m < 1.0 {
        m *= 2.0;
        y -= std::f64::consts::LN_2;
    }
    let mut z = (m - 1.0) / (m + 1.0) * 2.0;
    for _ in 0..8 {
        let e = math::portable_exp(z);
        z -= (e - m) / e;
    }
    y + z
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TraceKind) -> TraceSpec {
        TraceSpec { kind, duration: 10, base_rate: 100.0, seed: 11, ..TraceSpec::default() }
    }

    #[test]
    fn poisson_is_deterministic() {
        let a: Vec<BlockBatch> = generate(&spec(TraceKind::Poisson)).unwrap().collect();
        let b: Vec<BlockBatch> = generate(&spec(TraceKind::Poisson)).unwrap().collect();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        let mean = a.iter().map(|x| x.len()).sum::<usize>() as f64 / 10.0;
        assert!((mean - 800.0).abs() < 60.0, "{mean}");
    }

    #[test]
    fn other_seed_differs() {
        let a: Vec<BlockBatch> = generate(&spec(TraceKind::Poisson)).unwrap().collect();
        let s = TraceSpec { seed: 12, ..spec(TraceKind::Poisson) };
        let b: Vec<BlockBatch> = generate(&s).unwrap().collect();
        assert_ne!(a, b);
    }

    #[test]
    fn hotspot_share_matches_fraction() {
        let s = TraceSpec {
            kind: TraceKind::Hotspot,
            duration: 200,
            attack: AttackSpec { start: 0, target_shard: 3, fraction: 0.35, ..AttackSpec::default() },
            ..TraceSpec::default()
        };
        let (mut hit, mut total) = (0usize, 0usize);
        for batch in generate(&s).unwrap() {
            total += batch.len();
            hit += batch.iter().filter(|t| baseline_static(t.src, 8) == ShardId(3)).count();
        }
        let share = hit as f64 / total as f64;
        // binomial sd over ~800k draws is ~5e-4
        assert!((share - 0.35).abs() < 0.005, "{share}");
    }

    #[test]
    fn burst_ratio_is_five() {
        let s = TraceSpec {
            duration: 600,
            base_rate: 50.0,
            bursts: vec![Burst { start: 200, length: 200, multiplier: 5.0 }],
            ..TraceSpec::default()
        };
        let counts: Vec<usize> = generate(&s).unwrap().map(|b| b.len()).collect();
        let inside: f64 = counts[200..400].iter().sum::<usize>() as f64 / 200.0;
        let outside: f64 =
            (counts[..200].iter().sum::<usize>() + counts[400..].iter().sum::<usize>()) as f64 / 400.0;
        let ratio = inside / outside;
        assert!((ratio / 5.0 - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn diurnal_rate_cycles() {
        let s = TraceSpec { kind: TraceKind::Diurnal, blocks_per_hour: 10, ..TraceSpec::default() };
        let peak = s.rate_at(60); // hour 6: sin = 1
        let trough = s.rate_at(180); // hour 18: sin = -1
        assert!((peak / (8.0 * 500.0) - 1.3).abs() < 1e-9);
        assert!((trough / (8.0 * 500.0) - 0.7).abs() < 1e-9);
    }

    #[test]
    fn validation_errors_name_keys() {
        let mut s = TraceSpec::default();
        s.attack.fraction = 1.5;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("attack.fraction"), "{err}");
        assert!(TraceKind::parse("tsunami").is_err());
        let zero = TraceSpec { duration: 0, ..TraceSpec::default() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn portable_ln_matches() {
        for x in [0.3, 1.0, 2.5, 1000.0, 8192.0] {
            assert!((ln_portable(x) - x.ln()).abs() < 1e-12, "{x}");
        }
    }
}
