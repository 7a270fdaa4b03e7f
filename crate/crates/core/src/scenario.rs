//! Scenario files: one TOML document drives trace generation, training and
//! every policy run of an experiment.
//!
//! ```toml
//! name = "hotspot"
//!
//! [trace]
//! kind = "hotspot"
//! num_shards = 8
//! base_rate = 280.0
//! duration = 5000
//!
//! [sim]
//! policy = "psap"
//! blocks = 5000
//!
//! [twf]
//! blocks = 4000
//!
//! [policy]
//! episodes = 4
//! blocks = 1500
//! ```
//!
//! Unknown keys anywhere are rejected. Relative checkpoint and replay paths
//! resolve against the scenario file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::PpoConfig;
use crate::error::{Error, Result};
use crate::sim::SimConfig;
use crate::twf::TrainConfig;
use crate::workload::TraceSpec;

/// Seed offset of the forecaster's training trace relative to the scenario trace.
pub const TWF_TRAIN_SEED_OFFSET: u64 = 10_007;
/// Seed offset of the held-out evaluation trace.
pub const TWF_EVAL_SEED_OFFSET: u64 = 20_011;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwfSection {
    /// Length of the training series.
    pub blocks: u64,
    /// Length of the held-out evaluation series.
    pub eval_blocks: u64,
    pub eval_horizons: Vec<usize>,
    pub eval_stride: usize,
    pub train: TrainConfig,
}

impl Default for TwfSection {
    fn default() -> Self {
        Self { blocks: 4000, eval_blocks: 1500, eval_horizons: vec![8, 32, 64], eval_stride: 8, train: TrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    /// Online learning on; `false` leaves no rollout source to train from.
    pub training: bool,
    pub episodes: u64,
    /// Blocks per episode.
    pub blocks: u64,
    pub seed: u64,
    pub ppo: PpoConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { training: true, episodes: 4, blocks: 1500, seed: 3, ppo: PpoConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub trace: TraceSpec,
    pub sim: SimConfig,
    pub twf: TwfSection,
    pub policy: PolicySection,
    /// Output directory; the output-root environment variable and `--out` take precedence.
    pub output_dir: Option<PathBuf>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            trace: TraceSpec::default(),
            sim: SimConfig::default(),
            twf: TwfSection::default(),
            policy: PolicySection::default(),
            output_dir: None,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "scenario".to_string());
            Error::config(key, msg)
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut s.sim.twf_checkpoint);
        resolve(base, &mut s.sim.policy_checkpoint);
        resolve(base, &mut s.trace.replay_path);
        resolve(base, &mut s.output_dir);
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.trace.validate()?;
        self.sim.validate(self.trace.num_shards)?;
        if self.sim.blocks > self.trace.duration {
            return Err(Error::config(
                "sim.blocks",
                format!("{} exceeds trace.duration {}", self.sim.blocks, self.trace.duration),
            ));
        }
        if self.twf.train.window != self.sim.window {
            return Err(Error::config("twf.train.window", "must equal sim.window"));
        }
        if self.twf.eval_stride == 0 {
            return Err(Error::config("twf.eval_stride", "must be positive"));
        }
        Ok(())
    }

    /// Overrides the master seed of both the trace and the engine.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.trace.seed = seed;
        self.sim.seed = seed;
        self
    }

    /// Fully resolved document, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Trace the forecaster trains on: same generator, disjoint seed.
    pub fn twf_train_trace(&self) -> TraceSpec {
        let mut t = self.trace.clone();
        t.seed = self.trace.seed.wrapping_add(TWF_TRAIN_SEED_OFFSET);
        t.duration = self.twf.blocks;
        t
    }

    pub fn twf_eval_trace(&self) -> TraceSpec {
        let mut t = self.trace.clone();
        t.seed = self.trace.seed.wrapping_add(TWF_EVAL_SEED_OFFSET);
        t.duration = self.twf.eval_blocks;
        t
    }

    /// Base trace of the policy-training episodes.
    pub fn policy_trace(&self) -> TraceSpec {
        let mut t = self.trace.clone();
        t.duration = self.policy.blocks;
        if t.attack.start >= t.duration {
            t.attack.start = t.duration / 5;
        }
        t
    }
}
