//! Scenario-level steps shared by the command-line tool, the examples and the
//! acceptance suite: forecaster training, policy training and archived runs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{RlState, SafePpo};
use crate::error::{Error, Result};
use crate::report::{self, Format, RunSummary};
use crate::scenario::Scenario;
use crate::sim::{self, EpisodeStats, FinalState, Policy, SimConfig, StageTimings};
use crate::twf::{self, HorizonAccuracy, TrainReport, TwfModel};

#[derive(Clone, Debug)]
pub struct TwfOutcome {
    pub model: TwfModel,
    pub report: TrainReport,
    pub accuracy: Vec<HorizonAccuracy>,
}

/// Trains the forecaster on the scenario's training trace and scores it on
/// the held-out trace at every configured horizon.
pub fn train_twf(sc: &Scenario) -> Result<TwfOutcome> {
    let collect = |trace: crate::workload::TraceSpec| {
        let cfg = SimConfig { blocks: trace.duration, ..sc.sim.clone() };
        sim::collect_series(&cfg, &trace)
    };
    let series = collect(sc.twf_train_trace())?;
    let (model, report) = twf::train(&series, &sc.twf.train)?;
    let held_out = collect(sc.twf_eval_trace())?;
    let accuracy = sc
        .twf
        .eval_horizons
        .iter()
        .map(|h| twf::evaluate(&model, &held_out, *h, sc.twf.eval_stride))
        .collect::<Result<Vec<_>>>()?;
    Ok(TwfOutcome { model, report, accuracy })
}

/// Online Safe-PPO training; the returned agent is in evaluation mode.
pub fn train_policy(sc: &Scenario, model: Option<TwfModel>) -> Result<(SafePpo, Vec<EpisodeStats>)> {
    if !sc.policy.training || sc.policy.episodes == 0 || sc.policy.blocks == 0 {
        return Err(Error::NoRolloutSource);
    }
    let dim = RlState::dim(sc.trace.num_shards as usize, sc.sim.horizon);
    let agent = SafePpo::new(dim, sc.policy.seed, sc.policy.ppo.clone());
    let cfg = SimConfig { blocks: sc.policy.blocks, ..sc.sim.clone() };
    sim::train_policy(&cfg, &sc.policy_trace(), sc.policy.episodes, model, agent)
}

fn missing(key: &str, path: &Path) -> Error {
    Error::config(key, format!("checkpoint {} does not exist", path.display()))
}

/// Loads the checkpoints `policy` needs.
pub fn load_models(sc: &Scenario, policy: Policy) -> Result<(Option<TwfModel>, Option<SafePpo>)> {
    if policy != Policy::Psap {
        return Ok((None, None));
    }
    let model = match &sc.sim.twf_checkpoint {
        Some(p) if !p.exists() => return Err(missing("sim.twf_checkpoint", p)),
        Some(p) => Some(TwfModel::load(p)?),
        None => None,
    };
    let agent = match &sc.sim.policy_checkpoint {
        Some(p) if !p.exists() => return Err(missing("sim.policy_checkpoint", p)),
        Some(p) => SafePpo::load(p, sc.policy.ppo.clone())?,
        None => return Err(Error::config("sim.policy_checkpoint", "the psap policy needs a trained checkpoint")),
    };
    Ok((model, Some(agent)))
}

/// Everything written next to a run except the per-block streams.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub policy: Policy,
    pub final_state: FinalState,
    pub summary: RunSummary,
    pub twf_hash: Option<String>,
    pub policy_hash: Option<String>,
}

/// Runs `policy` on the scenario and archives it under `dir`: the resolved
/// scenario, `audit.jsonl` (flushed per block, so it survives a breach),
/// records in `format`, the manifest and stage timings.
pub fn run_archived(sc: &Scenario, policy: Policy, dir: &Path, format: Format) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = Scenario { sim: SimConfig { policy, ..sc.sim.clone() }, ..sc.clone() };
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("scenario.toml", &resolved.to_toml())?;
    let (model, agent) = load_models(&resolved, policy)?;
    let twf_hash = model.as_ref().map(|m| m.content_hash().to_hex());
    let policy_hash = agent.as_ref().map(|a| a.content_hash().to_hex());

    let audit_path = dir.join("audit.jsonl");
    let file = fs::File::create(&audit_path).map_err(|e| Error::io(&audit_path, e))?;
    let mut audit = BufWriter::new(file);
    let mut records = Vec::with_capacity(resolved.sim.blocks as usize);
    let outcome = sim::run_with(&resolved.sim, &resolved.trace, model, agent, |a| {
        serde_json::to_writer(&mut audit, a)?;
        audit.write_all(b"\n").map_err(|e| Error::io(&audit_path, e))?;
        audit.flush().map_err(|e| Error::io(&audit_path, e))?;
        records.push(a.record.clone());
        Ok(())
    });
    let sim = outcome?;
    report::export(dir, &records, format)?;
    if format != Format::Jsonl {
        report::write_jsonl(&dir.join("records.jsonl"), &records)?;
    }
    let attack = matches!(
        resolved.trace.kind,
        crate::workload::TraceKind::Hotspot | crate::workload::TraceKind::Adaptive | crate::workload::TraceKind::StakeBribery
    )
    .then_some(resolved.trace.attack.start);
    let manifest = RunManifest {
        scenario: resolved.name.clone(),
        policy,
        final_state: sim.final_state(),
        summary: report::summarize(&records, attack)?,
        twf_hash,
        policy_hash,
    };
    write("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
    let timings: &StageTimings = sim.timings();
    write("timings.json", &serde_json::to_string_pretty(timings)?)?;
    Ok(manifest)
}

/// Output root: the environment override when set, else `runs`.
pub const OUT_ENV: &str = "PSAP_OUT";

pub fn output_dir(sc: &Scenario, out: Option<&Path>) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    if let Some(root) = std::env::var_os(OUT_ENV) {
        return PathBuf::from(root).join(&sc.name);
    }
    sc.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&sc.name))
}
