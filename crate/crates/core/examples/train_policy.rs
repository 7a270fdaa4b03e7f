//! Trains the allocation policy online for a few short hotspot episodes,
//! saves and reloads the checkpoint, then evaluates it against static hashing.

use psap::allocator::{PpoConfig, RlState, SafePpo};
use psap::report::summarize;
use psap::sim::{run, train_policy, Policy, SimConfig};
use psap::workload::{AttackSpec, TraceKind, TraceSpec};

fn main() -> psap::Result<()> {
    let trace = TraceSpec {
        kind: TraceKind::Hotspot,
        num_shards: 8,
        duration: 800,
        attack: AttackSpec { start: 200, ..AttackSpec::default() },
        ..TraceSpec::default()
    };
    let cfg = SimConfig { blocks: 800, ..SimConfig::default() };
    let agent = SafePpo::new(RlState::dim(8, cfg.horizon), 7, PpoConfig::default());

    // no forecaster: the policy sees persistence forecasts
    let (agent, episodes) = train_policy(&cfg, &trace, 3, None, agent)?;
    for e in &episodes {
        println!("episode {}: target shard {}, mean imbalance {:.3}, {} moved, {} updates", e.episode, e.target_shard, e.mean_imbalance, e.moved, e.updates);
    }

    let dir = tempfile::tempdir().map_err(|e| psap::Error::io("tempdir", e))?;
    let path = dir.path().join("policy.ckpt");
    let hash = agent.save(&path)?;
    let agent = SafePpo::load(&path, PpoConfig::default())?;
    println!("checkpoint {}", hash.to_hex());

    for (policy, agent) in [(Policy::Psap, Some(agent)), (Policy::Static, None)] {
        let a = run(&SimConfig { policy, ..cfg.clone() }, &trace, None, agent)?;
        let s = summarize(&a.records, Some(200))?;
        println!("{:>7}: mean imbalance {:.3}, recovery {:?}", policy.as_str(), s.imbalance.mean, s.recovery);
    }
    Ok(())
}
