//! Runs a scenario under several policies and archives each run.
//!
//! ```text
//! cargo run --release --example compare_policies -- scenarios/hotspot.toml
//! ```
//!
//! Psap is included when the scenario's checkpoints exist (see
//! `scenarios/train.toml`).

use psap::pipeline::run_archived;
use psap::report::Format;
use psap::scenario::Scenario;
use psap::sim::Policy;

fn main() -> psap::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "scenarios/smoke.toml".into());
    let sc = Scenario::load(&path)?;
    let trained = sc.sim.policy_checkpoint.as_ref().is_some_and(|p| p.exists());
    let mut policies = vec![Policy::Static, Policy::Reactive];
    if trained {
        policies.insert(0, Policy::Psap);
    }
    let out = tempfile::tempdir().map_err(|e| psap::Error::io("tempdir", e))?;
    for p in policies {
        let m = run_archived(&sc, p, &out.path().join(p.as_str()), Format::Csv)?;
        let s = &m.summary;
        println!(
            "{:>8}  tps {:7.1}  imbalance {:.3}  migration gas p95 {:.4}  recovery {}",
            p.as_str(),
            s.tps.mean,
            s.imbalance.mean,
            s.migration_share.p95,
            s.recovery.map_or("-".into(), |r| r.to_string())
        );
    }
    if !trained {
        println!("(psap skipped: train the checkpoints first)");
    }
    Ok(())
}
