//! Two runs with the same seed produce byte-identical audit logs; a different
//! seed does not.

use psap::allocator::{PpoConfig, RlState, SafePpo};
use psap::sim::{run, Policy, SimConfig};
use psap::workload::{TraceKind, TraceSpec};

fn audit_bytes(seed: u64) -> psap::Result<(Vec<u8>, String)> {
    let trace = TraceSpec { kind: TraceKind::Hotspot, duration: 300, seed, ..TraceSpec::default() };
    let cfg = SimConfig { policy: Policy::Psap, blocks: 300, seed, ..SimConfig::default() };
    let agent = SafePpo::new(RlState::dim(trace.num_shards as usize, cfg.horizon), 1, PpoConfig::default());
    let a = run(&cfg, &trace, None, Some(agent))?;
    let mut bytes = Vec::new();
    for r in &a.audit {
        bytes.extend(serde_json::to_vec(r)?);
        bytes.push(b'\n');
    }
    Ok((bytes, a.final_state.block_hash.to_hex()))
}

fn main() -> psap::Result<()> {
    let (a, ha) = audit_bytes(9)?;
    let (b, hb) = audit_bytes(9)?;
    let (_, hc) = audit_bytes(10)?;
    println!("seed 9 twice: {} bytes each, identical {}", a.len(), a == b);
    println!("final hashes: {ha} / {hb}");
    println!("seed 10:      {hc}");
    Ok(())
}
