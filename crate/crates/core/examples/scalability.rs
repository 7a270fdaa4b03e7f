//! Saturating static runs at growing shard counts, fitted to
//! `T(K) = T0 K / (1 + beta (K - 1))`.

use psap::report::{eta_claim_gap, fit_scalability};
use psap::sim::{run, Policy, SimConfig};
use psap::workload::{TraceKind, TraceSpec};

fn main() -> psap::Result<()> {
    let mut points = Vec::new();
    for k in [4u16, 8, 16, 32] {
        let trace = TraceSpec { kind: TraceKind::Poisson, num_shards: k, base_rate: 1500.0, duration: 300, ..TraceSpec::default() };
        let a = run(&SimConfig { policy: Policy::Static, blocks: 300, ..SimConfig::default() }, &trace, None, None)?;
        let tps = a.records[100..].iter().map(|r| r.tps as f64).sum::<f64>() / 200.0;
        println!("K={k:<2} throughput {tps:8.1} tx/block, cross-shard {:.3}", a.records[299].cross_ratio.to_f64());
        points.push((k as u32, tps));
    }
    let fit = fit_scalability(&points)?;
    println!("T0 {:.1}, beta {:.5}, R^2 {:.4}", fit.t0, fit.beta, fit.r_squared);
    for k in [8, 32, 64] {
        println!("  eta({k}) = {:.3}", fit.eta(k));
    }
    let (claimed, implied) = eta_claim_gap();
    println!("claimed eta(64) {claimed:.3}; the claimed beta gives {implied:.3}");
    Ok(())
}
