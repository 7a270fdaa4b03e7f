//! Replaces 20% of validators at every epoch boundary and measures the
//! throughput dip around each boundary.

use psap::report::churn_dip;
use psap::sim::{run, Policy, SimConfig};
use psap::workload::TraceSpec;

fn main() -> psap::Result<()> {
    let trace = TraceSpec { duration: 1500, ..TraceSpec::default() };
    let cfg = SimConfig { policy: Policy::Static, blocks: 1500, churn_rate: 0.2, epoch_length: 250, ..SimConfig::default() };
    let a = run(&cfg, &trace, None, None)?;
    let tps: Vec<f64> = a.records.iter().map(|r| r.tps as f64).collect();
    for b in (250..1500).step_by(250) {
        let churned: usize = a.audit[b].churned;
        if let Some(d) = churn_dip(&tps, b, 10) {
            println!("boundary {b}: {churned} replaced, steady {:.0} tx/block, dip {:.2}%, recovery {}", d.steady, 100.0 * d.dip, d.recovery);
        }
    }
    Ok(())
}
