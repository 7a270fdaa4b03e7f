//! Generates a hotspot trace, measures how much of the attack window lands on
//! the target shard, and round-trips the trace through CSV.

use psap::workload::{export_csv, generate, ingest_csv, AttackSpec, TraceKind, TraceSpec};
use psap::AllocationMap;

fn main() -> psap::Result<()> {
    let spec = TraceSpec {
        kind: TraceKind::Hotspot,
        num_shards: 8,
        base_rate: 280.0,
        duration: 400,
        attack: AttackSpec { start: 200, target_shard: 3, ..AttackSpec::default() },
        ..TraceSpec::default()
    };
    let blocks: Vec<_> = generate(&spec)?.collect();
    let alloc = AllocationMap::from_fn(spec.num_accounts as usize, spec.num_shards, |a| {
        psap::allocator::baseline_static(a, spec.num_shards)
    });

    for (label, range) in [("before attack", 0..200), ("during attack", 200..400)] {
        let (mut on_target, mut total) = (0usize, 0usize);
        for b in &blocks[range] {
            total += b.len();
            on_target += b.iter().filter(|tx| alloc.shard_of(tx.src).0 == 3).count();
        }
        println!("{label:>14}: {total} tx, {:.1}% from shard 3", 100.0 * on_target as f64 / total as f64);
    }

    let dir = tempfile::tempdir().map_err(|e| psap::Error::io("tempdir", e))?;
    let path = dir.path().join("trace.csv");
    export_csv(&path, &blocks)?;
    let back = ingest_csv(&path)?;
    println!("csv round trip identical: {}", back == blocks);
    Ok(())
}
