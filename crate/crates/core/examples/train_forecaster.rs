//! Trains the load forecaster on a diurnal series and scores it on a held-out
//! series with a different seed.

use psap::sim::{collect_series, SimConfig};
use psap::twf::{evaluate, train, TrainConfig};
use psap::workload::{TraceKind, TraceSpec};

fn main() -> psap::Result<()> {
    let trace = |seed, duration| TraceSpec { kind: TraceKind::Diurnal, num_shards: 8, duration, seed, ..TraceSpec::default() };
    let cfg = |t: &TraceSpec| SimConfig { blocks: t.duration, ..SimConfig::default() };

    let train_trace = trace(101, 2500);
    let series = collect_series(&cfg(&train_trace), &train_trace)?;
    let (model, report) = train(&series, &TrainConfig::default())?;
    println!(
        "trained {} epochs, validation NMSE {:.4} -> {:.4} (best epoch {})",
        report.epochs_run, report.initial_val_nmse, report.best_val_nmse, report.best_epoch
    );

    let held = trace(202, 1000);
    let held_out = collect_series(&cfg(&held), &held)?;
    for h in [1, 8, 32] {
        let acc = evaluate(&model, &held_out, h, 8)?;
        println!("H={h:<2} MAPE {:5.2}%  MAE {:6.2}  ({} origins)", acc.overall.mape, acc.overall.mae, acc.origins);
    }
    Ok(())
}
