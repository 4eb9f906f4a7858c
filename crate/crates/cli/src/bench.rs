use std::io::Write;

use fusedmpc::batchexec::{latency_probe, write_latency_csv, LatencyRow, LatencySpec};
use fusedmpc::{BatchExecutor, DispatchMode};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub fn spec(cfg: &RunConfig) -> CliResult<LatencySpec> {
    let b = &cfg.bench;
    if b.batches.is_empty() || b.horizons.is_empty() || b.batches.contains(&0) || b.horizons.contains(&0) {
        return Err(CliError::Config("bench.B and bench.T must be non-empty lists of positive sizes".into()));
    }
    if b.reps == 0 || b.max_iter == 0 {
        return Err(CliError::Config("bench.reps and bench.K must be >= 1".into()));
    }
    Ok(LatencySpec {
        batches: b.batches.clone(),
        horizons: b.horizons.clone(),
        max_iter: b.max_iter,
        reps: b.reps,
        warmup: b.warmup,
        seed: cfg.seed,
    })
}

fn print_grid(rows: &[LatencyRow]) {
    println!(
        "{:<6} {:>5} {:>4} {:>3} {:>12} {:>12} {:>10} {:>8}",
        "mode", "B", "T", "K", "forward_ms", "backward_ms", "dispatch", "fwd/naive"
    );
    for r in rows {
        let naive = rows
            .iter()
            .find(|n| n.mode == DispatchMode::Naive && n.batch == r.batch && n.horizon == r.horizon)
            .map(|n| n.forward_ms);
        let ratio = naive.map_or_else(|| "-".to_string(), |n| format!("{:.3}", r.forward_ms / n));
        println!(
            "{:<6} {:>5} {:>4} {:>3} {:>12.3} {:>12.3} {:>10} {:>8}",
            r.mode.as_str(),
            r.batch,
            r.horizon,
            r.max_iter,
            r.forward_ms,
            r.backward_ms,
            r.dispatches,
            ratio
        );
    }
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let spec = spec(cfg)?;
    cfg.write_echo("bench", &cfg.out)?;
    let exec = BatchExecutor::new(cfg.workers)?;
    let rows = latency_probe::<f64>(&exec, &spec)?;
    let path = cfg.out.join("latency.csv");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_latency_csv(&rows, &mut w)?;
    w.flush()?;
    print_grid(&rows);
    println!("wrote {}", path.display());
    Ok(())
}
