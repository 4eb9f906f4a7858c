use std::io::Write;
use std::path::{Path, PathBuf};

use fusedmpc_rl::checkpoint::Checkpoint;
use fusedmpc_rl::trainer::{Trainer, METRICS_CSV_HEADER};
use fusedmpc_rl::{RaceEnv, TrackSpec, TrainMode};

use crate::config::{GridConfig, RunConfig};
use crate::error::{CliError, CliResult};

pub fn load_track(cfg: &RunConfig) -> CliResult<TrackSpec> {
    Ok(match &cfg.track {
        Some(p) => TrackSpec::load(p)?,
        None => TrackSpec::bundled(),
    })
}

/// Output directory per `(T, K)` cell; a single cell writes into `out` itself.
pub fn cells(cfg: &RunConfig) -> CliResult<Vec<(usize, usize, PathBuf)>> {
    if cfg.train.mode == TrainMode::AcMlp {
        return Ok(vec![(0, 0, cfg.out.clone())]);
    }
    let cells = cfg.grid.cells();
    if cells.is_empty() {
        return Err(CliError::Config("grid.T and grid.K must both be non-empty".into()));
    }
    let single = cells.len() == 1;
    Ok(cells
        .into_iter()
        .map(|(t, k)| {
            let dir = if single { cfg.out.clone() } else { cfg.out.join(format!("T{t}_K{k}")) };
            (t, k, dir)
        })
        .collect())
}

pub fn run(cfg: &RunConfig, resume: Option<&Path>) -> CliResult<()> {
    let track = load_track(cfg)?;
    let cells = cells(cfg)?;
    if resume.is_some() && cells.len() > 1 {
        return Err(CliError::Config("--resume needs a single (T, K) cell".into()));
    }
    let ckpt = resume.map(Checkpoint::load).transpose()?;
    for (t, k, dir) in cells {
        let mut cell = cfg.clone();
        cell.out = dir.clone();
        cell.grid = GridConfig {
            horizons: vec![t],
            iterations: vec![k],
        };
        let tc = cfg.train_config(t, k);
        tc.validate()?;
        let env = RaceEnv::<f32>::new(track.clone(), cfg.race.clone())?;
        cell.write_echo("train", &dir)?;
        let mut trainer = match &ckpt {
            Some(c) => Trainer::resume(tc, env, c, cfg.seed)?,
            None => Trainer::new(tc, env, cfg.seed)?,
        };
        if cfg.train.mode == TrainMode::AcMpc {
            println!("training ac_mpc T={t} K={k} -> {}", dir.display());
        } else {
            println!("training ac_mlp -> {}", dir.display());
        }
        train_cell(&mut trainer, &dir, ckpt.is_some())?;
    }
    Ok(())
}

fn train_cell(trainer: &mut Trainer<f32>, dir: &Path, append: bool) -> CliResult<()> {
    let path = dir.join("metrics.csv");
    let exists = path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&path)?;
    let mut metrics = std::io::BufWriter::new(file);
    if !(append && exists) {
        writeln!(metrics, "{METRICS_CSV_HEADER}")?;
    }
    let every = trainer.cfg.checkpoint_every;
    trainer.run(|t, m| {
        writeln!(metrics, "{}", m.csv_row())?;
        metrics.flush()?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| format!("{v:.3}"));
        println!(
            "update {:>4} step {:>8} reward {:>9} laps {:>6} iters {:.2} approx {:.3} {:.0} steps/s",
            m.update,
            m.step,
            fmt(m.mean_reward),
            fmt(m.lap_rate),
            m.mean_solver_iters,
            m.approx_grad_frac,
            m.steps_per_sec
        );
        if every > 0 && m.update % every as u64 == 0 {
            t.checkpoint().save(&dir.join(format!("checkpoint_{:06}.json", m.update)))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&dir.join("checkpoint.json"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
