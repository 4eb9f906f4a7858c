use std::io::Write;
use std::path::{Path, PathBuf};

use fusedmpc_rl::checkpoint::Checkpoint;
use fusedmpc_rl::raceenv::write_trajectory_csv;
use fusedmpc_rl::trainer::{mpc_layer, run_episode, TrainConfig};
use fusedmpc_rl::{RaceEnv, TrainMode};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::train::load_track;

pub const LAPTIME_CSV_HEADER: &str = "policy,mode,T,K,episodes,completed,completion_rate,median_lap_s,best_lap_s";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub mode: TrainMode,
    pub mpc: Option<(usize, usize)>,
    pub episodes: usize,
    pub lap_times: Vec<f64>,
}

impl EvalRow {
    pub fn completion_rate(&self) -> f64 {
        self.lap_times.len() as f64 / self.episodes.max(1) as f64
    }

    pub fn median(&self) -> Option<f64> {
        let mut v = self.lap_times.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        match n {
            0 => None,
            _ if n % 2 == 1 => Some(v[n / 2]),
            _ => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.lap_times.iter().copied().min_by(f64::total_cmp)
    }

    fn cells(&self) -> [String; 9] {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| format!("{v:.2}"));
        let (t, k) = self
            .mpc
            .map_or(("-".to_string(), "-".to_string()), |(t, k)| (t.to_string(), k.to_string()));
        [
            self.label.clone(),
            self.mode.as_str().to_string(),
            t,
            k,
            self.episodes.to_string(),
            self.lap_times.len().to_string(),
            format!("{:.2}", self.completion_rate()),
            opt(self.median()),
            opt(self.best()),
        ]
    }
}

fn label_for(path: &Path, taken: &[String]) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("policy");
    let base = if stem == "checkpoint" {
        path.parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or(stem)
            .to_string()
    } else {
        stem.to_string()
    };
    let mut label = base.clone();
    let mut i = 2;
    while taken.contains(&label) {
        label = format!("{base}_{i}");
        i += 1;
    }
    label
}

/// Runs `episodes` deterministic episodes for one checkpoint.
pub fn evaluate(cfg: &RunConfig, path: &Path, label: &str, traj_dir: Option<&Path>) -> CliResult<EvalRow> {
    let ckpt = Checkpoint::load(path)?;
    let policy = ckpt.to_policy::<f32>()?;
    let env = RaceEnv::<f32>::new(load_track(cfg)?, cfg.race.clone())?;
    if policy.obs_dim() != env.obs_dim() {
        return Err(CliError::Config(format!(
            "{}: policy expects {} observations, the environment produces {}",
            path.display(),
            policy.obs_dim(),
            env.obs_dim()
        )));
    }
    let layer = match (ckpt.mode, &ckpt.mpc) {
        (TrainMode::AcMpc, Some(m)) => {
            let mut tc = TrainConfig {
                workers: cfg.workers,
                ..TrainConfig::default()
            };
            tc.mpc = m.clone();
            Some(mpc_layer(&tc, &env)?)
        }
        (TrainMode::AcMpc, None) => {
            return Err(CliError::Config(format!("{}: ac_mpc checkpoint without solver settings", path.display())))
        }
        (TrainMode::AcMlp, _) => None,
    };
    if let Some(dir) = traj_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut lap_times = Vec::new();
    for e in 0..cfg.eval.episodes {
        let rep = run_episode(&policy, &env, layer.as_ref(), cfg.seed.wrapping_add(e as u64))?;
        if let Some(t) = rep.lap_time {
            lap_times.push(t);
        }
        if let Some(dir) = traj_dir {
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("episode_{e:03}.csv")))?);
            write_trajectory_csv(&rep.trajectory, &mut w)?;
            w.flush()?;
        }
    }
    Ok(EvalRow {
        label: label.to_string(),
        mode: ckpt.mode,
        mpc: ckpt.mpc.as_ref().map(|m| (m.horizon, m.max_iter)),
        episodes: cfg.eval.episodes,
        lap_times,
    })
}

pub fn format_table(rows: &[EvalRow]) -> String {
    let header = LAPTIME_CSV_HEADER.split(',').map(String::from).collect::<Vec<_>>();
    let body: Vec<[String; 9]> = rows.iter().map(EvalRow::cells).collect();
    let widths: Vec<usize> = (0..9)
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(&header);
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    if cfg.eval.checkpoints.is_empty() {
        return Err(CliError::Config("no checkpoint given (use --checkpoint PATH)".into()));
    }
    if cfg.eval.episodes == 0 {
        return Err(CliError::Config("eval.episodes must be >= 1".into()));
    }
    cfg.write_echo("eval", &cfg.out)?;
    let mut rows: Vec<EvalRow> = Vec::new();
    for path in &cfg.eval.checkpoints {
        let taken: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
        let label = label_for(path, &taken);
        let traj: Option<PathBuf> = cfg.eval.trajectories.then(|| cfg.out.join(&label));
        rows.push(evaluate(cfg, path, &label, traj.as_deref())?);
    }
    let mut csv = String::from(LAPTIME_CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.cells().join(","));
        csv.push('\n');
    }
    std::fs::write(cfg.out.join("laptimes.csv"), csv)?;
    print!("{}", format_table(&rows));
    Ok(())
}
