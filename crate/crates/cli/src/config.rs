//! Run configuration: one TOML file plus `--section.key value` overrides.

use std::path::{Path, PathBuf};

use fusedmpc::{DispatchMode, DynModel, QuadrotorParams, SolveSettings};
use fusedmpc_rl::{RaceConfig, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PlanarQuadrotor,
    DoubleIntegrator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// s
    pub dt: f64,
    pub mass: f64,
    pub arm_length: f64,
    pub inertia: f64,
    pub gravity: f64,
    /// Spatial dimension of the double integrator.
    pub dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = QuadrotorParams::<f64>::default();
        Self {
            kind: ModelKind::PlanarQuadrotor,
            dt: fusedmpc::scenario::HOVER_DT,
            mass: p.mass,
            arm_length: p.arm_length,
            inertia: p.inertia,
            gravity: p.gravity,
            dim: 2,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> CliResult<DynModel<f64>> {
        Ok(match self.kind {
            ModelKind::PlanarQuadrotor => DynModel::planar_quadrotor(
                QuadrotorParams {
                    mass: self.mass,
                    arm_length: self.arm_length,
                    inertia: self.inertia,
                    gravity: self.gravity,
                },
                self.dt,
            )?,
            ModelKind::DoubleIntegrator => DynModel::double_integrator(self.dim, self.dt)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Fused,
    Naive,
}

impl From<ModeArg> for DispatchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fused => DispatchMode::Fused,
            ModeArg::Naive => DispatchMode::Naive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "K")]
    pub max_iter: usize,
    pub mode: ModeArg,
    /// Defaults to `[0, m g]` per rotor for the quadrotor, unbounded otherwise.
    pub u_min: Option<Vec<f64>>,
    pub u_max: Option<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub conv_tol: f64,
    pub reg_init: f64,
    pub reg_max: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            max_iter: 10,
            mode: ModeArg::Fused,
            u_min: None,
            u_max: None,
            alphas: fusedmpc::ilqr::DEFAULT_ALPHAS.to_vec(),
            conv_tol: 1e-6,
            reg_init: 1e-6,
            reg_max: 1e-2,
        }
    }
}

impl SolverConfig {
    pub fn settings(&self, model: &DynModel<f64>) -> CliResult<SolveSettings<f64>> {
        if self.horizon == 0 {
            return Err(CliError::Config("solver.T must be >= 1".into()));
        }
        let (lo, hi) = match (&self.u_min, &self.u_max) {
            (Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
            (None, None) => match model.hover_thrust() {
                Some(_) => fusedmpc::scenario::thrust_bounds(model)?,
                None => (vec![f64::NEG_INFINITY; model.n_u()], vec![f64::INFINITY; model.n_u()]),
            },
            _ => return Err(CliError::Config("solver.u_min and solver.u_max must be given together".into())),
        };
        let mut s = SolveSettings::new(self.horizon, self.max_iter, lo, hi)?;
        s.alphas = self.alphas.clone();
        s.conv_tol = self.conv_tol;
        s.reg_init = self.reg_init;
        s.reg_max = self.reg_max;
        s.validate()?;
        if s.n_u() != model.n_u() {
            return Err(CliError::Config(format!(
                "solver bounds have {} entries, the model has {} controls",
                s.n_u(),
                model.n_u()
            )));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    /// Built-in problem used when `problem` is unset.
    pub scenario: String,
    /// Instances of the built-in scenario.
    pub batch: usize,
    /// TOML file with `[[instance]]` tables (`x_init`, `diag`, `lin`, optional `u_warm`).
    pub problem: Option<PathBuf>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            scenario: "hover".into(),
            batch: 1,
            problem: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(rename = "B")]
    pub batches: Vec<usize>,
    #[serde(rename = "T")]
    pub horizons: Vec<usize>,
    #[serde(rename = "K")]
    pub max_iter: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let s = fusedmpc::batchexec::LatencySpec::default();
        Self {
            batches: s.batches,
            horizons: s.horizons,
            max_iter: s.max_iter,
            reps: s.reps,
            warmup: s.warmup,
        }
    }
}

/// `(T, K)` cells for `ac_mpc` training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "T")]
    pub horizons: Vec<usize>,
    #[serde(rename = "K")]
    pub iterations: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizons: vec![2],
            iterations: vec![5],
        }
    }
}

impl GridConfig {
    pub fn cells(&self) -> Vec<(usize, usize)> {
        self.horizons
            .iter()
            .flat_map(|&t| self.iterations.iter().map(move |&k| (t, k)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoints: Vec<PathBuf>,
    pub episodes: usize,
    pub trajectories: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            episodes: 10,
            trajectories: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    /// Track file; the bundled track when unset.
    pub track: Option<PathBuf>,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub solve: SolveConfig,
    pub bench: BenchConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub race: RaceConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            out: PathBuf::from("out"),
            track: None,
            model: ModelConfig::default(),
            solver: SolverConfig::default(),
            solve: SolveConfig::default(),
            bench: BenchConfig::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            race: RaceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or defaults), applies dotted overrides and validates
    /// section keys.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            set_path(&mut table, k, parse_value(v))?;
        }
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let msg = e.inner().to_string();
            let msg = msg.lines().next().unwrap_or_default().to_string();
            if path == "." {
                CliError::Config(format!("config: {msg}"))
            } else {
                CliError::Config(format!("config key `{path}`: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.workers == 0 {
            return Err(CliError::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, horizon: usize, max_iter: usize) -> TrainConfig {
        let mut t = self.train.clone();
        t.workers = self.workers;
        t.mpc.horizon = horizon;
        t.mpc.max_iter = max_iter;
        t
    }

    /// The effective configuration restricted to the sections `command` reads.
    pub fn echo(&self, command: &str) -> CliResult<String> {
        let full = toml::Value::try_from(self).map_err(|e| CliError::Runtime(format!("config echo: {e}")))?;
        let mut table = full.as_table().cloned().unwrap_or_default();
        let keep: &[&str] = match command {
            "solve" => &["model", "solver", "solve"],
            "bench" => &["bench"],
            "train" if self.train.mode == TrainMode::AcMlp => &["train", "race"],
            "train" => &["train", "grid", "race"],
            "eval" => &["eval", "race"],
            _ => &[],
        };
        let sections = ["model", "solver", "solve", "bench", "train", "grid", "race", "eval"];
        table.retain(|k, _| !sections.contains(&k) || keep.contains(&k));
        toml::to_string(&table).map_err(|e| CliError::Runtime(format!("config echo: {e}")))
    }

    pub fn write_echo(&self, command: &str, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.echo(command)?)?;
        Ok(())
    }
}

/// Splits `--section.key value` / `--section.key=value` pairs out of `args`.
pub fn split_overrides(args: Vec<String>) -> CliResult<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Config(format!("override --{k} needs a value")))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values_are_typed() {
        assert_eq!(parse_value("5"), toml::Value::Integer(5));
        assert_eq!(parse_value("naive"), toml::Value::String("naive".into()));
        assert_eq!(parse_value("\"a b\""), toml::Value::String("a b".into()));
        assert!(parse_value("[2, 5]").is_array());
    }

    #[test]
    fn dotted_flags_are_split_out() {
        let args = ["fusedmpc", "solve", "--solver.T", "5", "--seed", "3", "--grid.K=1"]
            .map(String::from)
            .to_vec();
        let (rest, ov) = split_overrides(args).unwrap();
        assert_eq!(rest, ["fusedmpc", "solve", "--seed", "3"]);
        assert_eq!(ov, [("solver.T".into(), "5".into()), ("grid.K".into(), "1".into())]);
    }

    #[test]
    fn defaults_round_trip_through_the_echo() {
        let cfg = RunConfig::default();
        for cmd in ["solve", "bench", "train", "eval"] {
            let text = cfg.echo(cmd).unwrap();
            let back: RunConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg, "{cmd}");
        }
    }
}
