use std::io::Write;
use std::path::Path;

use fusedmpc::scenario::{hover_cost, hover_target, HOVER_PERTURBATION};
use fusedmpc::{BatchExecutor, BatchProblem, DynModel, SolveResult, StageCostParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    instance: Vec<InstanceSpec>,
}

/// One problem instance; give either `diag` (per-stage diagonals) or the
/// full row-major `hess`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceSpec {
    x_init: Vec<f64>,
    diag: Option<Vec<f64>>,
    hess: Option<Vec<f64>>,
    lin: Vec<f64>,
    u_warm: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct InstanceSummary {
    index: usize,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    first_control: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost_history: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha_history: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct StatsSummary {
    mode: String,
    workers: usize,
    rollout_dispatches: usize,
    dispatches_per_iteration: usize,
    total_dispatches: usize,
    batch_iterations: usize,
    forward_ms: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    instance: Vec<InstanceSummary>,
    stats: StatsSummary,
}

fn hover_problem(cfg: &RunConfig, model: DynModel<f64>) -> CliResult<BatchProblem<f64>> {
    if cfg.solve.scenario != "hover" {
        return Err(CliError::Config(format!(
            "unknown scenario `{}` (available: hover)",
            cfg.solve.scenario
        )));
    }
    if model.hover_thrust().is_none() {
        return Err(CliError::Config("the hover scenario needs model.kind = \"planar_quadrotor\"".into()));
    }
    if cfg.solve.batch == 0 {
        return Err(CliError::Config("solve.batch must be >= 1".into()));
    }
    let settings = cfg.solver.settings(&model)?;
    let params = hover_cost(&model, settings.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x_init = (0..cfg.solve.batch)
        .map(|_| HOVER_PERTURBATION.iter().map(|&s| rng.random_range(-s..=s)).collect())
        .collect();
    let warm = hover_target(&model).repeat(settings.horizon);
    Ok(BatchProblem {
        x_init,
        params: vec![params; cfg.solve.batch],
        u_warm: vec![warm; cfg.solve.batch],
        settings,
        model,
    })
}

fn file_problem(cfg: &RunConfig, model: DynModel<f64>, path: &Path) -> CliResult<BatchProblem<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read problem {}: {e}", path.display())))?;
    let file: ProblemFile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if file.instance.is_empty() {
        return Err(CliError::Config(format!("{}: no [[instance]] tables", path.display())));
    }
    let settings = cfg.solver.settings(&model)?;
    let (n_x, n_u) = (model.n_x(), model.n_u());
    let mut prob = BatchProblem {
        model,
        x_init: Vec::new(),
        params: Vec::new(),
        u_warm: Vec::new(),
        settings,
    };
    for (i, inst) in file.instance.into_iter().enumerate() {
        let params = match (inst.diag, inst.hess) {
            (Some(d), None) => StageCostParams::diagonal(n_x, n_u, &d, &inst.lin)?,
            (None, Some(h)) => StageCostParams::new(n_x, n_u, h, inst.lin)?,
            _ => {
                return Err(CliError::Config(format!(
                    "instance {i}: give exactly one of `diag` and `hess`"
                )))
            }
        };
        if params.horizon() != prob.settings.horizon {
            return Err(CliError::Config(format!(
                "instance {i}: cost covers {} stages, solver.T is {}",
                params.horizon(),
                prob.settings.horizon
            )));
        }
        let warm = inst.u_warm.unwrap_or_else(|| {
            let hover = hover_target(&prob.model);
            if hover.is_empty() {
                vec![0.0; prob.settings.horizon * n_u]
            } else {
                hover.repeat(prob.settings.horizon)
            }
        });
        prob.x_init.push(inst.x_init);
        prob.params.push(params);
        prob.u_warm.push(warm);
    }
    Ok(prob)
}

fn write_trajectories(path: &Path, results: &[fusedmpc::Result<SolveResult<f64>>], n_x: usize, n_u: usize) -> CliResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec!["instance".to_string(), "t".to_string()];
    header.extend((0..n_x).map(|i| format!("x{i}")));
    header.extend((0..n_u).map(|i| format!("u{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (b, r) in results.iter().enumerate() {
        let Ok(r) = r else { continue };
        let horizon = r.traj.horizon();
        for t in 0..=horizon {
            let mut row = vec![b.to_string(), t.to_string()];
            row.extend(r.traj.state(t).iter().map(|v| v.to_string()));
            if t < horizon {
                row.extend(r.traj.control(t).iter().map(|v| v.to_string()));
            } else {
                row.extend(std::iter::repeat_n(String::new(), n_u));
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let model = cfg.model.build()?;
    let prob = match &cfg.solve.problem {
        Some(p) => file_problem(cfg, model, p)?,
        None => hover_problem(cfg, model)?,
    };
    prob.validate()?;
    for (i, x) in prob.x_init.iter().enumerate() {
        if x.len() != prob.model.n_x() {
            return Err(CliError::Config(format!(
                "instance {i}: x_init has {} entries, the model has {} states",
                x.len(),
                prob.model.n_x()
            )));
        }
    }
    cfg.write_echo("solve", &cfg.out)?;

    let exec = BatchExecutor::new(cfg.workers)?;
    let mode = cfg.solver.mode.into();
    let sol = exec.solve_batch(&prob, mode)?;
    write_trajectories(&cfg.out.join("trajectory.csv"), &sol.results, prob.model.n_x(), prob.model.n_u())?;

    let instance: Vec<InstanceSummary> = sol
        .results
        .iter()
        .enumerate()
        .map(|(index, r)| match r {
            Ok(r) => InstanceSummary {
                index,
                status: "ok",
                error: None,
                converged: Some(r.converged),
                iterations: Some(r.iterations),
                cost: Some(r.cost),
                first_control: Some(r.first_control().to_vec()),
                cost_history: Some(r.cost_history.clone()),
                alpha_history: Some(r.alpha_history.clone()),
            },
            Err(e) => InstanceSummary {
                index,
                status: "failed",
                error: Some(e.to_string()),
                converged: None,
                iterations: None,
                cost: None,
                first_control: None,
                cost_history: None,
                alpha_history: None,
            },
        })
        .collect();
    let failed = instance.iter().filter(|s| s.status == "failed").count();
    let converged = instance.iter().filter(|s| s.converged == Some(true)).count();
    let summary = Summary {
        instance,
        stats: StatsSummary {
            mode: mode.to_string(),
            workers: cfg.workers,
            rollout_dispatches: sol.stats.rollout_dispatches,
            dispatches_per_iteration: sol.stats.dispatches_per_iteration,
            total_dispatches: sol.stats.total_dispatches,
            batch_iterations: sol.stats.iterations,
            forward_ms: sol.stats.wall_time_forward.as_secs_f64() * 1e3,
        },
    };
    let text = toml::to_string(&summary).map_err(|e| CliError::Runtime(format!("summary: {e}")))?;
    std::fs::write(cfg.out.join("summary.toml"), text)?;

    let n = prob.len();
    println!(
        "solved {n} instance(s) in {mode} mode: {converged} converged, {failed} failed, {} dispatches, {:.3} ms",
        sol.stats.total_dispatches,
        sol.stats.wall_time_forward.as_secs_f64() * 1e3
    );
    println!("wrote {}", cfg.out.display());
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {n} instance(s) failed; see summary.toml")));
    }
    Ok(())
}
