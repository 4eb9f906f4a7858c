//! Batched execution with a counted dispatch contract.
//!
//! A *dispatch* is one parallel-for submission to the executor's worker pool.
//! In [`DispatchMode::Fused`] every stage of an iteration is one dispatch over
//! the whole batch (line-search candidates included), so an iteration costs
//! three dispatches regardless of the horizon. [`DispatchMode::Naive`] issues
//! one dispatch per timestep and sub-operation, batching only across
//! instances, which is what a per-op tensor implementation does. Both modes
//! run the same kernels in the same per-instance order and therefore return
//! bit-identical results.

use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::dynamics::DynModel;
use crate::gradlayer::{BackwardSeed, GradInstance, GradOutput, GradPhase};
use crate::ilqr::{
    Candidate, IlqrInstance, SolveResult, SolveSettings, BACKWARD_OPS, FORWARD_OPS,
};
use crate::qcost::StageCostParams;
use crate::{scenario, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DispatchMode {
    Fused,
    Naive,
}

impl DispatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DispatchMode::Fused => "fused",
            DispatchMode::Naive => "naive",
        }
    }
}

impl std::str::FromStr for DispatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(DispatchMode::Fused),
            "naive" => Ok(DispatchMode::Naive),
            other => Err(Error::Config(format!("unknown dispatch mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for DispatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchStats {
    /// Dispatches of the initial rollout (1 fused, `T` naive).
    pub rollout_dispatches: usize,
    /// Dispatches per executed batch iteration; `0` if none ran.
    pub dispatches_per_iteration: usize,
    pub total_dispatches: usize,
    /// Batch iterations executed (until every instance stopped).
    pub iterations: usize,
    pub wall_time_forward: Duration,
    pub wall_time_backward: Duration,
}

/// `B` instances sharing the model, horizon and bounds.
#[derive(Debug, Clone)]
pub struct BatchProblem<T> {
    pub model: DynModel<T>,
    pub x_init: Vec<Vec<T>>,
    pub params: Vec<StageCostParams<T>>,
    pub u_warm: Vec<Vec<T>>,
    pub settings: SolveSettings<T>,
}

impl<T: Real> BatchProblem<T> {
    pub fn len(&self) -> usize {
        self.x_init.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_init.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_init.is_empty() {
            return Err(Error::Config("batch must contain at least one instance".into()));
        }
        Error::check_len("batch params", self.len(), self.params.len())?;
        Error::check_len("batch warm starts", self.len(), self.u_warm.len())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchSolution<T> {
    /// Per-instance outcome; a failed instance does not affect its siblings.
    pub results: Vec<Result<SolveResult<T>>>,
    pub stats: DispatchStats,
}

pub struct BatchExecutor {
    pool: ThreadPool,
    workers: usize,
}

impl std::fmt::Debug for BatchExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchExecutor")
            .field("workers", &self.workers)
            .finish()
    }
}

impl BatchExecutor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self { pool, workers })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// One dispatch: a parallel-for over `items` on the pool.
    fn dispatch<I, F>(&self, count: &mut usize, items: &mut [I], f: F)
    where
        I: Send,
        F: Fn(&mut I) + Sync + Send,
    {
        *count += 1;
        self.pool.install(|| items.par_iter_mut().for_each(f));
    }

    pub fn solve_batch<T: Real>(
        &self,
        prob: &BatchProblem<T>,
        mode: DispatchMode,
    ) -> Result<BatchSolution<T>> {
        prob.validate()?;
        let start = Instant::now();
        let mut insts = Vec::with_capacity(prob.len());
        for b in 0..prob.len() {
            insts.push(IlqrInstance::new(
                &prob.model,
                &prob.x_init[b],
                &prob.params[b],
                &prob.u_warm[b],
                &prob.settings,
            )?);
        }
        let mut cands: Vec<Vec<Candidate<T>>> = insts.iter().map(|i| i.make_candidates()).collect();
        let horizon = prob.settings.horizon;
        let mut count = 0;

        match mode {
            DispatchMode::Fused => self.dispatch(&mut count, &mut insts, |i| i.run_rollout()),
            DispatchMode::Naive => {
                for t in 0..horizon {
                    self.dispatch(&mut count, &mut insts, |i| i.rollout_op(t));
                }
                insts.iter_mut().for_each(|i| i.finish_rollout());
            }
        }
        insts.iter_mut().for_each(|i| i.finish_without_iterations());
        let rollout_dispatches = count;

        let mut iterations = 0;
        while insts.iter().any(|i| i.is_active()) {
            iterations += 1;
            match mode {
                DispatchMode::Fused => {
                    self.dispatch(&mut count, &mut insts, |i| i.run_linearize());
                    self.dispatch(&mut count, &mut insts, |i| i.run_backward());
                    let mut jobs = candidate_jobs(&insts, &mut cands);
                    self.dispatch(&mut count, &mut jobs, |(i, c)| i.run_candidate(c));
                }
                DispatchMode::Naive => {
                    for t in 0..horizon {
                        self.dispatch(&mut count, &mut insts, |i| i.linearize_op(t));
                    }
                    for t in (0..horizon).rev() {
                        for op in BACKWARD_OPS {
                            self.dispatch(&mut count, &mut insts, |i| i.backward_op(t, op));
                        }
                    }
                    let mut jobs = candidate_jobs(&insts, &mut cands);
                    if horizon == 0 {
                        self.dispatch(&mut count, &mut jobs, |(i, c)| i.run_candidate(c));
                    }
                    for t in 0..horizon {
                        for op in FORWARD_OPS {
                            self.dispatch(&mut count, &mut jobs, |(i, c)| i.candidate_op(c, t, op));
                        }
                    }
                }
            }
            for (inst, cs) in insts.iter_mut().zip(cands.iter_mut()) {
                inst.finish_iteration(cs);
            }
        }

        let stats = DispatchStats {
            rollout_dispatches,
            dispatches_per_iteration: if iterations > 0 {
                (count - rollout_dispatches) / iterations
            } else {
                0
            },
            total_dispatches: count,
            iterations,
            wall_time_forward: start.elapsed(),
            wall_time_backward: Duration::ZERO,
        };
        let results = insts.into_iter().map(|i| i.into_result()).collect();
        Ok(BatchSolution { results, stats })
    }

    /// Implicit gradients for every instance of a prior solve, linearizing
    /// along each solution inside the dispatch. Fused mode is one dispatch;
    /// naive mode dispatches per timestep and sub-operation.
    pub fn backward_batch<T: Real>(
        &self,
        model: &DynModel<T>,
        results: &[SolveResult<T>],
        params: &[StageCostParams<T>],
        seeds: &[BackwardSeed<T>],
        mode: DispatchMode,
    ) -> Result<(Vec<Result<GradOutput<T>>>, DispatchStats)> {
        Error::check_len("backward params", results.len(), params.len())?;
        Error::check_len("backward seeds", results.len(), seeds.len())?;
        let start = Instant::now();
        let mut insts = Vec::with_capacity(results.len());
        for b in 0..results.len() {
            insts.push(GradInstance::new(model, &results[b], &params[b], &seeds[b])?);
        }
        let horizon = results.first().map_or(0, |r| r.traj.horizon());
        if let Some(b) = results.iter().position(|r| r.traj.horizon() != horizon) {
            return Err(Error::dim("batch horizon", horizon, results[b].traj.horizon()));
        }
        let mut count = 0;
        match mode {
            DispatchMode::Fused => self.dispatch(&mut count, &mut insts, |g| {
                g.run_linearize();
                g.run_solve();
            }),
            DispatchMode::Naive => {
                for t in 0..horizon {
                    self.dispatch(&mut count, &mut insts, |g| g.op(t, GradPhase::Linearize));
                }
                if horizon == 0 {
                    self.dispatch(&mut count, &mut insts, |g| g.run_solve());
                }
                for t in (0..horizon).rev() {
                    for op in BACKWARD_OPS {
                        self.dispatch(&mut count, &mut insts, |g| g.op(t, GradPhase::Backward(op)));
                    }
                }
                for t in 0..horizon {
                    self.dispatch(&mut count, &mut insts, |g| g.op(t, GradPhase::Forward));
                }
            }
        }
        let stats = DispatchStats {
            rollout_dispatches: 0,
            dispatches_per_iteration: count,
            total_dispatches: count,
            iterations: 1,
            wall_time_forward: Duration::ZERO,
            wall_time_backward: start.elapsed(),
        };
        let out = insts.into_iter().map(|g| g.into_output()).collect();
        Ok((out, stats))
    }
}

fn candidate_jobs<'s, 'a, T: Real>(
    insts: &'s [IlqrInstance<'a, T>],
    cands: &'s mut [Vec<Candidate<T>>],
) -> Vec<(&'s IlqrInstance<'a, T>, &'s mut Candidate<T>)> {
    insts
        .iter()
        .zip(cands.iter_mut())
        .filter(|(i, _)| i.is_active())
        .flat_map(|(i, cs)| cs.iter_mut().map(move |c| (i, c)))
        .collect()
}

/// One row of the latency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRow {
    pub mode: DispatchMode,
    pub batch: usize,
    pub horizon: usize,
    pub max_iter: usize,
    pub forward_ms: f64,
    pub backward_ms: f64,
    /// Forward dispatches of one timed solve.
    pub dispatches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencySpec {
    pub batches: Vec<usize>,
    pub horizons: Vec<usize>,
    pub max_iter: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for LatencySpec {
    fn default() -> Self {
        Self {
            batches: vec![1, 256],
            horizons: vec![2, 10, 50],
            max_iter: 10,
            reps: 10,
            warmup: 1,
            seed: 0,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median forward and backward wall time of hover-regulation batches for
/// both modes over the `batches × horizons` grid.
pub fn latency_probe<T: Real>(exec: &BatchExecutor, spec: &LatencySpec) -> Result<Vec<LatencyRow>> {
    if spec.reps == 0 {
        return Err(Error::Config("reps must be >= 1".into()));
    }
    let mut rows = Vec::new();
    for &b in &spec.batches {
        for &h in &spec.horizons {
            let prob = scenario::hover_batch::<T>(b, h, spec.max_iter, spec.seed)?;
            let target = scenario::hover_target::<T>(&prob.model);
            for mode in [DispatchMode::Fused, DispatchMode::Naive] {
                let mut fwd = Vec::with_capacity(spec.reps);
                let mut bwd = Vec::with_capacity(spec.reps);
                let mut dispatches = 0;
                for rep in 0..spec.warmup + spec.reps {
                    let sol = exec.solve_batch(&prob, mode)?;
                    let results: Vec<SolveResult<T>> = sol.results.into_iter().collect::<Result<_>>()?;
                    let seeds: Vec<_> = results
                        .iter()
                        .map(|r| BackwardSeed::first_control_error(r, &target))
                        .collect();
                    let (_, bstats) = exec.backward_batch(&prob.model, &results, &prob.params, &seeds, mode)?;
                    if rep >= spec.warmup {
                        fwd.push(sol.stats.wall_time_forward.as_secs_f64() * 1e3);
                        bwd.push(bstats.wall_time_backward.as_secs_f64() * 1e3);
                        dispatches = sol.stats.total_dispatches;
                    }
                }
                rows.push(LatencyRow {
                    mode,
                    batch: b,
                    horizon: h,
                    max_iter: spec.max_iter,
                    forward_ms: median(&mut fwd),
                    backward_ms: median(&mut bwd),
                    dispatches,
                });
            }
        }
    }
    Ok(rows)
}

pub const LATENCY_CSV_HEADER: &str = "mode,B,T,K,forward_ms,backward_ms,dispatches";

pub fn write_latency_csv<W: Write>(rows: &[LatencyRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{LATENCY_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{}",
            r.mode, r.batch, r.horizon, r.max_iter, r.forward_ms, r.backward_ms, r.dispatches
        )?;
    }
    Ok(())
}

