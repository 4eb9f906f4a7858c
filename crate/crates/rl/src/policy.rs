//! Actor and critic networks.
//!
//! The MPC actor maps an observation to diagonal stage costs `(diag C_t, c_t)`
//! for every step of the horizon through a sigmoid head, solves the MPC
//! problem, and samples the executed control from a Gaussian centered on the
//! first MPC control. The direct actor (AC-MLP baseline) outputs the Gaussian
//! mean itself. Both share a state-independent learned `log σ`.

use fusedmpc::{
    BackwardSeed, BatchExecutor, BatchProblem, DispatchMode, DynModel, GradOutput, SolveResult, SolveSettings,
    StageCostParams, EPS_REG,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::mlp::{Mlp, Tape};
use crate::scalar::Scalar;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Sigmoid outputs mapped affinely into per-parameter cost bounds.
    CostSigmoid,
    /// Plain linear output.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub head: HeadKind,
}

impl MlpSpec {
    pub fn actor() -> Self {
        Self {
            hidden: vec![512, 512],
            head: HeadKind::CostSigmoid,
        }
    }

    pub fn critic() -> Self {
        Self {
            hidden: vec![512, 512],
            head: HeadKind::Linear,
        }
    }

    pub fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(input);
        s.extend(&self.hidden);
        s.push(output);
        s
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Per-parameter bounds for the cost head. The head output for stage `t` is
/// laid out as `[diag(C_t); c_t]`, each of length `n_x + n_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostHeadScaling<T> {
    n_x: usize,
    n_u: usize,
    horizon: usize,
    lo: Vec<T>,
    hi: Vec<T>,
}

impl<T: Scalar> CostHeadScaling<T> {
    /// Same `[lo, hi]` for every diagonal entry and every linear entry.
    pub fn uniform(n_x: usize, n_u: usize, horizon: usize, diag: [f64; 2], lin: [f64; 2]) -> Result<Self> {
        let nz = n_x + n_u;
        let mut lo = Vec::with_capacity(horizon * 2 * nz);
        let mut hi = Vec::with_capacity(horizon * 2 * nz);
        for _ in 0..horizon {
            lo.extend(std::iter::repeat_n(T::lit(diag[0]), nz));
            hi.extend(std::iter::repeat_n(T::lit(diag[1]), nz));
            lo.extend(std::iter::repeat_n(T::lit(lin[0]), nz));
            hi.extend(std::iter::repeat_n(T::lit(lin[1]), nz));
        }
        Self::from_bounds(n_x, n_u, horizon, lo, hi)
    }

    pub fn from_bounds(n_x: usize, n_u: usize, horizon: usize, lo: Vec<T>, hi: Vec<T>) -> Result<Self> {
        let s = Self {
            n_x,
            n_u,
            horizon,
            lo,
            hi,
        };
        s.validate()?;
        Ok(s)
    }

    /// Overrides the bounds of the control entries at every stage.
    pub fn set_control_bounds(&mut self, diag: [f64; 2], lin: [f64; 2]) -> Result<()> {
        let nz = self.n_x + self.n_u;
        for t in 0..self.horizon {
            for i in self.n_x..nz {
                let d = t * 2 * nz + i;
                self.lo[d] = T::lit(diag[0]);
                self.hi[d] = T::lit(diag[1]);
                self.lo[d + nz] = T::lit(lin[0]);
                self.hi[d + nz] = T::lit(lin[1]);
            }
        }
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        let nz = self.n_x + self.n_u;
        Error::check_len("cost head lower bounds", self.dim(), self.lo.len())?;
        Error::check_len("cost head upper bounds", self.dim(), self.hi.len())?;
        for (k, (&l, &h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::Config(format!("cost head bound {k}: [{l}, {h}]")));
            }
            if k % (2 * nz) < nz && l < T::lit(EPS_REG) {
                return Err(Error::Config(format!(
                    "cost head diagonal bound {k} is {l}, below {EPS_REG:e}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.horizon * 2 * (self.n_x + self.n_u)
    }

    pub fn lo(&self) -> &[T] {
        &self.lo
    }

    pub fn hi(&self) -> &[T] {
        &self.hi
    }

    /// Maps raw head outputs to cost parameters; also returns the sigmoid
    /// values needed by [`CostHeadScaling::chain`].
    pub fn map(&self, raw: &[T]) -> Result<(StageCostParams<T>, Vec<T>)> {
        Error::check_len("cost head output", self.dim(), raw.len())?;
        let nz = self.n_x + self.n_u;
        let sig: Vec<T> = raw.iter().map(|&v| sigmoid(v)).collect();
        let mut diag = Vec::with_capacity(self.horizon * nz);
        let mut lin = Vec::with_capacity(self.horizon * nz);
        for (k, &s) in sig.iter().enumerate() {
            let v = self.lo[k] + (self.hi[k] - self.lo[k]) * s;
            if k % (2 * nz) < nz {
                diag.push(v);
            } else {
                lin.push(v);
            }
        }
        let params = StageCostParams::diagonal(self.n_x, self.n_u, &diag, &lin)?;
        Ok((params, sig))
    }

    /// `∂L/∂raw` from the cost-parameter gradients of one instance.
    pub fn chain(&self, sig: &[T], grad: &GradOutput<T>, out: &mut [T]) {
        let nz = self.n_x + self.n_u;
        for t in 0..self.horizon {
            let dh = grad.d_hess(t);
            let dg = grad.d_grad(t);
            for i in 0..nz {
                for (k, d) in [(t * 2 * nz + i, dh[i * nz + i]), (t * 2 * nz + nz + i, dg[i])] {
                    let s = sig[k];
                    out[k] = d * (self.hi[k] - self.lo[k]) * s * (T::one() - s);
                }
            }
        }
    }
}

/// MPC solver handle used by the actor: model, settings and a worker pool.
pub struct MpcLayer<T> {
    pub model: DynModel<T>,
    pub settings: SolveSettings<T>,
    exec: BatchExecutor,
}

impl<T: Scalar> MpcLayer<T> {
    pub fn new(model: DynModel<T>, settings: SolveSettings<T>, workers: usize) -> Result<Self> {
        settings.validate()?;
        Error::check_len("solver bounds", model.n_u(), settings.n_u())?;
        Ok(Self {
            model,
            settings,
            exec: BatchExecutor::new(workers)?,
        })
    }

    pub fn horizon(&self) -> usize {
        self.settings.horizon
    }

    /// Cold-start control sequence: hover thrust for the quadrotor, else the
    /// midpoint of the bounds.
    pub fn default_warm(&self) -> Vec<T> {
        let u: Vec<T> = match self.model.hover_thrust() {
            Some(h) => (0..self.model.n_u()).map(|i| self.settings.clamp(i, h)).collect(),
            None => self
                .settings
                .u_min
                .iter()
                .zip(&self.settings.u_max)
                .map(|(&l, &h)| {
                    if l.is_finite() && h.is_finite() {
                        (l + h) * T::lit(0.5)
                    } else {
                        T::zero()
                    }
                })
                .collect(),
        };
        u.iter().cycle().take(self.horizon() * u.len()).copied().collect()
    }

    pub fn solve(
        &self,
        x_init: Vec<Vec<T>>,
        params: Vec<StageCostParams<T>>,
        u_warm: Vec<Vec<T>>,
    ) -> Result<Vec<fusedmpc::Result<SolveResult<T>>>> {
        let prob = BatchProblem {
            model: self.model.clone(),
            x_init,
            params,
            u_warm,
            settings: self.settings.clone(),
        };
        Ok(self.exec.solve_batch(&prob, DispatchMode::Fused)?.results)
    }

    pub fn backward(
        &self,
        results: &[SolveResult<T>],
        params: &[StageCostParams<T>],
        seeds: &[BackwardSeed<T>],
    ) -> Result<Vec<fusedmpc::Result<GradOutput<T>>>> {
        Ok(self
            .exec
            .backward_batch(&self.model, results, params, seeds, DispatchMode::Fused)?
            .0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActorHead<T> {
    Cost(CostHeadScaling<T>),
    /// Mean control `center + half_range ⊙ output`.
    Direct { center: Vec<T>, half_range: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyAction<T> {
    /// Deterministic mean (the first MPC control for the MPC actor).
    pub u_mpc: Vec<T>,
    /// Executed control, clamped to the bounds.
    pub u_sampled: Vec<T>,
    /// Gaussian sample before clamping; `log_prob` is evaluated here.
    pub u_raw: Vec<T>,
    pub log_prob: T,
    pub sigma: Vec<T>,
    /// Full MPC control sequence (empty for the direct actor).
    pub u_plan: Vec<T>,
}

/// Actor means for a batch of observations plus what the backward pass needs.
pub struct MeanBatch<T> {
    pub rows: usize,
    /// `rows × n_u`; rows whose solve failed hold the clamped warm start.
    pub means: Vec<T>,
    pub failures: Vec<Option<fusedmpc::Error>>,
    pub solves: Vec<Option<SolveResult<T>>>,
    pub params: Vec<StageCostParams<T>>,
    sig: Vec<T>,
    tape: Tape<T>,
}

impl<T> MeanBatch<T> {
    pub fn mean(&self, row: usize) -> &[T] {
        let n_u = self.means.len() / self.rows.max(1);
        &self.means[row * n_u..(row + 1) * n_u]
    }

    pub fn solver_iterations(&self) -> impl Iterator<Item = usize> + '_ {
        self.solves.iter().flatten().map(|r| r.iterations)
    }

    /// The actor tape, for reuse by [`Policy::means_into`].
    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

/// MPC inputs for one batch of actor evaluations.
pub struct MpcInputs<'a, T> {
    pub layer: &'a MpcLayer<T>,
    pub x_init: &'a [Vec<T>],
    pub u_warm: &'a [Vec<T>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy<T> {
    pub actor: Mlp<T>,
    pub head: ActorHead<T>,
    pub log_std: Vec<T>,
    pub critic: Mlp<T>,
    pub u_min: Vec<T>,
    pub u_max: Vec<T>,
}

/// `Σ_i log N(a_i; μ_i, σ_i²)`.
pub fn gaussian_log_prob<T: Scalar>(a: &[T], mean: &[T], log_std: &[T]) -> T {
    let half = T::lit(0.5);
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &m), &ls)| {
            let z = (a - m) / ls.exp();
            -half * z * z - ls - half * T::lit(LN_2PI)
        })
        .sum()
}

pub fn gaussian_entropy<T: Scalar>(log_std: &[T]) -> T {
    let c = T::lit(0.5 + 0.5 * LN_2PI);
    log_std.iter().map(|&ls| c + ls).sum()
}

impl<T: Scalar> Policy<T> {
    /// Exploration std starts at `0.1 · (u_max − u_min)`.
    fn initial_log_std(u_min: &[T], u_max: &[T]) -> Result<Vec<T>> {
        u_min
            .iter()
            .zip(u_max)
            .map(|(&l, &h)| {
                let s = T::lit(0.1) * (h - l);
                if s.is_finite() && s > T::zero() {
                    Ok(s.ln())
                } else {
                    Err(Error::Config("control bounds must be finite with u_min < u_max".into()))
                }
            })
            .collect()
    }

    pub fn new_mpc(
        obs_dim: usize,
        actor: &MlpSpec,
        critic: &MlpSpec,
        scaling: CostHeadScaling<T>,
        u_min: Vec<T>,
        u_max: Vec<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Error::check_len("control bounds", scaling.n_u(), u_min.len())?;
        let log_std = Self::initial_log_std(&u_min, &u_max)?;
        Ok(Self {
            actor: Mlp::init(&actor.sizes(obs_dim, scaling.dim()), 0.01, rng)?,
            head: ActorHead::Cost(scaling),
            log_std,
            critic: Mlp::init(&critic.sizes(obs_dim, 1), 1.0, rng)?,
            u_min,
            u_max,
        })
    }

    pub fn new_direct(
        obs_dim: usize,
        actor: &MlpSpec,
        critic: &MlpSpec,
        center: Vec<T>,
        u_min: Vec<T>,
        u_max: Vec<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Error::check_len("control center", u_min.len(), center.len())?;
        let log_std = Self::initial_log_std(&u_min, &u_max)?;
        let half_range = u_min.iter().zip(&u_max).map(|(&l, &h)| (h - l) * T::lit(0.5)).collect();
        Ok(Self {
            actor: Mlp::init(&actor.sizes(obs_dim, u_min.len()), 0.01, rng)?,
            head: ActorHead::Direct { center, half_range },
            log_std,
            critic: Mlp::init(&critic.sizes(obs_dim, 1), 1.0, rng)?,
            u_min,
            u_max,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn n_u(&self) -> usize {
        self.u_min.len()
    }

    pub fn is_mpc(&self) -> bool {
        matches!(self.head, ActorHead::Cost(_))
    }

    pub fn sigma(&self) -> Vec<T> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    /// Stage costs for one observation (MPC actor only).
    pub fn actor_forward(&self, obs: &[T]) -> Result<StageCostParams<T>> {
        let ActorHead::Cost(scaling) = &self.head else {
            return Err(Error::Config("direct actor has no cost head".into()));
        };
        let raw = self.actor.forward_one(obs)?;
        Ok(scaling.map(&raw)?.0)
    }

    pub fn critic_forward(&self, obs: &[T]) -> Result<T> {
        Ok(self.critic.forward_one(obs)?[0])
    }

    pub fn values(&self, obs: &[T], rows: usize) -> Result<Vec<T>> {
        Ok(self.critic.forward(obs, rows)?.output().to_vec())
    }

    /// Actor means for `rows` observations. `mpc` is required for the MPC
    /// actor and ignored by the direct actor.
    pub fn means(&self, obs: &[T], rows: usize, mpc: Option<MpcInputs<'_, T>>) -> Result<MeanBatch<T>> {
        self.means_into(obs, rows, mpc, Tape::default())
    }

    /// [`Policy::means`] recording into a recycled tape.
    pub fn means_into(
        &self,
        obs: &[T],
        rows: usize,
        mpc: Option<MpcInputs<'_, T>>,
        mut tape: Tape<T>,
    ) -> Result<MeanBatch<T>> {
        self.actor.forward_into(obs, rows, &mut tape)?;
        let raw = tape.output();
        let n_u = self.n_u();
        match &self.head {
            ActorHead::Direct { center, half_range } => {
                let means = raw
                    .chunks_exact(n_u)
                    .flat_map(|r| (0..n_u).map(move |i| center[i] + half_range[i] * r[i]))
                    .collect();
                Ok(MeanBatch {
                    rows,
                    means,
                    failures: vec![None; rows],
                    solves: Vec::new(),
                    params: Vec::new(),
                    sig: Vec::new(),
                    tape,
                })
            }
            ActorHead::Cost(scaling) => {
                let mpc = mpc.ok_or_else(|| Error::Config("MPC actor needs solver inputs".into()))?;
                Error::check_len("MPC initial states", rows, mpc.x_init.len())?;
                Error::check_len("MPC warm starts", rows, mpc.u_warm.len())?;
                Error::check_len("MPC horizon", scaling.horizon(), mpc.layer.horizon())?;
                let mut params = Vec::with_capacity(rows);
                let mut sig = Vec::with_capacity(raw.len());
                for r in raw.chunks_exact(scaling.dim()) {
                    let (p, s) = scaling.map(r)?;
                    params.push(p);
                    sig.extend(s);
                }
                let results = mpc.layer.solve(mpc.x_init.to_vec(), params.clone(), mpc.u_warm.to_vec())?;
                let mut means = Vec::with_capacity(rows * n_u);
                let mut failures = Vec::with_capacity(rows);
                let mut solves = Vec::with_capacity(rows);
                for (b, res) in results.into_iter().enumerate() {
                    match res {
                        Ok(r) => {
                            means.extend_from_slice(r.first_control());
                            failures.push(None);
                            solves.push(Some(r));
                        }
                        Err(e) => {
                            means.extend((0..n_u).map(|i| mpc.layer.settings.clamp(i, mpc.u_warm[b][i])));
                            failures.push(Some(e));
                            solves.push(None);
                        }
                    }
                }
                Ok(MeanBatch {
                    rows,
                    means,
                    failures,
                    solves,
                    params,
                    sig,
                    tape,
                })
            }
        }
    }

    /// Accumulates `∂L/∂θ_actor` into `grad` from `d_mean = ∂L/∂mean`
    /// (`rows × n_u`). Rows with a failed solve contribute nothing. Returns
    /// the number of rows whose gradient came from a non-converged solve.
    pub fn actor_backward(
        &self,
        batch: &mut MeanBatch<T>,
        d_mean: &[T],
        layer: Option<&MpcLayer<T>>,
        grad: &mut [T],
    ) -> Result<usize> {
        let n_u = self.n_u();
        Error::check_len("mean gradient", batch.rows * n_u, d_mean.len())?;
        let mut d_raw = vec![T::zero(); batch.rows * self.actor.output_dim()];
        let mut approx = 0;
        match &self.head {
            ActorHead::Direct { half_range, .. } => {
                for (d, (g, h)) in d_raw.iter_mut().zip(d_mean.iter().zip(half_range.iter().cycle())) {
                    *d = *g * *h;
                }
            }
            ActorHead::Cost(scaling) => {
                let layer = layer.ok_or_else(|| Error::Config("MPC actor needs solver inputs".into()))?;
                let rows: Vec<usize> = (0..batch.rows).filter(|&b| batch.solves[b].is_some()).collect();
                let results: Vec<SolveResult<T>> =
                    rows.iter().map(|&b| batch.solves[b].clone().expect("solved row")).collect();
                let params: Vec<StageCostParams<T>> = rows.iter().map(|&b| batch.params[b].clone()).collect();
                let (n_x, h) = (scaling.n_x(), scaling.horizon());
                let seeds: Vec<BackwardSeed<T>> = rows
                    .iter()
                    .map(|&b| {
                        let mut s = BackwardSeed::zeros(n_x, n_u, h);
                        s.d_controls[..n_u].copy_from_slice(&d_mean[b * n_u..(b + 1) * n_u]);
                        s
                    })
                    .collect();
                let grads = layer.backward(&results, &params, &seeds)?;
                let dim = scaling.dim();
                for (&b, g) in rows.iter().zip(grads) {
                    let Ok(g) = g else { continue };
                    if g.approximate {
                        approx += 1;
                    }
                    scaling.chain(
                        &batch.sig[b * dim..(b + 1) * dim],
                        &g,
                        &mut d_raw[b * dim..(b + 1) * dim],
                    );
                }
            }
        }
        self.actor.backward(&mut batch.tape, &d_raw, grad)?;
        Ok(approx)
    }

    /// Draws (or, without exploration, takes) the executed control around
    /// `mean`. `log_prob` uses the unclamped sample.
    pub fn sample(&self, mean: &[T], explore: bool, rng: &mut impl Rng) -> PolicyAction<T> {
        let sigma = self.sigma();
        let u_raw: Vec<T> = if explore {
            mean.iter()
                .zip(&sigma)
                .map(|(&m, &s)| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + s * T::lit(z)
                })
                .collect()
        } else {
            mean.to_vec()
        };
        let u_sampled = u_raw
            .iter()
            .enumerate()
            .map(|(i, &v)| v.max(self.u_min[i]).min(self.u_max[i]))
            .collect();
        PolicyAction {
            u_mpc: mean.to_vec(),
            log_prob: gaussian_log_prob(&u_raw, mean, &self.log_std),
            u_sampled,
            u_raw,
            sigma,
            u_plan: Vec::new(),
        }
    }

    /// One observation: actor forward, MPC solve (MPC actor), then sampling.
    pub fn act(
        &self,
        obs: &[T],
        x_init: &[T],
        u_warm: &[T],
        layer: Option<&MpcLayer<T>>,
        explore: bool,
        rng: &mut impl Rng,
    ) -> Result<PolicyAction<T>> {
        let x = [x_init.to_vec()];
        let w = [u_warm.to_vec()];
        let inputs = layer.map(|layer| MpcInputs {
            layer,
            x_init: &x,
            u_warm: &w,
        });
        let mut batch = self.means(obs, 1, inputs)?;
        if let Some(e) = batch.failures.pop().flatten() {
            return Err(Error::Action { instance: 0, source: e });
        }
        let mut act = self.sample(batch.mean(0), explore, rng);
        if let Some(Some(r)) = batch.solves.pop() {
            act.u_plan = r.traj.controls().to_vec();
        }
        Ok(act)
    }

    /// Total number of trainable parameters (actor, `log σ`, critic).
    pub fn num_params(&self) -> usize {
        self.actor.num_params() + self.log_std.len() + self.critic.num_params()
    }
}
