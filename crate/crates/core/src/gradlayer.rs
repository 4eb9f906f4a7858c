//! Implicit differentiation of a converged solve.
//!
//! At a fixed point the solution satisfies the KKT conditions of the local LQ
//! problem. Gradients of a loss `L(X, U)` with respect to the cost parameters
//! and the initial state follow from one auxiliary LQR with the same `A_t`,
//! `B_t`, `C_t`, linear cost `∂L/∂z_t`, and zero initial state. Control
//! dimensions on a bound are frozen (`du = 0`) in that auxiliary problem.
//!
//! With `dz_t` the auxiliary solution and `z_t` the primal:
//! `∂L/∂c_t = dz_t`, `∂L/∂C_t = ½(dz_t z_tᵀ + z_t dz_tᵀ)`, and `∂L/∂x_init` is
//! the auxiliary value gradient at `t = 0`.

use crate::dynamics::{DynModel, Linearization};
use crate::ilqr::{BackwardOp, SolveResult, StageWork};
use crate::qcost::StageCostParams;
use crate::{Error, Real, Result};

/// Upstream gradient `∂L/∂X` (`T+1` states) and `∂L/∂U` (`T` controls).
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSeed<T> {
    pub d_states: Vec<T>,
    pub d_controls: Vec<T>,
}

impl<T: Real> BackwardSeed<T> {
    pub fn zeros(n_x: usize, n_u: usize, horizon: usize) -> Self {
        Self {
            d_states: vec![T::zero(); (horizon + 1) * n_x],
            d_controls: vec![T::zero(); horizon * n_u],
        }
    }

    /// Seed of `L = ½‖U[0] − u_ref‖²`.
    pub fn first_control_error(result: &SolveResult<T>, u_ref: &[T]) -> Self {
        let (n, m, h) = (result.traj.n_x(), result.traj.n_u(), result.traj.horizon());
        let mut seed = Self::zeros(n, m, h);
        for (i, (u, r)) in result.first_control().iter().zip(u_ref).enumerate() {
            seed.d_controls[i] = *u - *r;
        }
        seed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradOutput<T> {
    n_x: usize,
    n_u: usize,
    horizon: usize,
    d_hess: Vec<T>,
    d_grad: Vec<T>,
    pub d_x_init: Vec<T>,
    /// Set when the forward solve had not converged.
    pub approximate: bool,
}

impl<T: Real> GradOutput<T> {
    pub fn zeros(n_x: usize, n_u: usize, horizon: usize) -> Self {
        let n = n_x + n_u;
        Self {
            n_x,
            n_u,
            horizon,
            d_hess: vec![T::zero(); horizon * n * n],
            d_grad: vec![T::zero(); horizon * n],
            d_x_init: vec![T::zero(); n_x],
            approximate: false,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.n_x + self.n_u
    }

    /// `∂L/∂C_t`, row-major and exactly symmetric.
    pub fn d_hess(&self, t: usize) -> &[T] {
        let n = self.dim();
        &self.d_hess[t * n * n..(t + 1) * n * n]
    }

    /// `∂L/∂c_t`.
    pub fn d_grad(&self, t: usize) -> &[T] {
        let n = self.dim();
        &self.d_grad[t * n..(t + 1) * n]
    }

    /// Diagonal of `∂L/∂C_t`, i.e. the gradient for a diagonal parameterization.
    pub fn d_hess_diag(&self, t: usize) -> Vec<T> {
        let n = self.dim();
        let h = self.d_hess(t);
        (0..n).map(|i| h[i * n + i]).collect()
    }

    pub fn all_d_hess(&self) -> &[T] {
        &self.d_hess
    }

    pub fn all_d_grad(&self) -> &[T] {
        &self.d_grad
    }
}

/// Sub-operations of one timestep of the gradient computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradPhase {
    Linearize,
    Backward(BackwardOp),
    Forward,
}

/// State of one auxiliary solve, advanced by per-timestep kernels so the
/// batch executor can schedule it in either mode.
#[derive(Debug, Clone)]
pub struct GradInstance<'a, T> {
    model: &'a DynModel<T>,
    result: &'a SolveResult<T>,
    params: &'a StageCostParams<T>,
    seed: &'a BackwardSeed<T>,
    lin: Linearization<T>,
    work: StageWork<T>,
    feedback: Vec<T>,
    feedforward: Vec<T>,
    value_hess: Vec<T>,
    value_grad: Vec<T>,
    dx: Vec<T>,
    dx_next: Vec<T>,
    du: Vec<T>,
    out: GradOutput<T>,
    error: Option<Error>,
}

impl<'a, T: Real> GradInstance<'a, T> {
    pub fn new(
        model: &'a DynModel<T>,
        result: &'a SolveResult<T>,
        params: &'a StageCostParams<T>,
        seed: &'a BackwardSeed<T>,
    ) -> Result<Self> {
        let (n, m, h) = (result.traj.n_x(), result.traj.n_u(), result.traj.horizon());
        Error::check_len("model n_x", n, model.n_x())?;
        Error::check_len("model n_u", m, model.n_u())?;
        Error::check_len("cost horizon", h, params.horizon())?;
        Error::check_len("cost n_x", n, params.n_x())?;
        Error::check_len("seed states", (h + 1) * n, seed.d_states.len())?;
        Error::check_len("seed controls", h * m, seed.d_controls.len())?;
        if !seed.d_states.iter().chain(&seed.d_controls).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("backward seed"));
        }
        let mut out = GradOutput::zeros(n, m, h);
        out.approximate = !result.converged;
        let mut value_grad = vec![T::zero(); n];
        value_grad.copy_from_slice(&seed.d_states[h * n..]);
        Ok(Self {
            model,
            result,
            params,
            seed,
            lin: Linearization::zeros(n, m, h),
            work: StageWork::new(n, m),
            feedback: vec![T::zero(); h * m * n],
            feedforward: vec![T::zero(); h * m],
            value_hess: vec![T::zero(); n * n],
            value_grad,
            dx: vec![T::zero(); n],
            dx_next: vec![T::zero(); n],
            du: vec![T::zero(); m],
            out,
            error: None,
        })
    }

    /// Uses a precomputed linearization instead of the per-timestep
    /// [`GradPhase::Linearize`] kernel.
    pub fn with_linearization(mut self, lin: &Linearization<T>) -> Result<Self> {
        Error::check_len("linearization horizon", self.lin.horizon(), lin.horizon())?;
        Error::check_len("linearization n_x", self.lin.n_x(), lin.n_x())?;
        self.lin = lin.clone();
        Ok(self)
    }

    pub fn horizon(&self) -> usize {
        self.result.traj.horizon()
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn op(&mut self, t: usize, phase: GradPhase) {
        if self.error.is_some() {
            return;
        }
        let (n, m) = (self.out.n_x, self.out.n_u);
        let traj = &self.result.traj;
        match phase {
            GradPhase::Linearize => {
                let (a, b) = self.lin.stage_mut(t);
                self.model.jacobians_into(traj.state(t), traj.control(t), a, b);
            }
            GradPhase::Backward(BackwardOp::Expand) => {
                self.work.l[..n].copy_from_slice(&self.seed.d_states[t * n..(t + 1) * n]);
                self.work.l[n..].copy_from_slice(&self.seed.d_controls[t * m..(t + 1) * m]);
                self.work.expand(
                    self.lin.a(t),
                    self.lin.b(t),
                    self.params.hessian(t),
                    &self.value_hess,
                    &self.value_grad,
                );
            }
            GradPhase::Backward(BackwardOp::Gains) => {
                if let Err(e) = self.work.solve_gains_frozen(self.result.clamped(t), t) {
                    self.error = Some(e);
                }
            }
            GradPhase::Backward(BackwardOp::Value) => {
                self.feedforward[t * m..(t + 1) * m].copy_from_slice(&self.work.k_ff);
                self.feedback[t * m * n..(t + 1) * m * n].copy_from_slice(&self.work.k_fb);
                self.work
                    .update_value(&mut self.value_hess, &mut self.value_grad);
                if t == 0 {
                    self.out.d_x_init.copy_from_slice(&self.value_grad);
                }
            }
            GradPhase::Forward => self.forward_op(t),
        }
    }

    /// `du_t = K_t dx_t + k_t`, gradient entries for stage `t`, then
    /// `dx_{t+1} = A_t dx_t + B_t du_t`.
    fn forward_op(&mut self, t: usize) {
        let (n, m) = (self.out.n_x, self.out.n_u);
        let nz = n + m;
        if t == 0 {
            self.dx.iter_mut().for_each(|v| *v = T::zero());
        }
        let kfb = &self.feedback[t * m * n..(t + 1) * m * n];
        let kff = &self.feedforward[t * m..(t + 1) * m];
        for i in 0..m {
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + kfb[i * n + j] * self.dx[j];
            }
            self.du[i] = acc + kff[i];
        }
        let traj = &self.result.traj;
        let (x, u) = (traj.state(t), traj.control(t));
        let z = |i: usize| if i < n { x[i] } else { u[i - n] };
        let (dx, du) = (&self.dx, &self.du);
        let dz = |i: usize| if i < n { dx[i] } else { du[i - n] };
        let half = T::lit(0.5);
        let dg = &mut self.out.d_grad[t * nz..(t + 1) * nz];
        for i in 0..nz {
            dg[i] = dz(i);
        }
        let dh = &mut self.out.d_hess[t * nz * nz..(t + 1) * nz * nz];
        for i in 0..nz {
            for j in i..nz {
                let v = half * (dz(i) * z(j) + z(i) * dz(j));
                dh[i * nz + j] = v;
                dh[j * nz + i] = v;
            }
        }
        let (a, b) = (self.lin.a(t), self.lin.b(t));
        let next = &mut self.dx_next;
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + a[i * n + j] * self.dx[j];
            }
            for j in 0..m {
                acc = acc + b[i * m + j] * self.du[j];
            }
            next[i] = acc;
        }
        std::mem::swap(&mut self.dx, &mut self.dx_next);
    }

    pub fn run_linearize(&mut self) {
        for t in 0..self.horizon() {
            self.op(t, GradPhase::Linearize);
        }
    }

    pub fn run_solve(&mut self) {
        let h = self.horizon();
        for t in (0..h).rev() {
            for op in crate::ilqr::BACKWARD_OPS {
                self.op(t, GradPhase::Backward(op));
            }
        }
        if h == 0 {
            self.out.d_x_init.copy_from_slice(&self.value_grad);
        }
        for t in 0..h {
            self.op(t, GradPhase::Forward);
        }
    }

    pub fn into_output(self) -> Result<GradOutput<T>> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.out),
        }
    }
}

/// Gradients of the loss encoded by `seed` with respect to `(C_t, c_t, x_init)`.
/// `lin` must be evaluated along `result.traj`.
pub fn backward<T: Real>(
    model: &DynModel<T>,
    result: &SolveResult<T>,
    lin: &Linearization<T>,
    params: &StageCostParams<T>,
    seed: &BackwardSeed<T>,
) -> Result<GradOutput<T>> {
    let mut inst = GradInstance::new(model, result, params, seed)?.with_linearization(lin)?;
    inst.run_solve();
    inst.into_output()
}

/// As [`backward`], linearizing along `result.traj` first.
pub fn backward_at<T: Real>(
    model: &DynModel<T>,
    result: &SolveResult<T>,
    params: &StageCostParams<T>,
    seed: &BackwardSeed<T>,
) -> Result<GradOutput<T>> {
    let mut inst = GradInstance::new(model, result, params, seed)?;
    inst.run_linearize();
    inst.run_solve();
    inst.into_output()
}
