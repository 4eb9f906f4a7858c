//! Control-limited iLQR.
//!
//! One iteration is three stages: linearize the dynamics along the nominal
//! trajectory, run the box-constrained Riccati recursion backward in time, and
//! roll out every line-search candidate `α ∈ alphas` with the affine feedback
//! law, keeping the cheapest. The cost is quadratic in `z = [x; u]`, so its
//! expansion about the nominal is exact; second-order dynamics terms are
//! dropped (Gauss-Newton).
//!
//! Every stage is written as per-timestep kernels operating on an
//! [`IlqrInstance`]. [`solve`] calls them in order on one instance; the batch
//! executor calls the very same kernels, either all timesteps at once per
//! instance (fused) or one timestep and sub-operation at a time across the
//! batch (naive).

use crate::boxqp::{self, BoxQpSettings, BoxQpWork};
use crate::dynamics::{DynModel, Linearization};
use crate::linalg::{cholesky, cholesky_solve, matmul, matmul_tn, matvec, matvec_t, symmetrize};
use crate::qcost::{StageCostParams, Trajectory};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSettings<T> {
    pub horizon: usize,
    pub max_iter: usize,
    pub u_min: Vec<T>,
    pub u_max: Vec<T>,
    /// Line-search coefficients, strictly decreasing in `(0, 1]`.
    pub alphas: Vec<T>,
    /// Relative cost decrease below which a solve counts as converged.
    pub conv_tol: T,
    pub boxqp: BoxQpSettings<T>,
    /// First non-zero `λ` of the `Q_uu + λI` schedule (×10 per failure).
    pub reg_init: T,
    pub reg_max: T,
}

pub const DEFAULT_ALPHAS: [f64; 4] = [1.0, 0.5, 0.25, 0.1];

impl<T: Real> SolveSettings<T> {
    pub fn new(horizon: usize, max_iter: usize, u_min: Vec<T>, u_max: Vec<T>) -> Result<Self> {
        let s = Self {
            horizon,
            max_iter,
            u_min,
            u_max,
            alphas: DEFAULT_ALPHAS.iter().map(|&a| T::lit(a)).collect(),
            conv_tol: T::lit(1e-6),
            boxqp: BoxQpSettings::default(),
            reg_init: T::lit(1e-6),
            reg_max: T::lit(1e-2),
        };
        s.validate()?;
        Ok(s)
    }

    /// Unbounded controls.
    pub fn unbounded(horizon: usize, max_iter: usize, n_u: usize) -> Result<Self> {
        Self::new(
            horizon,
            max_iter,
            vec![T::neg_infinity(); n_u],
            vec![T::infinity(); n_u],
        )
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_len("u_max", self.u_min.len(), self.u_max.len())?;
        if self.u_min.iter().zip(&self.u_max).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("u_min must be < u_max elementwise".into()));
        }
        if self.alphas.is_empty() {
            return Err(Error::Config("alphas must be non-empty".into()));
        }
        let in_range = |a: &T| *a > T::zero() && *a <= T::one();
        if !self.alphas.iter().all(in_range) || self.alphas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::Config(
                "alphas must lie in (0, 1] and be strictly decreasing".into(),
            ));
        }
        if !(self.conv_tol >= T::zero()) {
            return Err(Error::Config("conv_tol must be >= 0".into()));
        }
        Ok(())
    }

    pub fn n_u(&self) -> usize {
        self.u_min.len()
    }

    #[inline]
    pub fn clamp(&self, i: usize, v: T) -> T {
        v.max(self.u_min[i]).min(self.u_max[i])
    }
}

/// Feedback `K_t` (`n_u × n_x`), feedforward `k_t`, and the boxQP free set.
#[derive(Debug, Clone, PartialEq)]
pub struct Gains<T> {
    n_x: usize,
    n_u: usize,
    horizon: usize,
    feedback: Vec<T>,
    feedforward: Vec<T>,
    free: Vec<bool>,
}

impl<T: Real> Gains<T> {
    pub fn zeros(n_x: usize, n_u: usize, horizon: usize) -> Self {
        Self {
            n_x,
            n_u,
            horizon,
            feedback: vec![T::zero(); horizon * n_u * n_x],
            feedforward: vec![T::zero(); horizon * n_u],
            free: vec![true; horizon * n_u],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn feedback(&self, t: usize) -> &[T] {
        let s = self.n_u * self.n_x;
        &self.feedback[t * s..(t + 1) * s]
    }

    pub fn feedforward(&self, t: usize) -> &[T] {
        &self.feedforward[t * self.n_u..(t + 1) * self.n_u]
    }

    pub fn free(&self, t: usize) -> &[bool] {
        &self.free[t * self.n_u..(t + 1) * self.n_u]
    }

    pub fn feedback_mut(&mut self, t: usize) -> &mut [T] {
        let s = self.n_u * self.n_x;
        &mut self.feedback[t * s..(t + 1) * s]
    }

    pub fn feedforward_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.feedforward[t * self.n_u..(t + 1) * self.n_u]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult<T> {
    pub traj: Trajectory<T>,
    pub gains: Gains<T>,
    pub cost: T,
    pub iterations: usize,
    pub converged: bool,
    /// `T × n_u`, row-major; `true` where the control sits on a bound.
    pub clamped_mask: Vec<bool>,
    /// Rollout cost followed by the accepted cost of every iteration.
    pub cost_history: Vec<T>,
    /// Line-search coefficient per iteration, `0` when no step was taken.
    pub alpha_history: Vec<T>,
}

impl<T: Real> SolveResult<T> {
    pub fn first_control(&self) -> &[T] {
        self.traj.control(0)
    }

    pub fn clamped(&self, t: usize) -> &[bool] {
        let m = self.traj.n_u();
        &self.clamped_mask[t * m..(t + 1) * m]
    }
}

// ---------------------------------------------------------------------------
// Stage kernels

/// Expansion of the stage Q-function plus scratch for the gain solve.
#[derive(Debug, Clone)]
pub(crate) struct StageWork<T> {
    n_x: usize,
    n_u: usize,
    pub(crate) l: Vec<T>,
    va: Vec<T>,
    vb: Vec<T>,
    pub(crate) qx: Vec<T>,
    pub(crate) qu: Vec<T>,
    pub(crate) qxx: Vec<T>,
    pub(crate) quu: Vec<T>,
    pub(crate) qux: Vec<T>,
    pub(crate) quu_reg: Vec<T>,
    factor: Vec<T>,
    lo: Vec<T>,
    hi: Vec<T>,
    warm: Vec<T>,
    col: Vec<T>,
    idx: Vec<usize>,
    pub(crate) k_ff: Vec<T>,
    pub(crate) k_fb: Vec<T>,
    pub(crate) free: Vec<bool>,
    tmp_mn: Vec<T>,
    tmp_nn: Vec<T>,
    tmp_nn2: Vec<T>,
    tmp_m: Vec<T>,
    tmp_n: Vec<T>,
    qp: BoxQpWork<T>,
}

impl<T: Real> StageWork<T> {
    pub(crate) fn new(n_x: usize, n_u: usize) -> Self {
        let z = T::zero();
        Self {
            n_x,
            n_u,
            l: vec![z; n_x + n_u],
            va: vec![z; n_x * n_x],
            vb: vec![z; n_x * n_u],
            qx: vec![z; n_x],
            qu: vec![z; n_u],
            qxx: vec![z; n_x * n_x],
            quu: vec![z; n_u * n_u],
            qux: vec![z; n_u * n_x],
            quu_reg: vec![z; n_u * n_u],
            factor: vec![z; n_u * n_u],
            lo: vec![z; n_u],
            hi: vec![z; n_u],
            warm: vec![z; n_u],
            col: vec![z; n_u],
            idx: Vec::with_capacity(n_u),
            k_ff: vec![z; n_u],
            k_fb: vec![z; n_u * n_x],
            free: vec![true; n_u],
            tmp_mn: vec![z; n_u * n_x],
            tmp_nn: vec![z; n_x * n_x],
            tmp_nn2: vec![z; n_x * n_x],
            tmp_m: vec![z; n_u],
            tmp_n: vec![z; n_x],
            qp: BoxQpWork::new(n_u),
        }
    }

    /// Q-function expansion about the nominal given the stage cost gradient in
    /// `self.l`, the stage Hessian `cmat` and the next value function `(vh, vg)`.
    pub(crate) fn expand(&mut self, a: &[T], b: &[T], cmat: &[T], vh: &[T], vg: &[T]) {
        let (n, m) = (self.n_x, self.n_u);
        let nz = n + m;
        matvec_t(a, vg, n, n, &mut self.qx);
        matvec_t(b, vg, n, m, &mut self.qu);
        for i in 0..n {
            self.qx[i] = self.l[i] + self.qx[i];
        }
        for i in 0..m {
            self.qu[i] = self.l[n + i] + self.qu[i];
        }
        matmul(vh, a, n, n, n, &mut self.va);
        matmul(vh, b, n, n, m, &mut self.vb);
        matmul_tn(a, &self.va, n, n, n, &mut self.qxx);
        matmul_tn(b, &self.vb, n, m, m, &mut self.quu);
        matmul_tn(b, &self.va, n, m, n, &mut self.qux);
        for i in 0..n {
            for j in 0..n {
                self.qxx[i * n + j] = cmat[i * nz + j] + self.qxx[i * n + j];
            }
        }
        for i in 0..m {
            for j in 0..m {
                self.quu[i * m + j] = cmat[(n + i) * nz + n + j] + self.quu[i * m + j];
            }
            for j in 0..n {
                self.qux[i * n + j] = cmat[(n + i) * nz + j] + self.qux[i * n + j];
            }
        }
        symmetrize(&mut self.quu, m);
    }

    /// Feedback rows for the free coordinates: `K_f = -(Q_uu)_ff⁻¹ (Q_ux)_f`,
    /// clamped rows zero. Uses `self.quu_reg` and `self.free`.
    fn feedback_from_free(&mut self) -> bool {
        let (n, m) = (self.n_x, self.n_u);
        self.k_fb.iter_mut().for_each(|v| *v = T::zero());
        self.idx.clear();
        self.idx.extend((0..m).filter(|&i| self.free[i]));
        let f = self.idx.len();
        if f == 0 {
            return true;
        }
        for (a, &i) in self.idx.iter().enumerate() {
            for (c, &j) in self.idx.iter().enumerate() {
                self.factor[a * f + c] = self.quu_reg[i * m + j];
            }
        }
        if !cholesky(&mut self.factor[..f * f], f) {
            return false;
        }
        for j in 0..n {
            for (a, &i) in self.idx.iter().enumerate() {
                self.col[a] = self.qux[i * n + j];
            }
            cholesky_solve(&self.factor[..f * f], f, &mut self.col[..f]);
            for (a, &i) in self.idx.iter().enumerate() {
                self.k_fb[i * n + j] = -self.col[a];
            }
        }
        true
    }

    /// Box-constrained gain solve with the `λ` schedule on `Q_uu`.
    pub(crate) fn solve_gains(&mut self, s: &SolveSettings<T>, u_nom: &[T], t: usize) -> Result<()> {
        let m = self.n_u;
        let mut lambda = T::zero();
        loop {
            self.quu_reg.copy_from_slice(&self.quu);
            for i in 0..m {
                self.quu_reg[i * m + i] = self.quu_reg[i * m + i] + lambda;
            }
            self.factor[..m * m].copy_from_slice(&self.quu_reg);
            if cholesky(&mut self.factor[..m * m], m) {
                break;
            }
            lambda = if lambda == T::zero() {
                s.reg_init
            } else {
                lambda * T::lit(10.0)
            };
            if lambda > s.reg_max * T::lit(1.000001) {
                return Err(Error::NotPositiveDefinite { stage: Some(t) });
            }
        }
        for i in 0..m {
            self.lo[i] = s.u_min[i] - u_nom[i];
            self.hi[i] = s.u_max[i] - u_nom[i];
            self.warm[i] = T::zero();
        }
        boxqp::solve_into(
            &self.quu_reg,
            &self.qu,
            &self.lo,
            &self.hi,
            &self.warm,
            &s.boxqp,
            &mut self.qp,
        )
        .map_err(|_| Error::NotPositiveDefinite { stage: Some(t) })?;
        self.k_ff.copy_from_slice(&self.qp.x);
        self.free.copy_from_slice(&self.qp.free);
        if !self.feedback_from_free() {
            return Err(Error::NotPositiveDefinite { stage: Some(t) });
        }
        Ok(())
    }

    /// Unconstrained gains with the `clamped` coordinates frozen: their rows
    /// and columns of `Q_uu` are replaced by the identity and their `Q_u`,
    /// `Q_ux` rows zeroed.
    pub(crate) fn solve_gains_frozen(&mut self, clamped: &[bool], t: usize) -> Result<()> {
        let (n, m) = (self.n_x, self.n_u);
        self.quu_reg.copy_from_slice(&self.quu);
        for i in 0..m {
            if clamped[i] {
                for j in 0..m {
                    self.quu_reg[i * m + j] = T::zero();
                    self.quu_reg[j * m + i] = T::zero();
                }
                self.quu_reg[i * m + i] = T::one();
                self.qu[i] = T::zero();
                for j in 0..n {
                    self.qux[i * n + j] = T::zero();
                }
            }
            self.free[i] = !clamped[i];
        }
        self.factor[..m * m].copy_from_slice(&self.quu_reg);
        if !cholesky(&mut self.factor[..m * m], m) {
            return Err(Error::NotPositiveDefinite { stage: Some(t) });
        }
        for i in 0..m {
            self.k_ff[i] = -self.qu[i];
        }
        cholesky_solve(&self.factor[..m * m], m, &mut self.k_ff);
        for i in 0..m {
            if clamped[i] {
                self.k_ff[i] = T::zero();
            }
        }
        if !self.feedback_from_free() {
            return Err(Error::NotPositiveDefinite { stage: Some(t) });
        }
        Ok(())
    }

    /// Value-function update from the current gains:
    /// `V = Q_xx + KᵀQ_uu K + KᵀQ_ux + Q_uxᵀK`,
    /// `v = Q_x + KᵀQ_uu k + KᵀQ_u + Q_uxᵀk`.
    pub(crate) fn update_value(&mut self, vh: &mut [T], vg: &mut [T]) {
        let (n, m) = (self.n_x, self.n_u);
        matmul(&self.quu, &self.k_fb, m, m, n, &mut self.tmp_mn);
        matmul_tn(&self.k_fb, &self.tmp_mn, m, n, n, &mut self.tmp_nn);
        matmul_tn(&self.k_fb, &self.qux, m, n, n, &mut self.tmp_nn2);
        for i in 0..n {
            for j in 0..n {
                vh[i * n + j] = self.qxx[i * n + j]
                    + self.tmp_nn[i * n + j]
                    + self.tmp_nn2[i * n + j]
                    + self.tmp_nn2[j * n + i];
            }
        }
        symmetrize(vh, n);

        matvec(&self.quu, &self.k_ff, m, m, &mut self.tmp_m);
        for i in 0..m {
            self.tmp_m[i] = self.tmp_m[i] + self.qu[i];
        }
        matvec_t(&self.k_fb, &self.tmp_m, m, n, vg);
        matvec_t(&self.qux, &self.k_ff, m, n, &mut self.tmp_n);
        for i in 0..n {
            vg[i] = self.qx[i] + vg[i] + self.tmp_n[i];
        }
    }
}

/// Stage cost gradient `C z + c` at `z = [x; u]`.
pub(crate) fn cost_gradient<T: Real>(cmat: &[T], c: &[T], x: &[T], u: &[T], out: &mut [T]) {
    let nx = x.len();
    let n = c.len();
    for ((o, row), &ci) in out.iter_mut().zip(cmat.chunks_exact(n)).zip(c) {
        let mut acc = T::zero();
        for (&cij, &xj) in row[..nx].iter().zip(x) {
            acc = acc + cij * xj;
        }
        for (&cij, &uj) in row[nx..].iter().zip(u) {
            acc = acc + cij * uj;
        }
        *o = acc + ci;
    }
}

/// One line-search candidate: its own trajectory buffers and running cost.
#[derive(Debug, Clone)]
pub struct Candidate<T> {
    alpha: T,
    traj: Trajectory<T>,
    cost: T,
    diverged_at: Option<usize>,
    dx: Vec<T>,
}

impl<T: Real> Candidate<T> {
    pub fn new(alpha: T, n_x: usize, n_u: usize, horizon: usize) -> Self {
        Self {
            alpha,
            traj: Trajectory::zeros(n_x, n_u, horizon),
            cost: T::zero(),
            diverged_at: None,
            dx: vec![T::zero(); n_x],
        }
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn cost(&self) -> T {
        self.cost
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// `u_t = clamp(U_nom[t] + α k_t + K_t (x_t − X_nom[t]))`; resets at `t = 0`.
    fn control_op(&mut self, s: &SolveSettings<T>, nom: &Trajectory<T>, gains: &Gains<T>, t: usize) {
        if t == 0 {
            self.cost = T::zero();
            self.diverged_at = None;
            self.traj.state_mut(0).copy_from_slice(nom.state(0));
        }
        if self.diverged_at.is_some() {
            return;
        }
        let xs = self.traj.state(t);
        let xn = nom.state(t);
        for i in 0..self.dx.len() {
            self.dx[i] = xs[i] - xn[i];
        }
        let n = self.dx.len();
        let kfb = gains.feedback(t);
        let kff = gains.feedforward(t);
        let un = nom.control(t);
        let u = self.traj.control_mut(t);
        for i in 0..u.len() {
            let mut fb = T::zero();
            for j in 0..n {
                fb = fb + kfb[i * n + j] * self.dx[j];
            }
            u[i] = s.clamp(i, un[i] + self.alpha * kff[i] + fb);
        }
    }

    fn cost_op(&mut self, p: &StageCostParams<T>, t: usize) {
        if self.diverged_at.is_some() {
            return;
        }
        self.cost = self.cost + p.stage_cost_unchecked(t, self.traj.state(t), self.traj.control(t));
    }

    fn dynamics_op(&mut self, model: &DynModel<T>, t: usize) {
        if self.diverged_at.is_some() {
            return;
        }
        let (x, u, next) = self.traj.step_parts_mut(t);
        model.step_into(x, u, next);
        if !next.iter().all(|v| v.is_finite()) || !self.cost.is_finite() {
            self.diverged_at = Some(t);
            self.cost = T::infinity();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Status {
    Active,
    Converged,
    Exhausted,
    Failed(Error),
}

/// Sub-operations of one backward-pass timestep, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardOp {
    Expand,
    Gains,
    Value,
}

pub const BACKWARD_OPS: [BackwardOp; 3] = [BackwardOp::Expand, BackwardOp::Gains, BackwardOp::Value];

/// Sub-operations of one forward (line-search) timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardOp {
    Control,
    Cost,
    Dynamics,
}

pub const FORWARD_OPS: [ForwardOp; 3] = [ForwardOp::Control, ForwardOp::Cost, ForwardOp::Dynamics];

/// Mutable state of one iLQR solve, advanced by the stage kernels.
#[derive(Debug, Clone)]
pub struct IlqrInstance<'a, T> {
    model: &'a DynModel<T>,
    params: &'a StageCostParams<T>,
    settings: &'a SolveSettings<T>,
    traj: Trajectory<T>,
    lin: Linearization<T>,
    gains: Gains<T>,
    cost: T,
    cost_acc: T,
    value_hess: Vec<T>,
    value_grad: Vec<T>,
    work: StageWork<T>,
    cost_history: Vec<T>,
    alpha_history: Vec<T>,
    iterations: usize,
    status: Status,
}

impl<'a, T: Real> IlqrInstance<'a, T> {
    /// Validates dimensions, clamps the warm start and seats `X[0]`.
    pub fn new(
        model: &'a DynModel<T>,
        x_init: &[T],
        params: &'a StageCostParams<T>,
        u_warm: &[T],
        settings: &'a SolveSettings<T>,
    ) -> Result<Self> {
        settings.validate()?;
        let (n, m, h) = (model.n_x(), model.n_u(), settings.horizon);
        Error::check_len("x_init", n, x_init.len())?;
        Error::check_len("cost n_x", n, params.n_x())?;
        Error::check_len("cost n_u", m, params.n_u())?;
        Error::check_len("cost horizon", h, params.horizon())?;
        Error::check_len("bounds", m, settings.n_u())?;
        Error::check_len("warm start", h * m, u_warm.len())?;
        if !x_init.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("x_init"));
        }
        if !u_warm.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("warm start"));
        }
        let mut traj = Trajectory::zeros(n, m, h);
        traj.state_mut(0).copy_from_slice(x_init);
        for (k, (dst, src)) in traj.controls_mut().iter_mut().zip(u_warm).enumerate() {
            *dst = settings.clamp(k % m, *src);
        }
        Ok(Self {
            model,
            params,
            settings,
            traj,
            lin: Linearization::zeros(n, m, h),
            gains: Gains::zeros(n, m, h),
            cost: T::zero(),
            cost_acc: T::zero(),
            value_hess: vec![T::zero(); n * n],
            value_grad: vec![T::zero(); n],
            work: StageWork::new(n, m),
            cost_history: Vec::new(),
            alpha_history: Vec::new(),
            iterations: 0,
            status: Status::Active,
        })
    }

    pub fn horizon(&self) -> usize {
        self.settings.horizon
    }

    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }

    pub fn trajectory(&self) -> &Trajectory<T> {
        &self.traj
    }

    pub fn cost(&self) -> T {
        self.cost
    }

    /// One fresh candidate per line-search coefficient.
    pub fn make_candidates(&self) -> Vec<Candidate<T>> {
        let (n, m, h) = (self.model.n_x(), self.model.n_u(), self.horizon());
        self.settings
            .alphas
            .iter()
            .map(|&a| Candidate::new(a, n, m, h))
            .collect()
    }

    fn fail(&mut self, e: Error) {
        if self.status == Status::Active {
            self.status = Status::Failed(e);
        }
    }

    // -- initial rollout ---------------------------------------------------

    pub fn rollout_op(&mut self, t: usize) {
        if !self.is_active() {
            return;
        }
        if t == 0 {
            self.cost_acc = T::zero();
        }
        self.cost_acc = self.cost_acc
            + self
                .params
                .stage_cost_unchecked(t, self.traj.state(t), self.traj.control(t));
        let (x, u, next) = self.traj.step_parts_mut(t);
        self.model.step_into(x, u, next);
        if !next.iter().all(|v| v.is_finite()) {
            self.fail(Error::Divergence { t });
        }
    }

    pub fn finish_rollout(&mut self) {
        if !self.is_active() {
            return;
        }
        if !self.cost_acc.is_finite() {
            self.fail(Error::NonFinite("rollout cost"));
            return;
        }
        self.cost = self.cost_acc;
        self.cost_history.push(self.cost);
    }

    pub fn run_rollout(&mut self) {
        for t in 0..self.horizon() {
            self.rollout_op(t);
        }
        self.finish_rollout();
    }

    // -- stage 1: linearization --------------------------------------------

    pub fn linearize_op(&mut self, t: usize) {
        if !self.is_active() {
            return;
        }
        let (a, b) = self.lin.stage_mut(t);
        self.model
            .jacobians_into(self.traj.state(t), self.traj.control(t), a, b);
    }

    pub fn run_linearize(&mut self) {
        for t in 0..self.horizon() {
            self.linearize_op(t);
        }
    }

    // -- stage 2: backward pass --------------------------------------------

    pub fn backward_op(&mut self, t: usize, op: BackwardOp) {
        if !self.is_active() {
            return;
        }
        match op {
            BackwardOp::Expand => {
                if t + 1 == self.horizon() {
                    self.value_hess.iter_mut().for_each(|v| *v = T::zero());
                    self.value_grad.iter_mut().for_each(|v| *v = T::zero());
                }
                cost_gradient(
                    self.params.hessian(t),
                    self.params.gradient(t),
                    self.traj.state(t),
                    self.traj.control(t),
                    &mut self.work.l,
                );
                self.work.expand(
                    self.lin.a(t),
                    self.lin.b(t),
                    self.params.hessian(t),
                    &self.value_hess,
                    &self.value_grad,
                );
            }
            BackwardOp::Gains => {
                if let Err(e) = self.work.solve_gains(self.settings, self.traj.control(t), t) {
                    self.fail(e);
                }
            }
            BackwardOp::Value => {
                self.gains.feedforward_mut(t).copy_from_slice(&self.work.k_ff);
                self.gains.feedback_mut(t).copy_from_slice(&self.work.k_fb);
                let m = self.work.n_u;
                self.gains.free[t * m..(t + 1) * m].copy_from_slice(&self.work.free);
                self.work
                    .update_value(&mut self.value_hess, &mut self.value_grad);
            }
        }
    }

    pub fn run_backward(&mut self) {
        for t in (0..self.horizon()).rev() {
            for op in BACKWARD_OPS {
                self.backward_op(t, op);
            }
        }
    }

    // -- stage 3: forward line search --------------------------------------

    pub fn candidate_op(&self, cand: &mut Candidate<T>, t: usize, op: ForwardOp) {
        if !self.is_active() {
            return;
        }
        match op {
            ForwardOp::Control => cand.control_op(self.settings, &self.traj, &self.gains, t),
            ForwardOp::Cost => cand.cost_op(self.params, t),
            ForwardOp::Dynamics => cand.dynamics_op(self.model, t),
        }
    }

    pub fn run_candidate(&self, cand: &mut Candidate<T>) {
        if !self.is_active() {
            return;
        }
        if self.horizon() == 0 {
            cand.cost = T::zero();
            cand.diverged_at = None;
            return;
        }
        for t in 0..self.horizon() {
            for op in FORWARD_OPS {
                self.candidate_op(cand, t, op);
            }
            if cand.diverged() {
                break;
            }
        }
    }

    /// Picks the cheapest candidate (first on ties) and applies the
    /// convergence test. A candidate must beat the nominal cost by more than
    /// floating-point resolution; otherwise the nominal is kept (`α = 0`).
    pub fn finish_iteration(&mut self, cands: &mut [Candidate<T>]) {
        if !self.is_active() {
            return;
        }
        self.iterations += 1;
        let mut best: Option<usize> = None;
        for (i, c) in cands.iter().enumerate() {
            if c.diverged() || !c.cost.is_finite() {
                continue;
            }
            if best.map_or(true, |b| c.cost < cands[b].cost) {
                best = Some(i);
            }
        }
        let Some(best) = best else {
            let t = cands.iter().filter_map(|c| c.diverged_at).min().unwrap_or(0);
            self.fail(Error::Divergence { t });
            return;
        };
        let prev = self.cost;
        let scale = T::one().max(prev.abs());
        let resolution = T::lit(16.0) * T::epsilon() * scale;
        if cands[best].cost < prev - resolution {
            std::mem::swap(&mut self.traj, &mut cands[best].traj);
            self.cost = cands[best].cost;
            self.alpha_history.push(cands[best].alpha);
            self.cost_history.push(self.cost);
            if (prev - self.cost).abs() / scale <= self.settings.conv_tol {
                self.status = Status::Converged;
            }
        } else {
            self.alpha_history.push(T::zero());
            self.cost_history.push(self.cost);
            self.status = Status::Converged;
        }
        if self.status == Status::Active && self.iterations >= self.settings.max_iter {
            self.status = Status::Exhausted;
        }
    }

    /// Marks a solve whose iteration budget is zero as finished.
    pub fn finish_without_iterations(&mut self) {
        if self.status == Status::Active && self.settings.max_iter == 0 {
            self.status = Status::Exhausted;
        }
    }

    pub fn into_result(self) -> Result<SolveResult<T>> {
        let converged = match self.status {
            Status::Failed(e) => return Err(e),
            Status::Converged => true,
            Status::Active | Status::Exhausted => false,
        };
        let m = self.traj.n_u();
        let clamped_mask = self
            .traj
            .controls()
            .iter()
            .enumerate()
            .map(|(k, &u)| u == self.settings.u_min[k % m] || u == self.settings.u_max[k % m])
            .collect();
        Ok(SolveResult {
            traj: self.traj,
            gains: self.gains,
            cost: self.cost,
            iterations: self.iterations,
            converged,
            clamped_mask,
            cost_history: self.cost_history,
            alpha_history: self.alpha_history,
        })
    }
}

// ---------------------------------------------------------------------------
// Public stage-level API

/// `X[0] = x_init`, `X[t+1] = f(X[t], U[t])`.
pub fn rollout<T: Real>(model: &DynModel<T>, x_init: &[T], controls: &[T]) -> Result<Trajectory<T>> {
    let (n, m) = (model.n_x(), model.n_u());
    Error::check_len("x_init", n, x_init.len())?;
    if controls.len() % m != 0 {
        return Err(Error::dim("control sequence", m, controls.len() % m));
    }
    let horizon = controls.len() / m;
    let mut traj = Trajectory::zeros(n, m, horizon);
    traj.state_mut(0).copy_from_slice(x_init);
    traj.controls_mut().copy_from_slice(controls);
    if !x_init.iter().chain(controls).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rollout input"));
    }
    for t in 0..horizon {
        let (x, u, next) = traj.step_parts_mut(t);
        model.step_into(x, u, next);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { t });
        }
    }
    Ok(traj)
}

/// `(A_t, B_t)` along a trajectory.
pub fn linearize<T: Real>(model: &DynModel<T>, traj: &Trajectory<T>) -> Result<Linearization<T>> {
    Error::check_len("trajectory n_x", model.n_x(), traj.n_x())?;
    Error::check_len("trajectory n_u", model.n_u(), traj.n_u())?;
    let mut lin = Linearization::zeros(traj.n_x(), traj.n_u(), traj.horizon());
    for t in 0..traj.horizon() {
        if !traj.state(t).iter().chain(traj.control(t)).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("trajectory"));
        }
        let (a, b) = lin.stage_mut(t);
        model.jacobians_into(traj.state(t), traj.control(t), a, b);
    }
    Ok(lin)
}

/// Box-constrained Riccati recursion about `traj`.
pub fn backward_pass<T: Real>(
    lin: &Linearization<T>,
    params: &StageCostParams<T>,
    traj: &Trajectory<T>,
    settings: &SolveSettings<T>,
) -> Result<Gains<T>> {
    settings.validate()?;
    let (n, m, h) = (traj.n_x(), traj.n_u(), traj.horizon());
    Error::check_len("linearization horizon", h, lin.horizon())?;
    Error::check_len("cost horizon", h, params.horizon())?;
    Error::check_len("cost n_x", n, params.n_x())?;
    Error::check_len("bounds", m, settings.n_u())?;
    let mut work = StageWork::new(n, m);
    let mut gains = Gains::zeros(n, m, h);
    let mut vh = vec![T::zero(); n * n];
    let mut vg = vec![T::zero(); n];
    for t in (0..h).rev() {
        cost_gradient(
            params.hessian(t),
            params.gradient(t),
            traj.state(t),
            traj.control(t),
            &mut work.l,
        );
        work.expand(lin.a(t), lin.b(t), params.hessian(t), &vh, &vg);
        work.solve_gains(settings, traj.control(t), t)?;
        gains.feedforward_mut(t).copy_from_slice(&work.k_ff);
        gains.feedback_mut(t).copy_from_slice(&work.k_fb);
        gains.free[t * m..(t + 1) * m].copy_from_slice(&work.free);
        work.update_value(&mut vh, &mut vg);
    }
    Ok(gains)
}

/// Evaluates every line-search candidate and returns the best trajectory,
/// its cost and the coefficient used (`0` when the nominal is kept).
pub fn forward_linesearch<T: Real>(
    model: &DynModel<T>,
    params: &StageCostParams<T>,
    nominal: &Trajectory<T>,
    gains: &Gains<T>,
    settings: &SolveSettings<T>,
) -> Result<(Trajectory<T>, T, T)> {
    settings.validate()?;
    let h = nominal.horizon();
    Error::check_len("gains horizon", h, gains.horizon())?;
    Error::check_len("cost horizon", h, params.horizon())?;
    let nominal_cost = params.total_cost(nominal)?;
    let (n, m) = (nominal.n_x(), nominal.n_u());
    let mut best: Option<Candidate<T>> = None;
    let mut first_divergence = None;
    for &alpha in &settings.alphas {
        let mut c = Candidate::new(alpha, n, m, h);
        if h == 0 {
            c.cost = T::zero();
        }
        for t in 0..h {
            c.control_op(settings, nominal, gains, t);
            c.cost_op(params, t);
            c.dynamics_op(model, t);
            if c.diverged() {
                break;
            }
        }
        if let Some(t) = c.diverged_at {
            first_divergence.get_or_insert(t);
            continue;
        }
        if best.as_ref().map_or(true, |b| c.cost < b.cost) {
            best = Some(c);
        }
    }
    let Some(best) = best else {
        return Err(Error::Divergence {
            t: first_divergence.unwrap_or(0),
        });
    };
    let resolution = T::lit(16.0) * T::epsilon() * T::one().max(nominal_cost.abs());
    if best.cost < nominal_cost - resolution {
        Ok((best.traj, best.cost, best.alpha))
    } else {
        Ok((nominal.clone(), nominal_cost, T::zero()))
    }
}

/// Full solve: rollout, then up to `max_iter` iterations of the three stages.
pub fn solve<T: Real>(
    model: &DynModel<T>,
    x_init: &[T],
    params: &StageCostParams<T>,
    u_warm: &[T],
    settings: &SolveSettings<T>,
) -> Result<SolveResult<T>> {
    let mut inst = IlqrInstance::new(model, x_init, params, u_warm, settings)?;
    let mut cands = inst.make_candidates();
    inst.run_rollout();
    inst.finish_without_iterations();
    while inst.is_active() {
        inst.run_linearize();
        inst.run_backward();
        for c in cands.iter_mut() {
            inst.run_candidate(c);
        }
        inst.finish_iteration(&mut cands);
    }
    inst.into_result()
}

/// Receding-horizon warm start: drop the first control, repeat the last.
pub fn shift_warm_start<T: Real>(controls: &[T], n_u: usize) -> Vec<T> {
    if controls.len() <= n_u {
        return controls.to_vec();
    }
    let mut out = controls[n_u..].to_vec();
    out.extend_from_slice(&controls[controls.len() - n_u..]);
    out
}
