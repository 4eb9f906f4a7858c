//! Quadratic stage costs `ℓ_t(z) = ½ zᵀ C_t z + c_tᵀ z` with `z = [x; u]`,
//! and the trajectories they are evaluated on.

use crate::linalg::{min_eigenvalue_sym, symmetrize};
use crate::{Error, Real, Result};

/// Lower bound enforced on the smallest eigenvalue of every `C_uu` block by
/// [`StageCostParams::new`].
pub const EPS_REG: f64 = 1e-6;

/// States `X[0..=T]` and controls `U[0..T]`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    n_x: usize,
    n_u: usize,
    horizon: usize,
    states: Vec<T>,
    controls: Vec<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn zeros(n_x: usize, n_u: usize, horizon: usize) -> Self {
        Self {
            n_x,
            n_u,
            horizon,
            states: vec![T::zero(); (horizon + 1) * n_x],
            controls: vec![T::zero(); horizon * n_u],
        }
    }

    /// Builds from flat buffers of length `(T+1)·n_x` and `T·n_u`.
    pub fn from_flat(n_x: usize, n_u: usize, states: Vec<T>, controls: Vec<T>) -> Result<Self> {
        if n_x == 0 || n_u == 0 || states.len() % n_x != 0 || states.is_empty() {
            return Err(Error::dim("trajectory states", n_x, states.len()));
        }
        let horizon = states.len() / n_x - 1;
        Error::check_len("trajectory controls", horizon * n_u, controls.len())?;
        Ok(Self {
            n_x,
            n_u,
            horizon,
            states,
            controls,
        })
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

    pub fn state(&self, t: usize) -> &[T] {
        &self.states[t * self.n_x..(t + 1) * self.n_x]
    }

    pub fn control(&self, t: usize) -> &[T] {
        &self.controls[t * self.n_u..(t + 1) * self.n_u]
    }

    pub fn state_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.states[t * self.n_x..(t + 1) * self.n_x]
    }

    pub fn control_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.controls[t * self.n_u..(t + 1) * self.n_u]
    }

    /// `(X[t], X[t+1])` with the successor mutable.
    pub fn transition_mut(&mut self, t: usize) -> (&[T], &mut [T]) {
        let (head, tail) = self.states.split_at_mut((t + 1) * self.n_x);
        (&head[t * self.n_x..], &mut tail[..self.n_x])
    }

    /// `(X[t], U[t], X[t+1])` with the successor mutable.
    pub fn step_parts_mut(&mut self, t: usize) -> (&[T], &[T], &mut [T]) {
        let n = self.n_x;
        let (head, tail) = self.states.split_at_mut((t + 1) * n);
        (
            &head[t * n..],
            &self.controls[t * self.n_u..(t + 1) * self.n_u],
            &mut tail[..n],
        )
    }

    pub fn states(&self) -> &[T] {
        &self.states
    }

    pub fn controls(&self) -> &[T] {
        &self.controls
    }

    pub fn controls_mut(&mut self) -> &mut [T] {
        &mut self.controls
    }
}

/// Per-timestep `(C_t, c_t)`; `C_t` is stored row-major, `(n_x+n_u)²` per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCostParams<T> {
    n_x: usize,
    n_u: usize,
    horizon: usize,
    hess: Vec<T>,
    grad: Vec<T>,
    regularized: bool,
}

impl<T: Real> StageCostParams<T> {
    /// Symmetrizes every `C_t` and shifts its `C_uu` block so that its
    /// smallest eigenvalue is at least [`EPS_REG`].
    pub fn new(n_x: usize, n_u: usize, hess: Vec<T>, grad: Vec<T>) -> Result<Self> {
        let mut p = Self::exact(n_x, n_u, hess, grad)?;
        let n = n_x + n_u;
        let eps = T::lit(EPS_REG);
        let mut block = vec![T::zero(); n_u * n_u];
        for t in 0..p.horizon {
            let c = &mut p.hess[t * n * n..(t + 1) * n * n];
            for i in 0..n_u {
                for j in 0..n_u {
                    block[i * n_u + j] = c[(n_x + i) * n + n_x + j];
                }
            }
            let lo = min_eigenvalue_sym(&block, n_u);
            if lo < eps {
                let shift = eps - lo;
                for i in 0..n_u {
                    c[(n_x + i) * n + n_x + i] = c[(n_x + i) * n + n_x + i] + shift;
                }
                p.regularized = true;
            }
        }
        Ok(p)
    }

    /// Symmetrizes only; no `C_uu` regularization. For evaluation and for
    /// problems whose control block is known to be positive definite.
    pub fn exact(n_x: usize, n_u: usize, mut hess: Vec<T>, grad: Vec<T>) -> Result<Self> {
        let n = n_x + n_u;
        if n_x == 0 || n_u == 0 {
            return Err(Error::Config("cost needs n_x, n_u >= 1".into()));
        }
        if grad.len() % n != 0 {
            return Err(Error::dim("cost vector c", n, grad.len() % n));
        }
        let horizon = grad.len() / n;
        Error::check_len("cost matrices C", horizon * n * n, hess.len())?;
        if !hess.iter().chain(&grad).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("cost parameters"));
        }
        for t in 0..horizon {
            symmetrize(&mut hess[t * n * n..(t + 1) * n * n], n);
        }
        Ok(Self {
            n_x,
            n_u,
            horizon,
            hess,
            grad,
            regularized: false,
        })
    }

    /// Diagonal `C_t = diag(d_t)`; `diag` and `lin` hold `T·(n_x+n_u)` entries.
    pub fn diagonal(n_x: usize, n_u: usize, diag: &[T], lin: &[T]) -> Result<Self> {
        let n = n_x + n_u;
        Error::check_len("diagonal cost", lin.len(), diag.len())?;
        if n == 0 || diag.len() % n != 0 {
            return Err(Error::dim("diagonal cost", n, diag.len()));
        }
        let horizon = diag.len() / n;
        let mut hess = vec![T::zero(); horizon * n * n];
        for t in 0..horizon {
            for i in 0..n {
                hess[t * n * n + i * n + i] = diag[t * n + i];
            }
        }
        Self::new(n_x, n_u, hess, lin.to_vec())
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn dim(&self) -> usize {
        self.n_x + self.n_u
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Whether construction had to lift some `C_uu` block.
    pub fn was_regularized(&self) -> bool {
        self.regularized
    }

    pub fn hessian(&self, t: usize) -> &[T] {
        let n = self.dim();
        &self.hess[t * n * n..(t + 1) * n * n]
    }

    pub fn gradient(&self, t: usize) -> &[T] {
        let n = self.dim();
        &self.grad[t * n..(t + 1) * n]
    }

    /// `½ zᵀ C_t z + c_tᵀ z` for `z = [x; u]`.
    pub fn stage_cost(&self, t: usize, x: &[T], u: &[T]) -> Result<T> {
        if t >= self.horizon {
            return Err(Error::Range {
                t,
                horizon: self.horizon,
            });
        }
        Error::check_len("state", self.n_x, x.len())?;
        Error::check_len("control", self.n_u, u.len())?;
        Ok(self.stage_cost_unchecked(t, x, u))
    }

    pub(crate) fn stage_cost_unchecked(&self, t: usize, x: &[T], u: &[T]) -> T {
        let n = self.dim();
        let c = self.hessian(t);
        let g = self.gradient(t);
        let half = T::lit(0.5);
        let mut acc = T::zero();
        for (i, (row, &gi)) in c.chunks_exact(n).zip(g).enumerate() {
            let zi = if i < self.n_x { x[i] } else { u[i - self.n_x] };
            let mut r = T::zero();
            for (&cij, &xj) in row[..self.n_x].iter().zip(x) {
                r = r + cij * xj;
            }
            for (&cij, &uj) in row[self.n_x..].iter().zip(u) {
                r = r + cij * uj;
            }
            acc = acc + zi * (half * r + gi);
        }
        acc
    }

    /// Sum of stage costs over `t = 0..T`; no terminal term.
    pub fn total_cost(&self, traj: &Trajectory<T>) -> Result<T> {
        Error::check_len("trajectory horizon", self.horizon, traj.horizon())?;
        Error::check_len("trajectory n_x", self.n_x, traj.n_x())?;
        Error::check_len("trajectory n_u", self.n_u, traj.n_u())?;
        let mut acc = T::zero();
        for t in 0..self.horizon {
            acc = acc + self.stage_cost_unchecked(t, traj.state(t), traj.control(t));
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_cost_examples() {
        let zero = StageCostParams::exact(2, 1, vec![0.0; 9], vec![0.0; 3]).unwrap();
        assert_eq!(zero.stage_cost(0, &[3.0, -1.0], &[2.0]).unwrap(), 0.0);

        let mut eye = vec![0.0; 9];
        eye[0] = 1.0;
        eye[4] = 1.0;
        eye[8] = 1.0;
        let p = StageCostParams::new(2, 1, eye, vec![0.0; 3]).unwrap();
        assert_eq!(p.stage_cost(0, &[1.0, 2.0], &[3.0]).unwrap(), 7.0);

        let p = StageCostParams::new(1, 1, vec![1.0, 0.0, 0.0, 2.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(p.stage_cost(0, &[2.0], &[1.0]).unwrap(), 5.0);
        assert_eq!(
            p.stage_cost(1, &[2.0], &[1.0]),
            Err(Error::Range { t: 1, horizon: 1 })
        );
    }

    #[test]
    fn total_cost_is_additive() {
        let p = StageCostParams::new(
            1,
            1,
            vec![1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 4.0],
            vec![1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let traj = Trajectory::from_flat(1, 1, vec![2.0, 1.0, 0.0], vec![1.0, 0.5]).unwrap();
        // stage 0: ½(4 + 2) + 2 = 5, stage 1: ½(2·1 + 4·0.25) = 1.5
        assert_eq!(p.total_cost(&traj).unwrap(), 6.5);
        let short = Trajectory::from_flat(1, 1, vec![2.0, 1.0], vec![1.0]).unwrap();
        assert!(matches!(p.total_cost(&short), Err(Error::Dimension { .. })));
    }

    #[test]
    fn singular_control_block_is_lifted() {
        let p = StageCostParams::new(1, 2, vec![0.0; 9], vec![0.0; 3]).unwrap();
        assert!(p.was_regularized());
        let c = p.hessian(0);
        let block = [c[4], c[5], c[7], c[8]];
        assert!(min_eigenvalue_sym(&block, 2) >= EPS_REG * (1.0 - 1e-9));
        let exact = StageCostParams::exact(1, 2, vec![0.0; 9], vec![0.0; 3]).unwrap();
        assert!(!exact.was_regularized());
    }

    #[test]
    fn construction_symmetrizes() {
        let p = StageCostParams::new(1, 1, vec![2.0, 1.0, 0.0, 3.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(p.hessian(0), &[2.0, 0.5, 0.5, 3.0]);
        assert!(StageCostParams::new(1, 1, vec![f64::NAN, 0.0, 0.0, 1.0], vec![0.0, 0.0]).is_err());
    }
}
