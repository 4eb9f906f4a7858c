//! Discrete-time dynamics with closed-form Jacobians.
//!
//! All models are explicit-Euler discretizations `x' = x + dt · g(x, u)` of a
//! continuous model `ẋ = g(x, u)`, except [`ModelKind::Linear`], which is
//! already discrete.
//!
//! Planar quadrotor, state `[p_x, p_y, θ, v_x, v_y, ω]`, control
//! `[thrust_left, thrust_right]`, gravity along `-y`:
//!
//! ```text
//! v̇_x = -(u₁ + u₂) sin θ / m
//! v̇_y =  (u₁ + u₂) cos θ / m - g
//! ω̇   =  l (u₂ - u₁) / I
//! ```

use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrotorParams<T> {
    /// kg
    pub mass: T,
    /// m, rotor distance from the center of mass
    pub arm_length: T,
    /// kg·m²
    pub inertia: T,
    /// m/s²
    pub gravity: T,
}

impl<T: Real> Default for QuadrotorParams<T> {
    fn default() -> Self {
        Self {
            mass: T::one(),
            arm_length: T::lit(0.2),
            inertia: T::lit(0.02),
            gravity: T::lit(9.81),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind<T> {
    /// `dim` independent point masses: state `[p; v]`, control = acceleration.
    DoubleIntegrator { dim: usize },
    PlanarQuadrotor(QuadrotorParams<T>),
    /// Time-invariant discrete model `x' = A x + B u` (row-major `A`, `B`).
    Linear {
        n_x: usize,
        n_u: usize,
        a: Vec<T>,
        b: Vec<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynModel<T> {
    kind: ModelKind<T>,
    dt: T,
}

impl<T: Real> DynModel<T> {
    pub fn double_integrator(dim: usize, dt: T) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("double integrator needs dim >= 1".into()));
        }
        Self::with_dt(ModelKind::DoubleIntegrator { dim }, dt)
    }

    pub fn planar_quadrotor(params: QuadrotorParams<T>, dt: T) -> Result<Self> {
        let positive = |v: T| v > T::zero() && v.is_finite();
        if !positive(params.mass) || !positive(params.arm_length) || !positive(params.inertia) {
            return Err(Error::Config(
                "quadrotor mass, arm length and inertia must be positive".into(),
            ));
        }
        if !params.gravity.is_finite() {
            return Err(Error::NonFinite("gravity"));
        }
        Self::with_dt(ModelKind::PlanarQuadrotor(params), dt)
    }

    /// Discrete linear model; `dt` is kept for bookkeeping only.
    pub fn linear(n_x: usize, n_u: usize, a: Vec<T>, b: Vec<T>, dt: T) -> Result<Self> {
        Error::check_len("linear model A", n_x * n_x, a.len())?;
        Error::check_len("linear model B", n_x * n_u, b.len())?;
        if n_x == 0 || n_u == 0 {
            return Err(Error::Config("linear model needs n_x, n_u >= 1".into()));
        }
        Self::with_dt(ModelKind::Linear { n_x, n_u, a, b }, dt)
    }

    fn with_dt(kind: ModelKind<T>, dt: T) -> Result<Self> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { kind, dt })
    }

    pub fn kind(&self) -> &ModelKind<T> {
        &self.kind
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn n_x(&self) -> usize {
        match &self.kind {
            ModelKind::DoubleIntegrator { dim } => 2 * dim,
            ModelKind::PlanarQuadrotor(_) => 6,
            ModelKind::Linear { n_x, .. } => *n_x,
        }
    }

    pub fn n_u(&self) -> usize {
        match &self.kind {
            ModelKind::DoubleIntegrator { dim } => *dim,
            ModelKind::PlanarQuadrotor(_) => 2,
            ModelKind::Linear { n_u, .. } => *n_u,
        }
    }

    /// Per-rotor thrust that holds the quadrotor at rest, `m g / 2`.
    pub fn hover_thrust(&self) -> Option<T> {
        match &self.kind {
            ModelKind::PlanarQuadrotor(p) => Some(p.mass * p.gravity * T::lit(0.5)),
            _ => None,
        }
    }

    fn check(&self, x: &[T], u: &[T]) -> Result<()> {
        Error::check_len("state", self.n_x(), x.len())?;
        Error::check_len("control", self.n_u(), u.len())?;
        if !x.iter().chain(u).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dynamics input"));
        }
        Ok(())
    }

    /// `x_{t+1} = f(x_t, u_t)`.
    pub fn step(&self, x: &[T], u: &[T]) -> Result<Vec<T>> {
        self.check(x, u)?;
        let mut out = vec![T::zero(); self.n_x()];
        self.step_into(x, u, &mut out);
        Ok(out)
    }

    /// Unchecked transition used by the solver kernels.
    pub fn step_into(&self, x: &[T], u: &[T], out: &mut [T]) {
        let dt = self.dt;
        match &self.kind {
            ModelKind::DoubleIntegrator { dim } => {
                let d = *dim;
                for i in 0..d {
                    out[i] = x[i] + dt * x[d + i];
                    out[d + i] = x[d + i] + dt * u[i];
                }
            }
            ModelKind::PlanarQuadrotor(p) => {
                let (sin, cos) = x[2].sin_cos();
                let thrust = u[0] + u[1];
                out[0] = x[0] + dt * x[3];
                out[1] = x[1] + dt * x[4];
                out[2] = x[2] + dt * x[5];
                out[3] = x[3] + dt * (-thrust * sin / p.mass);
                out[4] = x[4] + dt * (thrust * cos / p.mass - p.gravity);
                out[5] = x[5] + dt * (p.arm_length * (u[1] - u[0]) / p.inertia);
            }
            ModelKind::Linear { n_x, n_u, a, b } => {
                for i in 0..*n_x {
                    let mut acc = T::zero();
                    for j in 0..*n_x {
                        acc = acc + a[i * n_x + j] * x[j];
                    }
                    for j in 0..*n_u {
                        acc = acc + b[i * n_u + j] * u[j];
                    }
                    out[i] = acc;
                }
            }
        }
    }

    /// Closed-form `(A, B) = (∂f/∂x, ∂f/∂u)` as row-major buffers.
    pub fn jacobians(&self, x: &[T], u: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        self.check(x, u)?;
        let (nx, nu) = (self.n_x(), self.n_u());
        let mut a = vec![T::zero(); nx * nx];
        let mut b = vec![T::zero(); nx * nu];
        self.jacobians_into(x, u, &mut a, &mut b);
        Ok((a, b))
    }

    /// Unchecked Jacobians; `a` and `b` are fully overwritten.
    pub fn jacobians_into(&self, x: &[T], u: &[T], a: &mut [T], b: &mut [T]) {
        let dt = self.dt;
        a.iter_mut().for_each(|v| *v = T::zero());
        b.iter_mut().for_each(|v| *v = T::zero());
        match &self.kind {
            ModelKind::DoubleIntegrator { dim } => {
                let d = *dim;
                let n = 2 * d;
                for i in 0..n {
                    a[i * n + i] = T::one();
                }
                for i in 0..d {
                    a[i * n + d + i] = dt;
                    b[(d + i) * d + i] = dt;
                }
            }
            ModelKind::PlanarQuadrotor(p) => {
                let (sin, cos) = x[2].sin_cos();
                let thrust = u[0] + u[1];
                for i in 0..6 {
                    a[i * 6 + i] = T::one();
                }
                a[3] = dt; // p_x <- v_x
                a[6 + 4] = dt; // p_y <- v_y
                a[2 * 6 + 5] = dt; // θ <- ω
                a[3 * 6 + 2] = -dt * thrust * cos / p.mass;
                a[4 * 6 + 2] = -dt * thrust * sin / p.mass;
                let bx = -dt * sin / p.mass;
                let by = dt * cos / p.mass;
                let bw = dt * p.arm_length / p.inertia;
                b[3 * 2] = bx;
                b[3 * 2 + 1] = bx;
                b[4 * 2] = by;
                b[4 * 2 + 1] = by;
                b[5 * 2] = -bw;
                b[5 * 2 + 1] = bw;
            }
            ModelKind::Linear { a: am, b: bm, .. } => {
                a.copy_from_slice(am);
                b.copy_from_slice(bm);
            }
        }
    }
}

/// Per-timestep linear models `(A_t, B_t)`, row-major and contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization<T> {
    n_x: usize,
    n_u: usize,
    horizon: usize,
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Real> Linearization<T> {
    pub fn zeros(n_x: usize, n_u: usize, horizon: usize) -> Self {
        Self {
            n_x,
            n_u,
            horizon,
            a: vec![T::zero(); horizon * n_x * n_x],
            b: vec![T::zero(); horizon * n_x * n_u],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn a(&self, t: usize) -> &[T] {
        let s = self.n_x * self.n_x;
        &self.a[t * s..(t + 1) * s]
    }

    pub fn b(&self, t: usize) -> &[T] {
        let s = self.n_x * self.n_u;
        &self.b[t * s..(t + 1) * s]
    }

    pub fn stage_mut(&mut self, t: usize) -> (&mut [T], &mut [T]) {
        let sa = self.n_x * self.n_x;
        let sb = self.n_x * self.n_u;
        (
            &mut self.a[t * sa..(t + 1) * sa],
            &mut self.b[t * sb..(t + 1) * sb],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> DynModel<f64> {
        DynModel::planar_quadrotor(QuadrotorParams::default(), 0.05).unwrap()
    }

    #[test]
    fn double_integrator_steps() {
        let m = DynModel::<f64>::double_integrator(1, 0.1).unwrap();
        assert_eq!(m.step(&[0.0, 0.0], &[0.0]).unwrap(), vec![0.0, 0.0]);
        let x = m.step(&[1.0, 2.0], &[3.0]).unwrap();
        assert!((x[0] - 1.2).abs() < 1e-15 && (x[1] - 2.3).abs() < 1e-15);
        let (a, b) = m.jacobians(&[5.0, -1.0], &[2.0]).unwrap();
        assert_eq!(a, vec![1.0, 0.1, 0.0, 1.0]);
        assert_eq!(b, vec![0.0, 0.1]);
    }

    #[test]
    fn hover_is_fixed_point() {
        let m = quad();
        let h = m.hover_thrust().unwrap();
        let x = [1.5, 2.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(m.step(&x, &[h, h]).unwrap(), x.to_vec());
    }

    #[test]
    fn tilt_sensitivity_at_level_attitude() {
        let m = quad();
        let u = [3.0, 4.0];
        let (a, _) = m.jacobians(&[0.0; 6], &u).unwrap();
        assert_eq!(a[3 * 6 + 2], -0.05 * 7.0 / 1.0);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let m = quad();
        assert!(matches!(m.step(&[0.0; 5], &[0.0; 2]), Err(Error::Dimension { .. })));
        assert!(matches!(m.step(&[0.0; 6], &[0.0; 3]), Err(Error::Dimension { .. })));
        let mut x = [0.0; 6];
        x[3] = f64::NAN;
        assert_eq!(m.step(&x, &[0.0; 2]), Err(Error::NonFinite("dynamics input")));
        assert!(DynModel::double_integrator(1, 0.0f64).is_err());
        assert!(DynModel::planar_quadrotor(
            QuadrotorParams { mass: -1.0, ..Default::default() },
            0.1
        )
        .is_err());
    }
}
