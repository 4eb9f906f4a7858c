//! Built-in planar-quadrotor hover-regulation problems, used by the latency
//! probe and the command-line `solve`/`bench` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batchexec::BatchProblem;
use crate::dynamics::{DynModel, ModelKind, QuadrotorParams};
use crate::ilqr::SolveSettings;
use crate::qcost::StageCostParams;
use crate::{Error, Real, Result};

pub const HOVER_DT: f64 = 0.05;
/// Diagonal state weights for `[p_x, p_y, θ, v_x, v_y, ω]`.
pub const HOVER_STATE_WEIGHTS: [f64; 6] = [10.0, 10.0, 2.0, 1.0, 1.0, 0.5];
pub const HOVER_CONTROL_WEIGHT: f64 = 0.1;
/// Half-widths of the uniform initial-state perturbation around hover.
pub const HOVER_PERTURBATION: [f64; 6] = [1.0, 1.0, 0.3, 0.5, 0.5, 0.5];

pub fn hover_model<T: Real>() -> Result<DynModel<T>> {
    DynModel::planar_quadrotor(QuadrotorParams::default(), T::lit(HOVER_DT))
}

/// Per-rotor thrust limits `[0, m g]`.
pub fn thrust_bounds<T: Real>(model: &DynModel<T>) -> Result<(Vec<T>, Vec<T>)> {
    match model.kind() {
        ModelKind::PlanarQuadrotor(p) => {
            let max = p.mass * p.gravity;
            Ok((vec![T::zero(); 2], vec![max; 2]))
        }
        _ => Err(Error::Config("thrust bounds need a planar quadrotor".into())),
    }
}

/// Hover control `[m g / 2, m g / 2]`; empty for other models.
pub fn hover_target<T: Real>(model: &DynModel<T>) -> Vec<T> {
    model
        .hover_thrust()
        .map(|h| vec![h; model.n_u()])
        .unwrap_or_default()
}

/// `½ (x - x_ref)ᵀ Q (x - x_ref) + ½ (u - u_h)ᵀ R (u - u_h)` with the constant
/// term dropped, repeated over the horizon.
pub fn tracking_cost<T: Real>(
    q: &[T],
    r: &[T],
    x_ref: &[T],
    u_ref: &[T],
    horizon: usize,
) -> Result<StageCostParams<T>> {
    Error::check_len("state reference", q.len(), x_ref.len())?;
    Error::check_len("control reference", r.len(), u_ref.len())?;
    let mut diag = Vec::with_capacity(horizon * (q.len() + r.len()));
    let mut lin = Vec::with_capacity(diag.capacity());
    for _ in 0..horizon {
        diag.extend_from_slice(q);
        diag.extend_from_slice(r);
        lin.extend(q.iter().zip(x_ref).map(|(w, x)| -*w * *x));
        lin.extend(r.iter().zip(u_ref).map(|(w, u)| -*w * *u));
    }
    StageCostParams::diagonal(q.len(), r.len(), &diag, &lin)
}

pub fn hover_cost<T: Real>(model: &DynModel<T>, horizon: usize) -> Result<StageCostParams<T>> {
    let q: Vec<T> = HOVER_STATE_WEIGHTS.iter().map(|&w| T::lit(w)).collect();
    let r = vec![T::lit(HOVER_CONTROL_WEIGHT); 2];
    tracking_cost(&q, &r, &[T::zero(); 6], &hover_target(model), horizon)
}

/// `b` hover-regulation instances with initial states drawn uniformly around
/// hover at the origin and hover-thrust warm starts.
pub fn hover_batch<T: Real>(
    b: usize,
    horizon: usize,
    max_iter: usize,
    seed: u64,
) -> Result<BatchProblem<T>> {
    let model = hover_model::<T>()?;
    let (lo, hi) = thrust_bounds(&model)?;
    let settings = SolveSettings::new(horizon, max_iter, lo, hi)?;
    let params = hover_cost(&model, horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_init = (0..b)
        .map(|_| {
            HOVER_PERTURBATION
                .iter()
                .map(|&s| T::lit(rng.random_range(-s..=s)))
                .collect()
        })
        .collect();
    let warm: Vec<T> = hover_target(&model).repeat(horizon);
    Ok(BatchProblem {
        x_init,
        params: vec![params; b],
        u_warm: vec![warm; b],
        settings,
        model,
    })
}
