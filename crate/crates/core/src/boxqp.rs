//! Projected-Newton solver for `min ½ uᵀHu + gᵀu  s.t.  lo ≤ u ≤ hi`.
//!
//! Each iteration fixes the clamped set (bound-active coordinates whose
//! gradient points out of the box), takes a Newton step on the free
//! coordinates and backtracks along the projected arc with an Armijo test.

use crate::linalg::{cholesky, cholesky_solve};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxQpSettings<T> {
    pub max_iter: usize,
    /// Stop once the free-subspace gradient norm drops below this.
    pub tol: T,
    pub min_rel_improve: T,
    pub armijo: T,
    pub step_decrease: T,
    pub min_step: T,
}

impl<T: Real> Default for BoxQpSettings<T> {
    fn default() -> Self {
        Self {
            max_iter: 20,
            tol: T::lit(1e-9),
            min_rel_improve: T::lit(1e-8),
            armijo: T::lit(0.1),
            step_decrease: T::lit(0.6),
            min_step: T::lit(1e-22),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpSolution<T> {
    pub u: Vec<T>,
    /// `true` for coordinates not held at a bound.
    pub free: Vec<bool>,
    pub iterations: usize,
}

/// Scratch buffers reused across calls by the iLQR kernels.
#[derive(Debug, Clone)]
pub(crate) struct BoxQpWork<T> {
    pub(crate) x: Vec<T>,
    pub(crate) free: Vec<bool>,
    grad: Vec<T>,
    search: Vec<T>,
    trial: Vec<T>,
    hx: Vec<T>,
    factor: Vec<T>,
    rhs: Vec<T>,
    idx: Vec<usize>,
}

impl<T: Real> BoxQpWork<T> {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            x: vec![T::zero(); n],
            free: vec![true; n],
            grad: vec![T::zero(); n],
            search: vec![T::zero(); n],
            trial: vec![T::zero(); n],
            hx: vec![T::zero(); n],
            factor: vec![T::zero(); n * n],
            rhs: vec![T::zero(); n],
            idx: Vec::with_capacity(n),
        }
    }
}

pub fn boxqp<T: Real>(
    h: &[T],
    g: &[T],
    lo: &[T],
    hi: &[T],
    u0: &[T],
    settings: &BoxQpSettings<T>,
) -> Result<BoxQpSolution<T>> {
    let n = g.len();
    Error::check_len("boxqp H", n * n, h.len())?;
    Error::check_len("boxqp lower bound", n, lo.len())?;
    Error::check_len("boxqp upper bound", n, hi.len())?;
    Error::check_len("boxqp warm start", n, u0.len())?;
    if lo.iter().zip(hi).any(|(l, u)| !(l < u)) {
        return Err(Error::Config("boxqp requires lo < hi".into()));
    }
    let mut work = BoxQpWork::new(n);
    let iterations = solve_into(h, g, lo, hi, u0, settings, &mut work)?;
    Ok(BoxQpSolution {
        u: work.x,
        free: work.free,
        iterations,
    })
}

fn objective<T: Real>(h: &[T], g: &[T], x: &[T], hx: &mut [T]) -> T {
    let n = x.len();
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for i in 0..n {
        let mut row = T::zero();
        for j in 0..n {
            row = row + h[i * n + j] * x[j];
        }
        hx[i] = row;
        acc = acc + x[i] * (half * row + g[i]);
    }
    acc
}

#[inline]
fn clamp<T: Real>(v: T, lo: T, hi: T) -> T {
    v.max(lo).min(hi)
}

/// Core loop; result left in `work.x` / `work.free`. Returns iteration count.
pub(crate) fn solve_into<T: Real>(
    h: &[T],
    g: &[T],
    lo: &[T],
    hi: &[T],
    u0: &[T],
    s: &BoxQpSettings<T>,
    w: &mut BoxQpWork<T>,
) -> Result<usize> {
    let n = g.len();
    for i in 0..n {
        w.x[i] = clamp(u0[i], lo[i], hi[i]);
        w.free[i] = true;
    }
    if n == 0 {
        return Ok(0);
    }
    let mut value = objective(h, g, &w.x, &mut w.hx);
    let mut old_value = value;
    let mut iterations = 0;

    for iter in 0..s.max_iter {
        iterations = iter + 1;
        if iter > 0 && (old_value - value) < s.min_rel_improve * old_value.abs() {
            break;
        }
        old_value = value;

        for i in 0..n {
            w.grad[i] = g[i] + w.hx[i];
        }
        let mut n_free = 0;
        for i in 0..n {
            let clamped = (w.x[i] == lo[i] && w.grad[i] > T::zero())
                || (w.x[i] == hi[i] && w.grad[i] < T::zero());
            w.free[i] = !clamped;
            if !clamped {
                n_free += 1;
            }
        }
        if n_free == 0 {
            break;
        }

        w.idx.clear();
        w.idx.extend((0..n).filter(|&i| w.free[i]));
        let mut gnorm = T::zero();
        for &i in &w.idx {
            gnorm = gnorm + w.grad[i] * w.grad[i];
        }
        if gnorm.sqrt() < s.tol {
            break;
        }

        let m = w.idx.len();
        for (a, &i) in w.idx.iter().enumerate() {
            for (b, &j) in w.idx.iter().enumerate() {
                w.factor[a * m + b] = h[i * n + j];
            }
            w.rhs[a] = w.grad[i];
        }
        if !cholesky(&mut w.factor[..m * m], m) {
            return Err(Error::NotPositiveDefinite { stage: None });
        }
        cholesky_solve(&w.factor[..m * m], m, &mut w.rhs[..m]);
        w.search.iter_mut().for_each(|v| *v = T::zero());
        for (a, &i) in w.idx.iter().enumerate() {
            w.search[i] = -w.rhs[a];
        }

        let mut sdotg = T::zero();
        for i in 0..n {
            sdotg = sdotg + w.search[i] * w.grad[i];
        }
        if !(sdotg < T::zero()) {
            break;
        }

        let mut step = T::one();
        let mut accepted = false;
        while step >= s.min_step {
            for i in 0..n {
                w.trial[i] = clamp(w.x[i] + step * w.search[i], lo[i], hi[i]);
            }
            let trial_value = objective(h, g, &w.trial, &mut w.rhs);
            if (trial_value - value) / (step * sdotg) >= s.armijo {
                value = trial_value;
                w.x.copy_from_slice(&w.trial);
                w.hx.copy_from_slice(&w.rhs);
                accepted = true;
                break;
            }
            step = step * s.step_decrease;
        }
        if !accepted {
            break;
        }
    }
    Ok(iterations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_minimum_is_free() {
        let s = BoxQpSettings::default();
        let r = boxqp(&[1.0], &[-0.5], &[-1.0], &[1.0], &[0.0], &s).unwrap();
        assert!((r.u[0] - 0.5f64).abs() < 1e-12);
        assert_eq!(r.free, vec![true]);
    }

    #[test]
    fn bound_active_minimum_is_clamped() {
        let s = BoxQpSettings::default();
        let r = boxqp(&[1.0], &[-5.0], &[-1.0], &[1.0], &[0.0], &s).unwrap();
        assert_eq!(r.u, vec![1.0f64]);
        assert_eq!(r.free, vec![false]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = BoxQpSettings::default();
        assert!(boxqp(&[1.0], &[0.0], &[1.0], &[1.0], &[0.0], &s).is_err());
        assert!(boxqp(&[1.0, 0.0], &[0.0], &[0.0], &[1.0], &[0.0], &s).is_err());
        let indefinite = boxqp(&[-1.0], &[0.1], &[-1.0], &[1.0], &[0.0], &s);
        assert_eq!(indefinite, Err(Error::NotPositiveDefinite { stage: None }));
    }

    #[test]
    fn infinite_bounds_give_newton_solution() {
        let s = BoxQpSettings::default();
        let h = [2.0, 0.5, 0.5, 1.0];
        let g = [1.0, -1.0];
        let inf = f64::INFINITY;
        let r = boxqp(&h, &g, &[-inf, -inf], &[inf, inf], &[0.0, 0.0], &s).unwrap();
        // H u = -g
        let det = 2.0 - 0.25;
        let expect = [(-1.0 * 1.0 - 0.5 * 1.0) / det, (2.0 * 1.0 + 0.5 * 1.0) / det];
        assert!((r.u[0] - expect[0]).abs() < 1e-12 && (r.u[1] - expect[1]).abs() < 1e-12);
    }
}
