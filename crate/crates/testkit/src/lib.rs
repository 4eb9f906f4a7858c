//! Reference oracles for the test suites. Everything here is written
//! independently of the solver code paths it checks: dense linear algebra goes
//! through nalgebra, and the algorithms are the textbook formulations.

use fusedmpc::{DynModel, SolveSettings, StageCostParams};
pub use nalgebra;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Random symmetric positive-definite matrix `MᵀM + shift·I`, row-major.
pub fn random_spd(rng: &mut impl Rng, n: usize, shift: f64) -> Vec<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let s = m.transpose() * &m + DMatrix::identity(n, n) * shift;
    row_major(&s)
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

/// A linear-quadratic problem in explicit matrix form.
#[derive(Debug, Clone)]
pub struct LqProblem {
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `C_t` blocks, `(n_x+n_u)²`.
    pub hess: Vec<DMatrix<f64>>,
    pub grad: Vec<DVector<f64>>,
    pub x0: DVector<f64>,
}

impl LqProblem {
    pub fn from_params(a: DMatrix<f64>, b: DMatrix<f64>, p: &StageCostParams<f64>, x0: &[f64]) -> Self {
        let n = p.dim();
        Self {
            n_x: p.n_x(),
            n_u: p.n_u(),
            horizon: p.horizon(),
            a,
            b,
            hess: (0..p.horizon()).map(|t| mat(n, n, p.hessian(t))).collect(),
            grad: (0..p.horizon()).map(|t| DVector::from_row_slice(p.gradient(t))).collect(),
            x0: DVector::from_row_slice(x0),
        }
    }

    pub fn stage_cost(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let z = DVector::from_iterator(self.n_x + self.n_u, x.iter().chain(u.iter()).copied());
        0.5 * z.dot(&(&self.hess[t] * &z)) + self.grad[t].dot(&z)
    }
}

/// Time-varying affine LQR by the textbook Riccati recursion:
/// `u_t = K_t x_t + κ_t`.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub feedback: Vec<DMatrix<f64>>,
    pub offset: Vec<DVector<f64>>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
}

pub fn riccati(p: &LqProblem) -> RiccatiSolution {
    let (n, m, h) = (p.n_x, p.n_u, p.horizon);
    let mut pmat = DMatrix::<f64>::zeros(n, n);
    let mut pvec = DVector::<f64>::zeros(n);
    let mut feedback = vec![DMatrix::zeros(m, n); h];
    let mut offset = vec![DVector::zeros(m); h];
    for t in (0..h).rev() {
        let c = &p.hess[t];
        let cxx = c.view((0, 0), (n, n));
        let cuu = c.view((n, n), (m, m));
        let cux = c.view((n, 0), (m, n));
        let cx = p.grad[t].rows(0, n);
        let cu = p.grad[t].rows(n, m);
        let qxx = cxx + p.a.transpose() * &pmat * &p.a;
        let quu = cuu + p.b.transpose() * &pmat * &p.b;
        let qux = cux + p.b.transpose() * &pmat * &p.a;
        let qx = cx + p.a.transpose() * &pvec;
        let qu = cu + p.b.transpose() * &pvec;
        let inv = quu.clone().try_inverse().expect("Q_uu invertible");
        let k = -&inv * &qux;
        let kappa = -&inv * &qu;
        pmat = &qxx + qux.transpose() * &k;
        pmat = 0.5 * (&pmat + pmat.transpose());
        pvec = &qx + qux.transpose() * &kappa;
        feedback[t] = k;
        offset[t] = kappa;
    }
    let mut x = p.x0.clone();
    let mut states = vec![x.clone()];
    let mut controls = Vec::with_capacity(h);
    let mut cost = 0.0;
    for t in 0..h {
        let u = &feedback[t] * &x + &offset[t];
        cost += p.stage_cost(t, &x, &u);
        x = &p.a * &x + &p.b * &u;
        states.push(x.clone());
        controls.push(u);
    }
    RiccatiSolution {
        feedback,
        offset,
        states,
        controls,
        cost,
    }
}

/// Dense KKT solve of the equality-constrained QP over all states and controls.
/// Returns `(states, controls, cost)`.
pub fn kkt(p: &LqProblem) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, f64) {
    let (n, m, h) = (p.n_x, p.n_u, p.horizon);
    let nx_all = (h + 1) * n;
    let nw = nx_all + h * m;
    let nc = (h + 1) * n;
    let xi = |t: usize, i: usize| t * n + i;
    let ui = |t: usize, i: usize| nx_all + t * m + i;
    let mut k = DMatrix::<f64>::zeros(nw + nc, nw + nc);
    let mut rhs = DVector::<f64>::zeros(nw + nc);
    for t in 0..h {
        let idx = |a: usize| if a < n { xi(t, a) } else { ui(t, a - n) };
        for a in 0..n + m {
            for b in 0..n + m {
                k[(idx(a), idx(b))] += p.hess[t][(a, b)];
            }
            rhs[idx(a)] -= p.grad[t][a];
        }
    }
    for i in 0..n {
        k[(nw + i, xi(0, i))] = 1.0;
        k[(xi(0, i), nw + i)] = 1.0;
        rhs[nw + i] = p.x0[i];
    }
    for t in 0..h {
        for i in 0..n {
            let row = nw + (t + 1) * n + i;
            let mut put = |col: usize, v: f64| {
                k[(row, col)] += v;
                k[(col, row)] += v;
            };
            put(xi(t + 1, i), 1.0);
            for j in 0..n {
                put(xi(t, j), -p.a[(i, j)]);
            }
            for j in 0..m {
                put(ui(t, j), -p.b[(i, j)]);
            }
        }
    }
    let sol = k.full_piv_lu().solve(&rhs).expect("KKT system solvable");
    let states: Vec<_> = (0..=h)
        .map(|t| DVector::from_fn(n, |i, _| sol[xi(t, i)]))
        .collect();
    let controls: Vec<_> = (0..h)
        .map(|t| DVector::from_fn(m, |i, _| sol[ui(t, i)]))
        .collect();
    let cost = (0..h).map(|t| p.stage_cost(t, &states[t], &controls[t])).sum();
    (states, controls, cost)
}

/// Random LQ instance on a double integrator with `dim ∈ 1..=3`: a random
/// positive-definite `C_t` per stage (with state-control coupling) and a
/// random linear term.
pub struct LqCase {
    pub model: DynModel<f64>,
    pub params: StageCostParams<f64>,
    pub x0: Vec<f64>,
    pub lq: LqProblem,
}

pub fn random_double_integrator_lq(rng: &mut impl Rng, dim: usize, horizon: usize) -> LqCase {
    let dt = rng.random_range(0.05..0.2);
    let model = DynModel::double_integrator(dim, dt).unwrap();
    let (n, m) = (model.n_x(), model.n_u());
    let nz = n + m;
    let mut hess = Vec::with_capacity(horizon * nz * nz);
    let mut grad = Vec::with_capacity(horizon * nz);
    for _ in 0..horizon {
        hess.extend(random_spd(rng, nz, 0.5));
        grad.extend((0..nz).map(|_| rng.random_range(-1.0..1.0)));
    }
    let params = StageCostParams::new(n, m, hess, grad).unwrap();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (a, b) = model.jacobians(&x0, &vec![0.0; m]).unwrap();
    let lq = LqProblem::from_params(mat(n, n, &a), mat(n, m, &b), &params, &x0);
    LqCase {
        model,
        params,
        x0,
        lq,
    }
}

pub fn unbounded_settings(horizon: usize, max_iter: usize, n_u: usize) -> SolveSettings<f64> {
    SolveSettings::unbounded(horizon, max_iter, n_u).unwrap()
}

/// Exhaustive active-set enumeration for `min ½uᵀHu + gᵀu, lo ≤ u ≤ hi`:
/// every coordinate is free, at `lo` or at `hi`; each pattern's equality
/// QP is solved and the best feasible point kept. Exact for PD `H`.
pub fn boxqp_enumerate(h: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> (Vec<f64>, f64) {
    let n = g.len();
    let hm = mat(n, n, h);
    let value = |u: &[f64]| {
        let v = DVector::from_row_slice(u);
        0.5 * v.dot(&(&hm * &v)) + DVector::from_row_slice(g).dot(&v)
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut pattern = vec![0u8; n];
        let mut c = code;
        for p in pattern.iter_mut() {
            *p = (c % 3) as u8;
            c /= 3;
        }
        let mut u = vec![0.0; n];
        let free: Vec<usize> = (0..n).filter(|&i| pattern[i] == 0).collect();
        for i in 0..n {
            match pattern[i] {
                1 => u[i] = lo[i],
                2 => u[i] = hi[i],
                _ => {}
            }
        }
        if !free.is_empty() {
            let f = free.len();
            let hff = DMatrix::from_fn(f, f, |a, b| hm[(free[a], free[b])]);
            let rhs = DVector::from_fn(f, |a, _| {
                let i = free[a];
                -(g[i] + (0..n).filter(|j| pattern[*j] != 0).map(|j| hm[(i, j)] * u[j]).sum::<f64>())
            });
            let Some(sol) = hff.cholesky().map(|c| c.solve(&rhs)) else {
                continue;
            };
            for (a, &i) in free.iter().enumerate() {
                u[i] = sol[a];
            }
        }
        let feasible = (0..n).all(|i| u[i] >= lo[i] - 1e-12 && u[i] <= hi[i] + 1e-12);
        if !feasible {
            continue;
        }
        let v = value(&u);
        if best.as_ref().map_or(true, |(_, bv)| v < *bv) {
            best = Some((u, v));
        }
    }
    best.expect("box is non-empty")
}

/// Central differences of `f` at `x` along every coordinate.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `true` when both slices have the same length and identical bit patterns.
pub fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Generalized advantage estimates by direct summation:
/// `A_t = Σ_{l≥0} (γλ)^l δ_{t+l}`, truncated at the first episode end.
pub fn gae_bruteforce(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let next_value = |t: usize| if t + 1 < n { values[t + 1] } else { last_value };
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let nonterminal = if dones[t] { 0.0 } else { 1.0 };
            rewards[t] + gamma * next_value(t) * nonterminal - values[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut weight = 1.0;
            for s in t..n {
                acc += weight * delta[s];
                if dones[s] {
                    break;
                }
                weight *= gamma * lambda;
            }
            acc
        })
        .collect()
}

/// Random linear instance with `n_x = 3`, `n_u = 2` and a full-coupling
/// cost, used for the implicit-gradient checks.
pub struct GradCase {
    pub model: DynModel<f64>,
    pub hess: Vec<f64>,
    pub grad: Vec<f64>,
    pub x0: Vec<f64>,
    pub u_ref: Vec<f64>,
    pub horizon: usize,
}

pub fn random_grad_case(rng: &mut impl Rng, horizon: usize) -> GradCase {
    let (n, m) = (3, 2);
    let nz = n + m;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.2..0.2);
        }
    }
    let b: Vec<f64> = (0..n * m).map(|_| rng.random_range(-0.5..0.5)).collect();
    let model = DynModel::linear(n, m, a, b, 0.1).unwrap();
    let mut hess = Vec::new();
    let mut grad = Vec::new();
    for _ in 0..horizon {
        hess.extend(random_spd(rng, nz, 0.5));
        grad.extend((0..nz).map(|_| rng.random_range(-1.0..1.0)));
    }
    GradCase {
        model,
        hess,
        grad,
        x0: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        u_ref: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        horizon,
    }
}
