use fusedmpc::{boxqp, BoxQpSettings, DynModel, QuadrotorParams};
use fusedmpc_testkit as tk;
use proptest::prelude::*;
use rand::Rng;

fn random_box(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let h = tk::random_spd(rng, n, 0.1);
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..-0.1)).collect();
    let hi: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.5)).collect();
    (h, g, lo, hi)
}

#[test]
fn boxqp_matches_active_set_enumeration() {
    let mut rng = tk::rng(21);
    let s = BoxQpSettings::default();
    for case in 0..300 {
        let n = 2 + case % 3;
        let (h, g, lo, hi) = random_box(&mut rng, n);
        let u0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = boxqp(&h, &g, &lo, &hi, &u0, &s).unwrap();
        let (want, _) = tk::boxqp_enumerate(&h, &g, &lo, &hi);
        assert!(tk::max_abs_err(&got.u, &want) <= 1e-8, "case {case}: {:?} vs {want:?}", got.u);
        for i in 0..n {
            assert!(got.u[i] >= lo[i] && got.u[i] <= hi[i]);
        }
    }
}

#[test]
fn free_mask_marks_bound_active_coordinates() {
    let s = BoxQpSettings::default();
    let h: [f64; 4] = [1.0, 0.0, 0.0, 1.0];
    let r = boxqp::<f64>(&h, &[-5.0, 0.2], &[-1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], &s).unwrap();
    assert_eq!(r.u[0], 1.0);
    assert!((r.u[1] + 0.2).abs() < 1e-12);
    assert_eq!(r.free, vec![false, true]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn boxqp_solution_is_feasible_and_not_worse_than_start(seed in 0u64..10_000, n in 1usize..5) {
        let mut rng = tk::rng(seed);
        let (h, g, lo, hi) = random_box(&mut rng, n);
        let u0: Vec<f64> = lo.iter().zip(&hi).map(|(l, u)| 0.5 * (l + u)).collect();
        let r = boxqp(&h, &g, &lo, &hi, &u0, &BoxQpSettings::default()).unwrap();
        let value = |u: &[f64]| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += 0.5 * u[i] * h[i * n + j] * u[j];
                }
                acc += g[i] * u[i];
            }
            acc
        };
        for i in 0..n {
            prop_assert!(r.u[i] >= lo[i] && r.u[i] <= hi[i]);
        }
        prop_assert!(value(&r.u) <= value(&u0) + 1e-12);
    }
}

fn fd_jacobians(m: &DynModel<f64>, x: &[f64], u: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = (m.n_x(), m.n_u());
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n * k];
    for j in 0..n {
        let f = |xj: &[f64]| {
            let mut xp = x.to_vec();
            xp[j] = xj[0];
            m.step(&xp, u).unwrap()
        };
        let up = f(&[x[j] + h]);
        let down = f(&[x[j] - h]);
        for i in 0..n {
            a[i * n + j] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    for j in 0..k {
        let mut up_u = u.to_vec();
        let mut down_u = u.to_vec();
        up_u[j] += h;
        down_u[j] -= h;
        let up = m.step(x, &up_u).unwrap();
        let down = m.step(x, &down_u).unwrap();
        for i in 0..n {
            b[i * k + j] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    (a, b)
}

#[test]
fn analytic_jacobians_match_finite_differences() {
    let mut rng = tk::rng(31);
    let models = [
        DynModel::planar_quadrotor(QuadrotorParams::default(), 0.05).unwrap(),
        DynModel::planar_quadrotor(
            QuadrotorParams { mass: 0.7, arm_length: 0.15, inertia: 0.01, gravity: 9.81 },
            0.02,
        )
        .unwrap(),
        DynModel::double_integrator(3, 0.1).unwrap(),
    ];
    for model in &models {
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let x: Vec<f64> = (0..model.n_x()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let u: Vec<f64> = (0..model.n_u()).map(|_| rng.random_range(0.0..10.0)).collect();
            let (a, b) = model.jacobians(&x, &u).unwrap();
            let (fa, fb) = fd_jacobians(model, &x, &u, 1e-6);
            worst = worst.max(tk::max_abs_err(&a, &fa)).max(tk::max_abs_err(&b, &fb));
        }
        assert!(worst <= 1e-5, "{:?}: {worst:e}", model.kind());
    }
}

#[test]
fn step_is_deterministic() {
    let m = DynModel::planar_quadrotor(QuadrotorParams::default(), 0.05).unwrap();
    let x = [0.3, -1.0, 0.7, 2.0, -0.5, 1.1];
    let u = [4.2, 5.9];
    assert!(tk::same_bits(&m.step(&x, &u).unwrap(), &m.step(&x, &u).unwrap()));
}
