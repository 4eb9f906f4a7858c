use fusedmpc::ilqr::{self, backward_pass, forward_linesearch, linearize, rollout};
use fusedmpc::{boxqp, BoxQpSettings, DynModel, SolveSettings, StageCostParams};
use fusedmpc_testkit::{self as tk, nalgebra::DVector};
use rand::Rng;

#[test]
fn riccati_and_kkt_oracles_agree() {
    let mut rng = tk::rng(11);
    for horizon in [1, 4, 12] {
        let case = tk::random_double_integrator_lq(&mut rng, 2, horizon);
        let r = tk::riccati(&case.lq);
        let (_, u, cost) = tk::kkt(&case.lq);
        assert!((r.cost - cost).abs() <= 1e-9 * cost.abs().max(1.0));
        assert!((&r.controls[0] - &u[0]).amax() < 1e-9);
    }
}

#[test]
fn one_iteration_reproduces_riccati_on_lq_problems() {
    let mut rng = tk::rng(1);
    for (i, horizon) in [2, 10, 50].into_iter().cycle().take(24).enumerate() {
        let dim = 1 + i % 3;
        let case = tk::random_double_integrator_lq(&mut rng, dim, horizon);
        let m = case.model.n_u();
        let settings = tk::unbounded_settings(horizon, 1, m);
        let warm: Vec<f64> = (0..horizon * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let res = ilqr::solve(&case.model, &case.x0, &case.params, &warm, &settings).unwrap();
        let oracle = tk::riccati(&case.lq);
        let rel = (res.cost - oracle.cost).abs() / oracle.cost.abs().max(1.0);
        assert!(rel <= 1e-8, "T={horizon} dim={dim} rel={rel:e}");
        let u0 = DVector::from_row_slice(res.first_control());
        assert!((&u0 - &oracle.controls[0]).amax() <= 1e-8);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.alpha_history, vec![1.0]);
    }
}

#[test]
fn backward_gains_match_riccati_feedback() {
    let mut rng = tk::rng(2);
    let case = tk::random_double_integrator_lq(&mut rng, 3, 8);
    let (n, m) = (case.model.n_x(), case.model.n_u());
    let settings = tk::unbounded_settings(8, 1, m);
    let nominal = rollout(&case.model, &case.x0, &vec![0.0; 8 * m]).unwrap();
    let lin = linearize(&case.model, &nominal).unwrap();
    let gains = backward_pass(&lin, &case.params, &nominal, &settings).unwrap();
    let oracle = tk::riccati(&case.lq);
    for t in 0..8 {
        let k = tk::mat(m, n, gains.feedback(t));
        assert!((&k - &oracle.feedback[t]).amax() < 1e-8, "t={t}");
        // nominal controls are zero: k_t = κ_t + K_t X_nom[t]
        let x_nom = DVector::from_row_slice(nominal.state(t));
        let expect = &oracle.offset[t] + &oracle.feedback[t] * x_nom;
        let got = DVector::from_row_slice(gains.feedforward(t));
        assert!((&got - &expect).amax() < 1e-8, "t={t}");
    }
    let (best, cost, alpha) = forward_linesearch(&case.model, &case.params, &nominal, &gains, &settings).unwrap();
    assert_eq!(alpha, 1.0);
    assert!((cost - oracle.cost).abs() <= 1e-8 * oracle.cost.abs().max(1.0));
    assert_eq!(case.params.total_cost(&best).unwrap(), cost);
}

#[test]
fn single_stage_reduces_to_boxqp() {
    let mut rng = tk::rng(3);
    for _ in 0..20 {
        let model = DynModel::double_integrator(2, 0.1).unwrap();
        let nz = 6;
        let hess = tk::random_spd(&mut rng, nz, 0.3);
        let grad: Vec<f64> = (0..nz).map(|_| rng.random_range(-3.0..3.0)).collect();
        let params = StageCostParams::new(4, 2, hess.clone(), grad.clone()).unwrap();
        let settings = SolveSettings::new(1, 1, vec![-0.5; 2], vec![0.5; 2]).unwrap();
        let x0: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let nominal = rollout(&model, &x0, &[0.0, 0.0]).unwrap();
        let lin = linearize(&model, &nominal).unwrap();
        let gains = backward_pass(&lin, &params, &nominal, &settings).unwrap();
        // With V_1 = 0: Q_uu = C_uu, Q_u = C_ux x0 + c_u.
        let quu = [hess[4 * 6 + 4], hess[4 * 6 + 5], hess[5 * 6 + 4], hess[5 * 6 + 5]];
        let qu: Vec<f64> = (0..2)
            .map(|i| (0..4).map(|j| hess[(4 + i) * 6 + j] * x0[j]).sum::<f64>() + grad[4 + i])
            .collect();
        let direct = boxqp(&quu, &qu, &[-0.5; 2], &[0.5; 2], &[0.0; 2], &BoxQpSettings::default()).unwrap();
        assert!(tk::max_abs_err(gains.feedforward(0), &direct.u) < 1e-12);
        assert_eq!(gains.free(0), direct.free.as_slice());
        for i in 0..2 {
            if !direct.free[i] {
                assert!(gains.feedback(0)[i * 4..(i + 1) * 4].iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn solving_from_the_optimum_takes_no_step() {
    let mut rng = tk::rng(4);
    let case = tk::random_double_integrator_lq(&mut rng, 2, 10);
    let m = case.model.n_u();
    let settings = tk::unbounded_settings(10, 20, m);
    let first = ilqr::solve(&case.model, &case.x0, &case.params, &vec![0.0; 10 * m], &settings).unwrap();
    assert!(first.converged);
    let again = ilqr::solve(&case.model, &case.x0, &case.params, first.traj.controls(), &settings).unwrap();
    assert_eq!(again.iterations, 1);
    assert_eq!(again.alpha_history, vec![0.0]);
    assert!(again.converged);
    assert_eq!(again.traj, first.traj);
}

#[test]
fn rollout_and_linearize_examples() {
    let m = DynModel::double_integrator(1, 0.1).unwrap();
    let zeros = rollout(&m, &[0.0, 0.0], &[0.0; 4]).unwrap();
    assert!(zeros.states().iter().all(|&v| v == 0.0));
    let t = rollout(&m, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
    let expect = [0.0, 0.0, 0.0, 0.1, 0.01, 0.2];
    assert!(tk::max_abs_err(t.states(), &expect) < 1e-15);

    let lin = linearize(&m, &t).unwrap();
    for s in 0..2 {
        assert_eq!(lin.a(s), &[1.0, 0.1, 0.0, 1.0]);
        assert_eq!(lin.b(s), &[0.0, 0.1]);
    }
    let empty = rollout(&m, &[1.0, 2.0], &[]).unwrap();
    assert_eq!(linearize(&m, &empty).unwrap().horizon(), 0);
}

#[test]
fn rollout_is_feasible_and_linearization_pointwise() {
    let mut rng = tk::rng(5);
    let quad = fusedmpc::scenario::hover_model::<f64>().unwrap();
    let u: Vec<f64> = (0..40).map(|_| rng.random_range(3.0..6.0)).collect();
    let x0 = [0.1, -0.2, 0.05, 0.3, 0.0, -0.1];
    let traj = rollout(&quad, &x0, &u).unwrap();
    let lin = linearize(&quad, &traj).unwrap();
    for t in 0..20 {
        let next = quad.step(traj.state(t), traj.control(t)).unwrap();
        assert!(tk::same_bits(&next, traj.state(t + 1)));
        let (a, b) = quad.jacobians(traj.state(t), traj.control(t)).unwrap();
        assert!(tk::same_bits(&a, lin.a(t)) && tk::same_bits(&b, lin.b(t)));
    }
}

#[test]
fn zero_gains_keep_the_nominal() {
    let m = DynModel::double_integrator(1, 0.1).unwrap();
    let params = StageCostParams::diagonal(2, 1, &[1.0; 9], &[0.0; 9]).unwrap();
    let settings = SolveSettings::new(3, 1, vec![-1.0], vec![1.0]).unwrap();
    let nominal = rollout(&m, &[1.0, 0.0], &[0.2, 0.2, 0.2]).unwrap();
    let gains = fusedmpc::Gains::zeros(2, 1, 3);
    let (t, _, alpha) = forward_linesearch(&m, &params, &nominal, &gains, &settings).unwrap();
    assert_eq!(alpha, 0.0);
    assert_eq!(t, nominal);
}

#[test]
fn saturated_controls_stay_put() {
    let m = DynModel::double_integrator(1, 0.1).unwrap();
    let params = StageCostParams::diagonal(2, 1, &[1.0; 6], &[0.0, 0.0, 5.0, 0.0, 0.0, 5.0]).unwrap();
    let settings = SolveSettings::new(2, 1, vec![-1.0], vec![1.0]).unwrap();
    let nominal = rollout(&m, &[0.0, 0.0], &[-1.0, -1.0]).unwrap();
    let mut gains = fusedmpc::Gains::zeros(2, 1, 2);
    gains.feedforward_mut(0)[0] = -3.0;
    gains.feedforward_mut(1)[0] = -3.0;
    let (t, _, _) = forward_linesearch(&m, &params, &nominal, &gains, &settings).unwrap();
    assert_eq!(t.controls(), nominal.controls());
}

#[test]
fn divergent_rollout_is_reported() {
    let m = DynModel::linear(1, 1, vec![1e300], vec![1.0], 0.1).unwrap();
    let err = rollout(&m, &[1e10], &[0.0, 0.0]).unwrap_err();
    assert_eq!(err, fusedmpc::Error::Divergence { t: 0 });
}

#[test]
fn settings_are_validated() {
    assert!(SolveSettings::<f64>::new(3, 1, vec![1.0], vec![1.0]).is_err());
    let mut s = SolveSettings::<f64>::new(3, 1, vec![0.0], vec![1.0]).unwrap();
    s.alphas = vec![0.5, 1.0];
    assert!(s.validate().is_err());
    s.alphas = vec![];
    assert!(s.validate().is_err());
    s.alphas = vec![1.0, 0.0];
    assert!(s.validate().is_err());
}

#[test]
fn zero_horizon_and_zero_budget() {
    let m = DynModel::double_integrator(1, 0.1).unwrap();
    let empty = StageCostParams::diagonal(2, 1, &[], &[]).unwrap();
    let s0 = SolveSettings::new(0, 5, vec![-1.0], vec![1.0]).unwrap();
    let r = ilqr::solve(&m, &[1.0, 0.0], &empty, &[], &s0).unwrap();
    assert_eq!(r.cost, 0.0);
    assert!(r.converged);

    let p = StageCostParams::diagonal(2, 1, &[1.0; 6], &[0.0; 6]).unwrap();
    let s = SolveSettings::new(2, 0, vec![-1.0], vec![1.0]).unwrap();
    let r = ilqr::solve(&m, &[1.0, 0.0], &p, &[0.0, 0.0], &s).unwrap();
    assert_eq!(r.iterations, 0);
    assert!(!r.converged);
    assert_eq!(r.cost_history.len(), 1);
}
