use fusedmpc_rl::policy::{gaussian_log_prob, ActorHead};
use fusedmpc_rl::trainer::{ppo_gradients, ppo_update, Optimizer};
use fusedmpc_rl::{gae, Mlp, Policy, RolloutBuffer, TrainConfig};
use fusedmpc_testkit as tk;
use rand::Rng;

#[test]
fn gae_matches_bruteforce_summation() {
    let mut rng = tk::rng(7);
    for len in 1..=20 {
        for _ in 0..50 {
            let r: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d: Vec<bool> = (0..len).map(|_| rng.random_bool(0.2)).collect();
            let last = rng.random_range(-5.0..5.0);
            let (gamma, lambda) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
            let (adv, ret) = gae(&r, &v, &d, last, gamma, lambda).unwrap();
            let oracle = tk::gae_bruteforce(&r, &v, &d, last, gamma, lambda);
            assert!(tk::max_abs_err(&adv, &oracle) < 1e-12, "len {len}");
            for t in 0..len {
                assert!((ret[t] - adv[t] - v[t]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gae_exhaustive_done_patterns() {
    let mut rng = tk::rng(8);
    let len = 10;
    let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    for mask in 0u32..(1 << len) {
        let d: Vec<bool> = (0..len).map(|i| mask >> i & 1 == 1).collect();
        let (adv, _) = gae(&r, &v, &d, 0.7, 0.99, 0.95).unwrap();
        let oracle = tk::gae_bruteforce(&r, &v, &d, 0.7, 0.99, 0.95);
        assert!(tk::max_abs_err(&adv, &oracle) < 1e-12);
    }
}

#[test]
fn gae_lambda_one_is_discounted_return_minus_value() {
    let r = [1.0, 2.0, 3.0];
    let v = [0.5, -0.5, 0.25];
    let (adv, ret) = gae(&r, &v, &[false; 3], 4.0, 0.9, 1.0).unwrap();
    let g2 = 3.0 + 0.9 * 4.0;
    let g1 = 2.0 + 0.9 * g2;
    let g0 = 1.0 + 0.9 * g1;
    assert!(tk::max_abs_err(&ret, &[g0, g1, g2]) < 1e-12);
    assert!(tk::max_abs_err(&adv, &[g0 - 0.5, g1 + 0.5, g2 - 0.25]) < 1e-12);
    assert!(gae(&r, &v[..2], &[false; 3], 0.0, 0.9, 1.0).is_err());
}

#[test]
fn buffer_advantages_are_normalized_per_env_sequence() {
    let mut rng = tk::rng(9);
    let (steps, envs) = (6, 3);
    let mut buf = RolloutBuffer::<f64>::new(steps, envs, 1, 0, 1, 0);
    for _ in 0..steps * envs {
        buf.rewards.push(rng.random_range(-1.0..1.0));
        buf.values.push(rng.random_range(-1.0..1.0));
        buf.dones.push(rng.random_bool(0.3));
        buf.valid.push(true);
    }
    let last = [0.1, -0.2, 0.3];
    buf.compute_advantages(&last, 0.99, 0.95).unwrap();
    let mean: f64 = buf.advantages.iter().sum::<f64>() / 18.0;
    let var: f64 = buf.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 18.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);

    for e in 0..envs {
        let idx: Vec<usize> = (0..steps).map(|s| s * envs + e).collect();
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let d: Vec<bool> = idx.iter().map(|&i| buf.dones[i]).collect();
        let oracle = tk::gae_bruteforce(&pick(&buf.rewards), &pick(&buf.values), &d, last[e], 0.99, 0.95);
        let ret = pick(&buf.returns);
        let vals = pick(&buf.values);
        for k in 0..steps {
            assert!((ret[k] - vals[k] - oracle[k]).abs() < 1e-12);
        }
    }
}

/// One-input, one-output linear actor and critic (two parameters each).
fn tiny_policy(w: f64, b: f64, log_std: f64, wv: f64, bv: f64) -> Policy<f64> {
    Policy {
        actor: Mlp::from_params(&[1, 1], vec![w, b]).unwrap(),
        head: ActorHead::Direct {
            center: vec![0.5],
            half_range: vec![2.0],
        },
        log_std: vec![log_std],
        critic: Mlp::from_params(&[1, 1], vec![wv, bv]).unwrap(),
        u_min: vec![-100.0],
        u_max: vec![100.0],
    }
}

fn tiny_buffer(policy: &Policy<f64>, obs: &[f64], actions: &[f64], old_shift: &[f64], adv: &[f64], ret: &[f64]) -> RolloutBuffer<f64> {
    let n = obs.len();
    let mut buf = RolloutBuffer::new(n, 1, 1, 0, 1, 0);
    let means = policy.means(obs, n, None).unwrap();
    for i in 0..n {
        buf.observations.push(obs[i]);
        buf.actions.push(actions[i]);
        let lp = gaussian_log_prob(&actions[i..i + 1], means.mean(i), &policy.log_std);
        buf.log_probs.push(lp + old_shift[i]);
        buf.rewards.push(0.0);
        buf.values.push(0.0);
        buf.dones.push(false);
        buf.valid.push(true);
    }
    buf.advantages = adv.to_vec();
    buf.returns = ret.to_vec();
    buf
}

struct Hand {
    dw: f64,
    db: f64,
    dls: f64,
    dwv: f64,
    dbv: f64,
    policy_loss: f64,
}

/// Clipped-surrogate gradients unrolled by hand for the tiny linear policy.
fn hand_gradients(p: (f64, f64, f64, f64, f64), obs: &[f64], act: &[f64], old_lp: &[f64], adv: &[f64], ret: &[f64], cfg: &TrainConfig) -> Hand {
    let (w, b, ls, wv, bv) = p;
    let n = obs.len() as f64;
    let sigma = ls.exp();
    let mut h = Hand {
        dw: 0.0,
        db: 0.0,
        dls: -cfg.entropy_coef,
        dwv: 0.0,
        dbv: 0.0,
        policy_loss: 0.0,
    };
    for i in 0..obs.len() {
        let mu = 0.5 + 2.0 * (w * obs[i] + b);
        let z = (act[i] - mu) / sigma;
        let lp = -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let ratio = (lp - old_lp[i]).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip_range, 1.0 + cfg.clip_range);
        h.policy_loss -= (ratio * adv[i]).min(clipped * adv[i]) / n;
        let active = ratio * adv[i] <= clipped * adv[i];
        if active {
            let g = -adv[i] * ratio / n;
            let dmu = g * z / sigma;
            h.dw += dmu * 2.0 * obs[i];
            h.db += dmu * 2.0;
            h.dls += g * (z * z - 1.0);
        }
        let v = wv * obs[i] + bv;
        h.dwv += cfg.value_coef * 2.0 * (v - ret[i]) * obs[i] / n;
        h.dbv += cfg.value_coef * 2.0 * (v - ret[i]) / n;
    }
    h
}

#[test]
fn tiny_update_matches_hand_unrolled_gradients() {
    let p = (0.3, -0.1, 0.2f64.ln(), 0.7, 0.05);
    let policy = tiny_policy(p.0, p.1, p.2, p.3, p.4);
    let obs = [0.5, -1.0, 2.0];
    let act = [0.9, -1.2, 1.5];
    // Sample 2 sits outside the trust region with a positive advantage.
    let shift = [0.05, -0.6, 0.1];
    let adv = [1.0, 0.8, -0.5];
    let ret = [0.4, -0.3, 1.2];
    let cfg = TrainConfig {
        entropy_coef: 0.01,
        ..TrainConfig::default()
    };
    let buf = tiny_buffer(&policy, &obs, &act, &shift, &adv, &ret);
    let (g, stats) = ppo_gradients(&policy, &buf, &[0, 1, 2], &cfg, None).unwrap();
    let h = hand_gradients(p, &obs, &act, &buf.log_probs, &adv, &ret, &cfg);
    assert!((g.actor[0] - h.dw).abs() < 1e-10);
    assert!((g.actor[1] - h.db).abs() < 1e-10);
    assert!((g.log_std[0] - h.dls).abs() < 1e-10);
    assert!((g.critic[0] - h.dwv).abs() < 1e-10);
    assert!((g.critic[1] - h.dbv).abs() < 1e-10);
    assert!((stats.policy_loss - h.policy_loss).abs() < 1e-10);
    assert_eq!(stats.samples, 3);

    // One Adam step from zero moments moves each parameter by lr·g/(|g|+eps).
    let mut updated = policy.clone();
    let mut opt = Optimizer::new(&updated);
    let one_pass = TrainConfig {
        sgd_epochs: 1,
        minibatch_size: 3,
        grad_clip: 1e9,
        ..cfg.clone()
    };
    let lr = 1e-3;
    ppo_update(&mut updated, &mut opt, &buf, &one_pass, None, lr, &mut tk::rng(0)).unwrap();
    let step = |g: f64| lr * g / (g.abs() + 1e-5);
    assert!((updated.actor.params()[0] - (p.0 - step(h.dw))).abs() < 1e-10);
    assert!((updated.actor.params()[1] - (p.1 - step(h.db))).abs() < 1e-10);
    assert!((updated.log_std[0] - (p.2 - step(h.dls))).abs() < 1e-10);
    assert!((updated.critic.params()[0] - (p.3 - step(h.dwv))).abs() < 1e-10);
}

#[test]
fn ratio_one_gives_vanilla_policy_gradient() {
    let p = (0.4, 0.2, 0.5f64.ln(), 0.0, 0.0);
    let policy = tiny_policy(p.0, p.1, p.2, p.3, p.4);
    let obs = [0.1, 0.7, -0.3, 1.1];
    let act = [1.0, 1.6, 0.2, 2.5];
    let adv = [0.5, -1.0, 2.0, 0.25];
    let buf = tiny_buffer(&policy, &obs, &act, &[0.0; 4], &adv, &[0.0; 4]);
    let cfg = TrainConfig::default();
    let (g, stats) = ppo_gradients(&policy, &buf, &[0, 1, 2, 3], &cfg, None).unwrap();
    let mean_adv = adv.iter().sum::<f64>() / 4.0;
    assert!((stats.policy_loss + mean_adv).abs() < 1e-12);

    // −mean(A · ∇ log π)
    let sigma = p.2.exp();
    let (mut dw, mut db) = (0.0, 0.0);
    for i in 0..4 {
        let mu = 0.5 + 2.0 * (p.0 * obs[i] + p.1);
        let dlp = (act[i] - mu) / (sigma * sigma);
        dw -= adv[i] * dlp * 2.0 * obs[i] / 4.0;
        db -= adv[i] * dlp * 2.0 / 4.0;
    }
    assert!((g.actor[0] - dw).abs() < 1e-12 && (g.actor[1] - db).abs() < 1e-12);

    let wide = TrainConfig {
        clip_range: 1e9,
        ..cfg
    };
    let shifted = tiny_buffer(&policy, &obs, &act, &[0.3, -0.4, 0.2, 0.9], &adv, &[0.0; 4]);
    let (g_wide, _) = ppo_gradients(&policy, &shifted, &[0, 1, 2, 3], &wide, None).unwrap();
    let h = hand_gradients(p, &obs, &act, &shifted.log_probs, &adv, &[0.0; 4], &wide);
    assert!((g_wide.actor[0] - h.dw).abs() < 1e-12);
}

#[test]
fn zero_advantage_leaves_actor_unchanged() {
    let mut policy = tiny_policy(0.4, 0.2, 0.0, 0.1, 0.0);
    let before = policy.clone();
    let obs = [0.1, 0.7, -0.3];
    let buf = tiny_buffer(&policy, &obs, &[1.0, 0.0, 2.0], &[0.0; 3], &[0.0; 3], &[1.0, 2.0, 3.0]);
    let mut opt = Optimizer::new(&policy);
    ppo_update(&mut policy, &mut opt, &buf, &TrainConfig::default(), None, 1e-3, &mut tk::rng(1)).unwrap();
    assert_eq!(policy.actor, before.actor);
    assert_eq!(policy.log_std, before.log_std);
    assert_ne!(policy.critic, before.critic);
}

#[test]
fn invalid_samples_are_masked() {
    let policy = tiny_policy(0.4, 0.2, 0.0, 0.1, 0.0);
    let obs = [0.1, 0.7];
    let mut buf = tiny_buffer(&policy, &obs, &[1.0, 0.0], &[0.0; 2], &[1.0, 1e6], &[1.0, 1e6]);
    buf.valid[1] = false;
    let cfg = TrainConfig::default();
    let (masked, stats) = ppo_gradients(&policy, &buf, &[0, 1], &cfg, None).unwrap();
    let (alone, _) = ppo_gradients(&policy, &buf, &[0], &cfg, None).unwrap();
    assert_eq!(stats.samples, 1);
    assert_eq!(masked, alone);
    buf.valid[0] = false;
    let (_, stats) = ppo_gradients(&policy, &buf, &[0, 1], &cfg, None).unwrap();
    assert!(stats.skipped);
}
