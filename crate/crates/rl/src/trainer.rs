//! PPO with GAE for the MPC actor (`ac_mpc`) and the direct-action baseline
//! (`ac_mlp`).

use std::time::Instant;

use fusedmpc::ilqr::shift_warm_start;
use fusedmpc::SolveSettings;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{clip_grad_norm, Adam};
use crate::checkpoint::Checkpoint;
use crate::mlp::Tape;
use crate::policy::{gaussian_entropy, gaussian_log_prob, CostHeadScaling, MlpSpec, MpcInputs, MpcLayer, Policy};
use crate::raceenv::{DoneReason, RaceEnv, TrajRow};
use crate::scalar::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    AcMpc,
    AcMlp,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::AcMpc => "ac_mpc",
            TrainMode::AcMlp => "ac_mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self { horizon: 2, max_iter: 5 }
    }
}

/// Network shapes and cost-head bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Bounds for the diagonal cost entries.
    pub diag_bounds: [f64; 2],
    /// Bounds for the linear cost entries.
    pub lin_bounds: [f64; 2],
    /// Overrides for the control entries (thrust is absolute, so the default
    /// midpoint asks for roughly hover thrust).
    pub control_diag_bounds: Option<[f64; 2]>,
    pub control_lin_bounds: Option<[f64; 2]>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            actor_hidden: MlpSpec::actor().hidden,
            critic_hidden: MlpSpec::critic().hidden,
            diag_bounds: [1e-3, 10.0],
            lin_bounds: [-10.0, 10.0],
            control_diag_bounds: Some([0.1, 1.9]),
            control_lin_bounds: Some([-9.81, 0.0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub steps_per_update: usize,
    pub minibatch_size: usize,
    pub sgd_epochs: usize,
    pub clip_range: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub grad_clip: f64,
    pub total_steps: u64,
    pub num_envs: usize,
    /// Write a checkpoint every this many updates (0: only at the end).
    pub checkpoint_every: usize,
    /// Solver worker threads; results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
    /// Set by the caller rather than read from config files.
    #[serde(skip)]
    pub mpc: MpcConfig,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::AcMpc,
            gamma: 0.99,
            gae_lambda: 0.95,
            steps_per_update: 256,
            minibatch_size: 2048,
            sgd_epochs: 10,
            clip_range: 0.2,
            lr_start: 3e-4,
            lr_end: 3e-5,
            entropy_coef: 0.0,
            value_coef: 0.5,
            grad_clip: 0.5,
            total_steps: 200_000,
            num_envs: 16,
            checkpoint_every: 0,
            workers: 1,
            mpc: MpcConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.steps_per_update == 0 || self.num_envs == 0 || self.minibatch_size == 0 {
            return bad("steps_per_update, num_envs and minibatch_size must be >= 1");
        }
        if !(self.clip_range > 0.0) || !(self.lr_start >= 0.0) || !(self.lr_end >= 0.0) {
            return bad("clip_range must be positive and learning rates nonnegative");
        }
        if !(self.grad_clip > 0.0) || self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("grad_clip must be positive, coefficients nonnegative");
        }
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if self.mode == TrainMode::AcMpc && (self.mpc.horizon == 0 || self.mpc.max_iter == 0) {
            return bad("mpc.horizon and mpc.max_iter must be >= 1");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.steps_per_update * self.num_envs
    }

    /// Hex SHA-256 of the canonical JSON form, MPC settings included.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(&(self, &self.mpc)).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn lr_at(&self, step: u64) -> f64 {
        let p = if self.total_steps == 0 {
            1.0
        } else {
            (step as f64 / self.total_steps as f64).min(1.0)
        };
        self.lr_start + (self.lr_end - self.lr_start) * p
    }
}

/// GAE over one environment's sequence: `dones[t]` marks a transition that
/// ended its episode; `last_value` bootstraps after the final step.
pub fn gae<T: Scalar>(
    rewards: &[T],
    values: &[T],
    dones: &[bool],
    last_value: T,
    gamma: T,
    lambda: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let n = rewards.len();
    Error::check_len("gae values", n, values.len())?;
    Error::check_len("gae dones", n, dones.len())?;
    let mut adv = vec![T::zero(); n];
    let mut next_adv = T::zero();
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { T::zero() } else { T::one() };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(&a, &v)| a + v).collect();
    Ok((adv, returns))
}

/// Transitions of one update, stored step-major (`index = step · envs + env`).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer<T> {
    pub steps: usize,
    pub envs: usize,
    pub obs_dim: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub warm_len: usize,
    pub observations: Vec<T>,
    pub mpc_states: Vec<T>,
    pub warm_starts: Vec<T>,
    /// Unclamped Gaussian samples.
    pub actions: Vec<T>,
    pub log_probs: Vec<T>,
    pub rewards: Vec<T>,
    pub values: Vec<T>,
    pub dones: Vec<bool>,
    /// False where the actor could not produce an action.
    pub valid: Vec<bool>,
    pub advantages: Vec<T>,
    pub returns: Vec<T>,
}

impl<T: Scalar> RolloutBuffer<T> {
    pub fn new(steps: usize, envs: usize, obs_dim: usize, n_x: usize, n_u: usize, warm_len: usize) -> Self {
        let n = steps * envs;
        Self {
            steps,
            envs,
            obs_dim,
            n_x,
            n_u,
            warm_len,
            observations: Vec::with_capacity(n * obs_dim),
            mpc_states: Vec::with_capacity(n * n_x),
            warm_starts: Vec::with_capacity(n * warm_len),
            actions: Vec::with_capacity(n * n_u),
            log_probs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Per-environment GAE, then advantages normalized over valid samples.
    pub fn compute_advantages(&mut self, last_values: &[T], gamma: T, lambda: T) -> Result<()> {
        Error::check_len("rollout length", self.steps * self.envs, self.len())?;
        Error::check_len("bootstrap values", self.envs, last_values.len())?;
        let n = self.len();
        self.advantages = vec![T::zero(); n];
        self.returns = vec![T::zero(); n];
        for e in 0..self.envs {
            let idx: Vec<usize> = (0..self.steps).map(|s| s * self.envs + e).collect();
            let r: Vec<T> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<T> = idx.iter().map(|&i| self.values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (a, ret) = gae(&r, &v, &d, last_values[e], gamma, lambda)?;
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = a[k];
                self.returns[i] = ret[k];
            }
        }
        let valid: Vec<T> = (0..n).filter(|&i| self.valid[i]).map(|i| self.advantages[i]).collect();
        if !valid.is_empty() {
            let count = T::lit(valid.len() as f64);
            let mean = valid.iter().copied().sum::<T>() / count;
            let var = valid.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / count;
            let std = var.sqrt() + T::lit(1e-8);
            self.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: u64,
    pub step: u64,
    /// Mean undiscounted return of episodes finished during the update.
    pub mean_reward: Option<f64>,
    pub lap_rate: Option<f64>,
    pub mean_solver_iters: f64,
    pub approx_grad_frac: f64,
    pub steps_per_sec: f64,
    pub episodes: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub skipped_minibatches: usize,
    pub solver_failures: usize,
}

pub const METRICS_CSV_HEADER: &str = "update,step,mean_reward,lap_rate,mean_solver_iters,approx_grad_frac,steps_per_sec";

impl UpdateMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.update,
            self.step,
            opt(self.mean_reward),
            opt(self.lap_rate),
            self.mean_solver_iters,
            self.approx_grad_frac,
            self.steps_per_sec
        )
    }
}

/// Per-minibatch losses and counters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinibatchStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub samples: usize,
    pub approx: usize,
    pub skipped: bool,
}

/// Gradients of the PPO loss for one minibatch, laid out like the policy's
/// actor parameters, `log σ` and critic parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyGrads<T> {
    pub actor: Vec<T>,
    pub log_std: Vec<T>,
    pub critic: Vec<T>,
}

impl<T: Scalar> PolicyGrads<T> {
    pub fn zeros(policy: &Policy<T>) -> Self {
        Self {
            actor: vec![T::zero(); policy.actor.num_params()],
            log_std: vec![T::zero(); policy.log_std.len()],
            critic: vec![T::zero(); policy.critic.num_params()],
        }
    }

    fn reset(&mut self, policy: &Policy<T>) {
        for (g, n) in [
            (&mut self.actor, policy.actor.num_params()),
            (&mut self.log_std, policy.log_std.len()),
            (&mut self.critic, policy.critic.num_params()),
        ] {
            g.clear();
            g.resize(n, T::zero());
        }
    }

    fn is_finite(&self) -> bool {
        self.actor.iter().chain(&self.log_std).chain(&self.critic).all(|v| v.is_finite())
    }
}

/// Buffers reused from one minibatch to the next.
#[derive(Debug, Default)]
pub struct Workspace<T> {
    pub grads: PolicyGrads<T>,
    actor: Option<Tape<T>>,
    critic: Tape<T>,
    obs: Vec<T>,
    d_mean: Vec<T>,
    d_value: Vec<T>,
}

/// Loss gradients over the buffer rows `idx` without touching parameters.
pub fn ppo_gradients<T: Scalar>(
    policy: &Policy<T>,
    buf: &RolloutBuffer<T>,
    idx: &[usize],
    cfg: &TrainConfig,
    layer: Option<&MpcLayer<T>>,
) -> Result<(PolicyGrads<T>, MinibatchStats)> {
    let mut ws = Workspace::default();
    let stats = ppo_gradients_into(policy, buf, idx, cfg, layer, &mut ws)?;
    Ok((ws.grads, stats))
}

/// [`ppo_gradients`] writing into `ws.grads`.
pub fn ppo_gradients_into<T: Scalar>(
    policy: &Policy<T>,
    buf: &RolloutBuffer<T>,
    idx: &[usize],
    cfg: &TrainConfig,
    layer: Option<&MpcLayer<T>>,
    ws: &mut Workspace<T>,
) -> Result<MinibatchStats> {
    let n_u = buf.n_u;
    let rows = idx.len();
    ws.grads.reset(policy);
    let obs = &mut ws.obs;
    obs.clear();
    for &i in idx {
        obs.extend_from_slice(&buf.observations[i * buf.obs_dim..(i + 1) * buf.obs_dim]);
    }
    let (x_init, u_warm): (Vec<Vec<T>>, Vec<Vec<T>>) = if policy.is_mpc() {
        idx.iter()
            .map(|&i| {
                (
                    buf.mpc_states[i * buf.n_x..(i + 1) * buf.n_x].to_vec(),
                    buf.warm_starts[i * buf.warm_len..(i + 1) * buf.warm_len].to_vec(),
                )
            })
            .unzip()
    } else {
        (Vec::new(), Vec::new())
    };
    let inputs = layer.map(|layer| MpcInputs {
        layer,
        x_init: &x_init,
        u_warm: &u_warm,
    });
    let mut batch = policy.means_into(obs, rows, inputs, ws.actor.take().unwrap_or_default())?;

    let used: Vec<bool> = (0..rows)
        .map(|r| buf.valid[idx[r]] && batch.failures[r].is_none())
        .collect();
    let count = used.iter().filter(|&&u| u).count();
    let mut stats = MinibatchStats {
        samples: count,
        ..Default::default()
    };
    let grads = &mut ws.grads;
    if count == 0 {
        stats.skipped = true;
        ws.actor = Some(batch.into_tape());
        return Ok(stats);
    }
    let inv_n = T::one() / T::lit(count as f64);
    let clip = T::lit(cfg.clip_range);
    let sigma = policy.sigma();
    let d_mean = &mut ws.d_mean;
    d_mean.clear();
    d_mean.resize(rows * n_u, T::zero());
    let mut policy_loss = T::zero();
    for r in 0..rows {
        if !used[r] {
            continue;
        }
        let i = idx[r];
        let a = &buf.actions[i * n_u..(i + 1) * n_u];
        let mean = batch.mean(r);
        let logp = gaussian_log_prob(a, mean, &policy.log_std);
        let adv = buf.advantages[i];
        let ratio = (logp - buf.log_probs[i]).exp();
        let surr1 = ratio * adv;
        let surr2 = ratio.max(T::one() - clip).min(T::one() + clip) * adv;
        policy_loss = policy_loss - surr1.min(surr2) * inv_n;
        let d_logp = if surr1 <= surr2 { -adv * ratio * inv_n } else { T::zero() };
        for k in 0..n_u {
            let z = (a[k] - mean[k]) / sigma[k];
            d_mean[r * n_u + k] = d_logp * z / sigma[k];
            grads.log_std[k] = grads.log_std[k] + d_logp * (z * z - T::one());
        }
    }
    let ent_coef = T::lit(cfg.entropy_coef);
    for g in &mut grads.log_std {
        *g = *g - ent_coef;
    }
    stats.approx = policy.actor_backward(&mut batch, d_mean, layer, &mut grads.actor)?;
    ws.actor = Some(batch.into_tape());

    let tape = &mut ws.critic;
    policy.critic.forward_into(obs, rows, tape)?;
    let values = tape.output();
    let vf = T::lit(cfg.value_coef);
    let d_value = &mut ws.d_value;
    d_value.clear();
    d_value.resize(rows, T::zero());
    let mut value_loss = T::zero();
    for r in 0..rows {
        if !used[r] {
            continue;
        }
        let err = values[r] - buf.returns[idx[r]];
        value_loss = value_loss + err * err * inv_n;
        d_value[r] = T::lit(2.0) * vf * err * inv_n;
    }
    policy.critic.backward(tape, d_value, &mut grads.critic)?;

    stats.policy_loss = policy_loss.as_f64();
    stats.value_loss = value_loss.as_f64();
    stats.entropy = gaussian_entropy(&policy.log_std).as_f64();
    if !(policy_loss.is_finite() && value_loss.is_finite() && grads.is_finite()) {
        stats.skipped = true;
    }
    Ok(stats)
}

/// Adam state for the three parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    pub actor: Adam<T>,
    pub log_std: Adam<T>,
    pub critic: Adam<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(policy: &Policy<T>) -> Self {
        Self {
            actor: Adam::new(policy.actor.num_params()),
            log_std: Adam::new(policy.log_std.len()),
            critic: Adam::new(policy.critic.num_params()),
        }
    }

    /// Clips the joint gradient norm and applies one Adam step.
    pub fn apply(&mut self, policy: &mut Policy<T>, grads: &mut PolicyGrads<T>, lr: T, max_norm: T) {
        clip_grad_norm(&mut [&mut grads.actor, &mut grads.log_std, &mut grads.critic], max_norm);
        self.actor.step(policy.actor.params_mut(), &grads.actor, lr);
        self.log_std.step(&mut policy.log_std, &grads.log_std, lr);
        self.critic.step(policy.critic.params_mut(), &grads.critic, lr);
    }
}

/// Aggregate of one [`ppo_update`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub minibatches: usize,
    pub skipped: usize,
    pub samples: usize,
    pub approx: usize,
}

/// `sgd_epochs` passes over shuffled minibatches of the buffer.
pub fn ppo_update<T: Scalar>(
    policy: &mut Policy<T>,
    opt: &mut Optimizer<T>,
    buf: &RolloutBuffer<T>,
    cfg: &TrainConfig,
    layer: Option<&MpcLayer<T>>,
    lr: T,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    ppo_update_with(policy, opt, buf, cfg, layer, lr, rng, &mut Workspace::default())
}

/// [`ppo_update`] with caller-owned buffers.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update_with<T: Scalar>(
    policy: &mut Policy<T>,
    opt: &mut Optimizer<T>,
    buf: &RolloutBuffer<T>,
    cfg: &TrainConfig,
    layer: Option<&MpcLayer<T>>,
    lr: T,
    rng: &mut impl Rng,
    ws: &mut Workspace<T>,
) -> Result<UpdateStats> {
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut out = UpdateStats::default();
    let max_norm = T::lit(cfg.grad_clip);
    for _ in 0..cfg.sgd_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let stats = ppo_gradients_into(policy, buf, chunk, cfg, layer, ws)?;
            out.minibatches += 1;
            if stats.skipped {
                out.skipped += 1;
                continue;
            }
            out.policy_loss += stats.policy_loss;
            out.value_loss += stats.value_loss;
            out.samples += stats.samples;
            out.approx += stats.approx;
            opt.apply(policy, &mut ws.grads, lr, max_norm);
        }
    }
    let used = (out.minibatches - out.skipped).max(1) as f64;
    out.policy_loss /= used;
    out.value_loss /= used;
    Ok(out)
}

/// Builds the policy and, for `ac_mpc`, the MPC layer for an environment.
pub fn build_policy<T: Scalar>(
    cfg: &TrainConfig,
    env: &RaceEnv<T>,
    rng: &mut impl Rng,
) -> Result<(Policy<T>, Option<MpcLayer<T>>)> {
    let actor = MlpSpec {
        hidden: cfg.policy.actor_hidden.clone(),
        head: crate::policy::HeadKind::CostSigmoid,
    };
    let critic = MlpSpec {
        hidden: cfg.policy.critic_hidden.clone(),
        head: crate::policy::HeadKind::Linear,
    };
    match cfg.mode {
        TrainMode::AcMpc => {
            let layer = mpc_layer(cfg, env)?;
            let mut scaling =
                CostHeadScaling::uniform(6, 2, cfg.mpc.horizon, cfg.policy.diag_bounds, cfg.policy.lin_bounds)?;
            if let (Some(d), Some(l)) = (cfg.policy.control_diag_bounds, cfg.policy.control_lin_bounds) {
                scaling.set_control_bounds(d, l)?;
            }
            let policy = Policy::new_mpc(env.obs_dim(), &actor, &critic, scaling, env.u_min(), env.u_max(), rng)?;
            Ok((policy, Some(layer)))
        }
        TrainMode::AcMlp => {
            let actor = MlpSpec {
                head: crate::policy::HeadKind::Linear,
                ..actor
            };
            let policy = Policy::new_direct(env.obs_dim(), &actor, &critic, env.hover(), env.u_min(), env.u_max(), rng)?;
            Ok((policy, None))
        }
    }
}

pub fn mpc_layer<T: Scalar>(cfg: &TrainConfig, env: &RaceEnv<T>) -> Result<MpcLayer<T>> {
    let settings = SolveSettings::new(cfg.mpc.horizon, cfg.mpc.max_iter, env.u_min(), env.u_max())?;
    MpcLayer::new(env.model().clone(), settings, cfg.workers)
}

struct EnvSlot<T> {
    state: crate::raceenv::EnvState<T>,
    obs: Vec<T>,
    warm: Vec<T>,
    ret: f64,
    rng: ChaCha8Rng,
}

/// Complete training state; [`Trainer::run`] alternates collection and
/// updates until `total_steps`.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub policy: Policy<T>,
    pub opt: Optimizer<T>,
    pub layer: Option<MpcLayer<T>>,
    pub step: u64,
    pub update: u64,
    env: RaceEnv<T>,
    slots: Vec<EnvSlot<T>>,
    rng: ChaCha8Rng,
    ws: Workspace<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, env: RaceEnv<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (policy, layer) = build_policy(&cfg, &env, &mut rng)?;
        let opt = Optimizer::new(&policy);
        Self::assemble(cfg, env, policy, opt, layer, rng, 0, 0)
    }

    /// Continues from a checkpoint; counters and optimizer state carry over.
    pub fn resume(cfg: TrainConfig, env: RaceEnv<T>, ckpt: &Checkpoint, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if ckpt.mode != cfg.mode {
            return Err(Error::Checkpoint(format!(
                "checkpoint mode {} does not match config mode {}",
                ckpt.mode.as_str(),
                cfg.mode.as_str()
            )));
        }
        let policy = ckpt.to_policy::<T>()?;
        Error::check_len("checkpoint observation size", env.obs_dim(), policy.obs_dim())?;
        let mut opt = Optimizer::new(&policy);
        if let Some(state) = &ckpt.optimizer {
            state.restore(&mut opt)?;
        }
        let layer = match cfg.mode {
            TrainMode::AcMpc => Some(mpc_layer(&cfg, &env)?),
            TrainMode::AcMlp => None,
        };
        let rng = ChaCha8Rng::seed_from_u64(seed ^ ckpt.step.rotate_left(17));
        Self::assemble(cfg, env, policy, opt, layer, rng, ckpt.step, ckpt.update)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: TrainConfig,
        env: RaceEnv<T>,
        policy: Policy<T>,
        opt: Optimizer<T>,
        layer: Option<MpcLayer<T>>,
        mut rng: ChaCha8Rng,
        step: u64,
        update: u64,
    ) -> Result<Self> {
        let warm = layer.as_ref().map(|l| l.default_warm()).unwrap_or_default();
        let slots = (0..cfg.num_envs)
            .map(|_| {
                let mut erng = ChaCha8Rng::seed_from_u64(rng.random());
                let (state, obs) = env.reset(&mut erng);
                EnvSlot {
                    state,
                    obs,
                    warm: warm.clone(),
                    ret: 0.0,
                    rng: erng,
                }
            })
            .collect();
        Ok(Self {
            cfg,
            policy,
            opt,
            layer,
            step,
            update,
            env,
            slots,
            rng,
            ws: Workspace::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_trainer(self)
    }

    fn reset_slot(&mut self, e: usize) {
        let warm = self.layer.as_ref().map(|l| l.default_warm()).unwrap_or_default();
        let slot = &mut self.slots[e];
        let (state, obs) = self.env.reset(&mut slot.rng);
        slot.state = state;
        slot.obs = obs;
        slot.warm = warm;
        slot.ret = 0.0;
    }

    /// Runs one collection phase and one update.
    pub fn train_update(&mut self) -> Result<UpdateMetrics> {
        let start = Instant::now();
        let (envs, steps) = (self.cfg.num_envs, self.cfg.steps_per_update);
        let n_u = self.policy.n_u();
        let n_x = 6;
        let warm_len = self.layer.as_ref().map_or(0, |l| l.horizon() * n_u);
        let mut buf = RolloutBuffer::new(steps, envs, self.env.obs_dim(), n_x, n_u, warm_len);
        let gamma = T::lit(self.cfg.gamma);
        let mut returns = Vec::new();
        let mut laps = 0usize;
        let mut iters = 0usize;
        let mut solves = 0usize;
        let mut failures = 0usize;

        for _ in 0..steps {
            let obs: Vec<T> = self.slots.iter().flat_map(|s| s.obs.iter().copied()).collect();
            let values = self.policy.values(&obs, envs)?;
            let x_init: Vec<Vec<T>> = self.slots.iter().map(|s| self.env.mpc_state(&s.state)).collect();
            let warm: Vec<Vec<T>> = self.slots.iter().map(|s| s.warm.clone()).collect();
            let inputs = self.layer.as_ref().map(|layer| MpcInputs {
                layer,
                x_init: &x_init,
                u_warm: &warm,
            });
            let batch = self.policy.means(&obs, envs, inputs)?;
            iters += batch.solver_iterations().sum::<usize>();
            solves += batch.solves.iter().flatten().count();

            for e in 0..envs {
                buf.observations.extend_from_slice(&self.slots[e].obs);
                if self.layer.is_some() {
                    buf.mpc_states.extend_from_slice(&x_init[e]);
                    buf.warm_starts.extend_from_slice(&warm[e]);
                }
                buf.values.push(values[e]);
                if batch.failures[e].is_some() {
                    failures += 1;
                    buf.actions.extend(std::iter::repeat_n(T::zero(), n_u));
                    buf.log_probs.push(T::zero());
                    buf.rewards.push(T::zero());
                    buf.dones.push(true);
                    buf.valid.push(false);
                    self.reset_slot(e);
                    continue;
                }
                let act = self.policy.sample(batch.mean(e), true, &mut self.rng);
                let out = self.env.step(&self.slots[e].state, &act.u_sampled)?;
                let mut reward = out.reward;
                if out.state.done == Some(DoneReason::Timeout) {
                    reward = reward + gamma * self.policy.critic_forward(&out.obs)?;
                }
                buf.actions.extend_from_slice(&act.u_raw);
                buf.log_probs.push(act.log_prob);
                buf.rewards.push(reward);
                buf.dones.push(out.done);
                buf.valid.push(true);
                let slot = &mut self.slots[e];
                slot.ret += out.reward.as_f64();
                if out.done {
                    returns.push(slot.ret);
                    if out.state.done == Some(DoneReason::LapComplete) {
                        laps += 1;
                    }
                    self.reset_slot(e);
                } else {
                    slot.state = out.state;
                    slot.obs = out.obs;
                    if let Some(Some(r)) = batch.solves.get(e) {
                        slot.warm = shift_warm_start(r.traj.controls(), n_u);
                    }
                }
            }
            self.step += envs as u64;
        }

        let last_obs: Vec<T> = self.slots.iter().flat_map(|s| s.obs.iter().copied()).collect();
        let last_values = self.policy.values(&last_obs, envs)?;
        buf.compute_advantages(&last_values, gamma, T::lit(self.cfg.gae_lambda))?;
        let collect_secs = start.elapsed().as_secs_f64();

        let lr = T::lit(self.cfg.lr_at(self.step - (steps * envs) as u64));
        let stats = ppo_update_with(
            &mut self.policy,
            &mut self.opt,
            &buf,
            &self.cfg,
            self.layer.as_ref(),
            lr,
            &mut self.rng,
            &mut self.ws,
        )?;
        self.update += 1;
        let elapsed = start.elapsed().as_secs_f64().max(collect_secs).max(1e-9);
        let episodes = returns.len();
        Ok(UpdateMetrics {
            update: self.update,
            step: self.step,
            mean_reward: (episodes > 0).then(|| returns.iter().sum::<f64>() / episodes as f64),
            lap_rate: (episodes > 0).then(|| laps as f64 / episodes as f64),
            mean_solver_iters: if solves > 0 { iters as f64 / solves as f64 } else { 0.0 },
            approx_grad_frac: if stats.samples > 0 {
                stats.approx as f64 / stats.samples as f64
            } else {
                0.0
            },
            steps_per_sec: (steps * envs) as f64 / elapsed,
            episodes,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            skipped_minibatches: stats.skipped,
            solver_failures: failures,
        })
    }

    /// Trains until `total_steps`, calling `on_update` after every update.
    pub fn run(&mut self, mut on_update: impl FnMut(&Self, &UpdateMetrics) -> Result<()>) -> Result<Vec<UpdateMetrics>> {
        let mut log = Vec::new();
        while self.step < self.cfg.total_steps {
            let m = self.train_update()?;
            on_update(self, &m)?;
            log.push(m);
        }
        Ok(log)
    }
}

/// Trains from scratch and returns the final checkpoint with the metrics log.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    env_factory: &dyn Fn() -> Result<RaceEnv<T>>,
    seed: u64,
) -> Result<(Checkpoint, Vec<UpdateMetrics>)> {
    let mut trainer = Trainer::new(cfg.clone(), env_factory()?, seed)?;
    let log = trainer.run(|_, _| Ok(()))?;
    Ok((trainer.checkpoint(), log))
}

/// Outcome of one deterministic evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub reason: DoneReason,
    pub lap_time: Option<f64>,
    pub total_reward: f64,
    pub gates_passed: usize,
    pub trajectory: Vec<TrajRow>,
}

/// Rolls out one episode with `explore = false` from a seeded reset.
pub fn run_episode<T: Scalar>(
    policy: &Policy<T>,
    env: &RaceEnv<T>,
    layer: Option<&MpcLayer<T>>,
    seed: u64,
) -> Result<EpisodeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, mut obs) = env.reset(&mut rng);
    let n_u = policy.n_u();
    let mut warm = layer.map(|l| l.default_warm()).unwrap_or_default();
    let mut rows = Vec::new();
    let mut total = 0.0;
    let mut gates = 0;
    let row = |s: &crate::raceenv::EnvState<T>, u: [f64; 2], r: f64| TrajRow {
        t: s.time.as_f64(),
        x: std::array::from_fn(|i| s.x[i].as_f64()),
        u,
        gate_idx: s.next_gate,
        reward: r,
    };
    loop {
        let x_init = env.mpc_state(&state);
        let act = match policy.act(&obs, &x_init, &warm, layer, false, &mut rng) {
            Ok(a) => a,
            Err(Error::Action { .. }) => {
                rows.push(row(&state, [f64::NAN; 2], -env.cfg.crash_penalty));
                return Ok(EpisodeReport {
                    reason: DoneReason::OutOfBounds,
                    lap_time: None,
                    total_reward: total - env.cfg.crash_penalty,
                    gates_passed: gates,
                    trajectory: rows,
                });
            }
            Err(e) => return Err(e),
        };
        let out = env.step(&state, &act.u_sampled)?;
        let r = out.reward.as_f64();
        total += r;
        gates += usize::from(out.passed_gate);
        rows.push(row(&state, [act.u_sampled[0].as_f64(), act.u_sampled[1].as_f64()], r));
        if let Some(reason) = out.state.done {
            rows.push(row(&out.state, [f64::NAN; 2], 0.0));
            let lap_time = crate::raceenv::lap_time(std::slice::from_ref(&out.state)).map(|t| t.as_f64());
            return Ok(EpisodeReport {
                reason,
                lap_time,
                total_reward: total,
                gates_passed: gates,
                trajectory: rows,
            });
        }
        if layer.is_some() {
            warm = shift_warm_start(&act.u_plan, n_u);
        }
        state = out.state;
        obs = out.obs;
    }
}
