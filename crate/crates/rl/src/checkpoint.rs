//! Versioned JSON checkpoints. Values are stored as `f64` regardless of the
//! training scalar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::mlp::Mlp;
use crate::policy::{ActorHead, CostHeadScaling, Policy};
use crate::scalar::Scalar;
use crate::trainer::{MpcConfig, Optimizer, TrainMode, Trainer};
use crate::{Error, Result};

pub const FORMAT: &str = "fusedmpc-policy";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadState {
    Cost {
        n_x: usize,
        n_u: usize,
        horizon: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Direct {
        center: Vec<f64>,
        half_range: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub actor: AdamState,
    pub log_std: AdamState,
    pub critic: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub mode: TrainMode,
    pub actor_sizes: Vec<usize>,
    pub actor_params: Vec<f64>,
    pub critic_sizes: Vec<usize>,
    pub critic_params: Vec<f64>,
    pub log_std: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub head: HeadState,
    pub mpc: Option<MpcConfig>,
    pub config_hash: String,
    pub step: u64,
    pub update: u64,
    pub optimizer: Option<OptimizerState>,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn adam_state<T: Scalar>(a: &Adam<T>) -> AdamState {
    let (m, v) = a.moments();
    AdamState {
        m: to_f64(m),
        v: to_f64(v),
        steps: a.steps(),
    }
}

impl OptimizerState {
    pub fn restore<T: Scalar>(&self, opt: &mut Optimizer<T>) -> Result<()> {
        for (name, dst, src) in [
            ("actor", &mut opt.actor, &self.actor),
            ("log_std", &mut opt.log_std, &self.log_std),
            ("critic", &mut opt.critic, &self.critic),
        ] {
            if !dst.restore(from_f64(&src.m), from_f64(&src.v), src.steps) {
                return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong size")));
            }
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn from_policy<T: Scalar>(policy: &Policy<T>, mode: TrainMode, mpc: Option<MpcConfig>, config_hash: String) -> Self {
        let head = match &policy.head {
            ActorHead::Cost(s) => HeadState::Cost {
                n_x: s.n_x(),
                n_u: s.n_u(),
                horizon: s.horizon(),
                lo: to_f64(s.lo()),
                hi: to_f64(s.hi()),
            },
            ActorHead::Direct { center, half_range } => HeadState::Direct {
                center: to_f64(center),
                half_range: to_f64(half_range),
            },
        };
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            mode,
            actor_sizes: policy.actor.sizes().to_vec(),
            actor_params: to_f64(policy.actor.params()),
            critic_sizes: policy.critic.sizes().to_vec(),
            critic_params: to_f64(policy.critic.params()),
            log_std: to_f64(&policy.log_std),
            u_min: to_f64(&policy.u_min),
            u_max: to_f64(&policy.u_max),
            head,
            mpc,
            config_hash,
            step: 0,
            update: 0,
            optimizer: None,
        }
    }

    pub fn from_trainer<T: Scalar>(tr: &Trainer<T>) -> Self {
        let mpc = (tr.cfg.mode == TrainMode::AcMpc).then(|| tr.cfg.mpc.clone());
        let mut c = Self::from_policy(&tr.policy, tr.cfg.mode, mpc, tr.cfg.hash());
        c.step = tr.step;
        c.update = tr.update;
        c.optimizer = Some(OptimizerState {
            actor: adam_state(&tr.opt.actor),
            log_std: adam_state(&tr.opt.log_std),
            critic: adam_state(&tr.opt.critic),
        });
        c
    }

    pub fn to_policy<T: Scalar>(&self) -> Result<Policy<T>> {
        let head = match &self.head {
            HeadState::Cost {
                n_x,
                n_u,
                horizon,
                lo,
                hi,
            } => ActorHead::Cost(CostHeadScaling::from_bounds(*n_x, *n_u, *horizon, from_f64(lo), from_f64(hi))?),
            HeadState::Direct { center, half_range } => {
                Error::check_len("direct head half range", center.len(), half_range.len())?;
                ActorHead::Direct {
                    center: from_f64(center),
                    half_range: from_f64(half_range),
                }
            }
        };
        let n_u = self.u_min.len();
        Error::check_len("checkpoint u_max", n_u, self.u_max.len())?;
        Error::check_len("checkpoint log_std", n_u, self.log_std.len())?;
        let actor = Mlp::from_params(&self.actor_sizes, from_f64(&self.actor_params))?;
        let critic = Mlp::from_params(&self.critic_sizes, from_f64(&self.critic_params))?;
        let head_out = match &head {
            ActorHead::Cost(s) => s.dim(),
            ActorHead::Direct { center, .. } => center.len(),
        };
        Error::check_len("actor output", head_out, actor.output_dim())?;
        Error::check_len("critic input", actor.input_dim(), critic.input_dim())?;
        Error::check_len("critic output", 1, critic.output_dim())?;
        Ok(Policy {
            actor,
            head,
            log_std: from_f64(&self.log_std),
            critic,
            u_min: from_f64(&self.u_min),
            u_max: from_f64(&self.u_max),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", c.format)));
        }
        if c.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
