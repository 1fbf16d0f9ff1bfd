//! Hyperparameters. Every field has a default; [`RunConfig::desk`] is the
//! CPU-sized profile and [`RunConfig::paper`] the full-scale one.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    PointReach,
    PointPush,
}

impl EnvId {
    pub const ALL: [EnvId; 2] = [EnvId::PointReach, EnvId::PointPush];

    pub fn name(self) -> &'static str {
        match self {
            EnvId::PointReach => "point_reach",
            EnvId::PointPush => "point_push",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            EnvId::PointReach => 0,
            EnvId::PointPush => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(EnvId::PointReach),
            1 => Ok(EnvId::PointPush),
            c => Err(param_err!("unknown environment code {}", c)),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| param_err!("unknown environment '{}'", s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(param_err!("unknown profile '{}'", s)),
        }
    }
}

/// Image encoder/decoder, sequence encoder and predictor shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Square frame side in pixels.
    pub frame_size: usize,
    /// Filters of the stride-2 layers before width scaling. Layers are used
    /// until the spatial extent reaches one.
    pub conv_filters: Vec<usize>,
    pub bottleneck_filters: usize,
    pub width_mult: f64,
    pub kernel: usize,
    /// Size of `s`; each view produces half of it.
    pub state_dim: usize,
    /// Size of `z`.
    pub embed_dim: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub predictor_hidden: usize,
    /// Negative-region slope of the leaky ReLU.
    pub leak: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl NetConfig {
    pub fn scaled(&self, filters: usize) -> usize {
        ((filters as f64 * self.width_mult).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_size == 0 || self.kernel == 0 || self.conv_filters.is_empty() {
            return Err(param_err!("frame size, kernel and filter list must be non-empty"));
        }
        if self.state_dim < 2 || self.state_dim % 2 != 0 {
            return Err(param_err!("state_dim must be even, got {}", self.state_dim));
        }
        if self.embed_dim == 0 || self.lstm_layers == 0 || self.lstm_hidden == 0 {
            return Err(param_err!("sequence encoder sizes must be positive"));
        }
        if !(self.width_mult > 0.0) || !(self.leak >= 0.0) {
            return Err(param_err!("width_mult must be positive and leak non-negative"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(param_err!("batch-norm momentum must be in [0, 1] and eps positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub rho: f64,
    /// Prediction horizon K.
    pub horizon: usize,
    /// Sequence negatives k.
    pub negatives: usize,
    /// Triplet positives lie within this many frames of the anchor.
    pub positive_window: usize,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(param_err!("tau must be positive, got {}", self.tau));
        }
        if !(self.rho > 0.0) {
            return Err(param_err!("rho must be positive, got {}", self.rho));
        }
        if self.horizon == 0 || self.negatives == 0 || self.positive_window == 0 {
            return Err(param_err!("horizon, negatives and positive_window must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub n_pretrain: usize,
    /// Sequences drawn from each distribution per batch.
    pub batch_pairs: usize,
    pub lr: f64,
    /// Fraction of each dataset held out for evaluation.
    pub holdout: f64,
    pub seed: u64,
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs < 2 {
            return Err(param_err!("batch_pairs must be at least 2"));
        }
        if !(self.lr >= 0.0) {
            return Err(param_err!("learning rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(param_err!("holdout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Actor-critic agent used in the interactive phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub frame_stack: usize,
    pub conv_filters: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub discount: f64,
    /// Target weight kept per update.
    pub polyak: f64,
    pub noise_std: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Uniformly random actions before learning starts.
    pub warmup_steps: usize,
    /// Environment steps per actor-critic update.
    pub update_every: usize,
    /// Standardise rewards with running statistics inside critic targets.
    pub normalize_rewards: bool,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_stack == 0 || self.conv_filters == 0 || self.feature_dim == 0 || self.hidden == 0 {
            return Err(param_err!("agent network sizes must be positive"));
        }
        if !(self.actor_lr >= 0.0) || !(self.critic_lr >= 0.0) {
            return Err(param_err!("agent learning rates must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.polyak) {
            return Err(param_err!("discount and polyak must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(param_err!("noise_std must be non-negative"));
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size || self.update_every == 0 {
            return Err(param_err!("replay capacity must hold at least one batch"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractConfig {
    pub n_pi: usize,
    pub n_train: usize,
    pub n_update: usize,
    /// Encoder learning rate during fine-tuning.
    pub lr: f64,
    pub batch_pairs: usize,
    /// Capacity of the agent-trajectory set.
    pub agent_set_capacity: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl InteractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train > self.n_pi {
            return Err(param_err!(
                "n_train ({}) must not exceed n_pi ({})",
                self.n_train,
                self.n_pi
            ));
        }
        if self.n_update == 0 || self.batch_pairs < 2 || self.agent_set_capacity == 0 {
            return Err(param_err!("n_update, batch_pairs and agent_set_capacity must be positive"));
        }
        if !(self.lr >= 0.0) {
            return Err(param_err!("learning rate must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub env: EnvId,
    /// Trajectories per dataset.
    pub n_trajectories: usize,
    /// Actions per episode; trajectories hold `episode_len + 1` frames.
    pub episode_len: usize,
    pub kp: f64,
    pub kd: f64,
    pub seed: u64,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(param_err!("n_trajectories must be at least 1"));
        }
        if self.episode_len < 2 {
            return Err(param_err!("episode_len must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub align: AlignConfig,
    pub interact: InteractConfig,
    pub agent: AgentConfig,
    pub env: EnvConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Full-scale values.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            net: NetConfig {
                frame_size: 64,
                conv_filters: vec![64, 128, 256, 512],
                bottleneck_filters: 512,
                width_mult: 1.0,
                kernel: 5,
                state_dim: 128,
                embed_dim: 128,
                lstm_layers: 2,
                lstm_hidden: 128,
                predictor_hidden: 128,
                leak: 0.2,
                bn_momentum: 0.1,
                bn_eps: 1e-5,
            },
            loss: LossConfig {
                tau: 0.07,
                rho: 1.0,
                horizon: 3,
                negatives: 8,
                positive_window: 2,
            },
            align: AlignConfig {
                n_pretrain: 8000,
                batch_pairs: 16,
                lr: 1e-4,
                holdout: 0.1,
                seed: 0,
            },
            interact: InteractConfig {
                n_pi: 1_550_000,
                n_train: 375_000,
                n_update: 50,
                lr: 1e-4,
                batch_pairs: 16,
                agent_set_capacity: 512,
                eval_every: 50_000,
                eval_episodes: 20,
                seed: 0,
            },
            agent: AgentConfig {
                frame_stack: 2,
                conv_filters: 16,
                feature_dim: 50,
                hidden: 256,
                actor_lr: 1e-4,
                critic_lr: 1e-4,
                discount: 0.99,
                polyak: 0.995,
                noise_std: 0.2,
                batch_size: 64,
                replay_capacity: 100_000,
                warmup_steps: 4000,
                update_every: 2,
                normalize_rewards: true,
            },
            env: EnvConfig {
                env: EnvId::PointReach,
                n_trajectories: 5000,
                episode_len: 60,
                kp: 4.0,
                kd: 2.0,
                seed: 0,
            },
        }
    }

    /// CPU-sized profile: quarter width, 32x32 frames, short budgets.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.profile = Profile::Desk;
        cfg.net.frame_size = 32;
        cfg.net.width_mult = 0.25;
        cfg.align.n_pretrain = 200;
        cfg.align.lr = 1e-3;
        cfg.interact.n_pi = 60_000;
        cfg.interact.n_train = 15_000;
        cfg.interact.lr = 1e-4;
        cfg.interact.eval_every = 10_000;
        cfg.agent.warmup_steps = 2000;
        cfg.agent.actor_lr = 1e-3;
        cfg.agent.critic_lr = 1e-3;
        cfg.env.n_trajectories = 200;
        cfg.env.episode_len = 40;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.align.validate()?;
        self.interact.validate()?;
        self.agent.validate()?;
        self.env.validate()?;
        if self.loss.horizon > self.env.episode_len {
            return Err(param_err!("horizon exceeds the episode length"));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        alloc::format!(
            "{:?} profile, {}x{} frames, T={}, N={}",
            self.profile,
            self.net.frame_size,
            self.net.frame_size,
            self.env.episode_len,
            self.env.n_trajectories
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }

    #[test]
    fn desk_scales_filters_by_a_quarter() {
        let c = RunConfig::desk().net;
        let f: Vec<usize> = c.conv_filters.iter().map(|&f| c.scaled(f)).collect();
        assert_eq!(f, vec![16, 32, 64, 128]);
        assert_eq!(c.scaled(c.bottleneck_filters), 128);
    }

    #[test]
    fn env_names_round_trip() {
        for e in EnvId::ALL {
            assert_eq!(e.name().parse::<EnvId>().unwrap(), e);
            assert_eq!(EnvId::from_code(e.code()).unwrap(), e);
        }
        assert!("cartpole".parse::<EnvId>().is_err());
    }

    #[test]
    fn n_train_above_n_pi_is_rejected() {
        let mut c = RunConfig::desk();
        c.interact.n_train = c.interact.n_pi + 1;
        assert!(c.validate().is_err());
    }
}
