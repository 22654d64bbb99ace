//! Run configuration. Every knob of a training run lives here and is
//! written verbatim into the run directory.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationKind, AugmentationSpec};
use crate::env::{BackgroundMode, BackgroundTier, EnvConfig};
use crate::error::{BitError, Result};

/// Which representation-loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoFwd,
    NoBwd,
    NoAction,
    OnlyAction,
    /// No representation loss at all; the augmentation moves to the RL path.
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoFwd,
        Ablation::NoBwd,
        Ablation::NoAction,
        Ablation::OnlyAction,
        Ablation::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoFwd => "no_fwd",
            Ablation::NoBwd => "no_bwd",
            Ablation::NoAction => "no_action",
            Ablation::OnlyAction => "only_action",
            Ablation::Baseline => "baseline",
        }
    }

    pub fn mask(self) -> LossMask {
        let (action, fwd, bwd) = match self {
            Ablation::Full => (true, true, true),
            Ablation::NoFwd => (true, false, true),
            Ablation::NoBwd => (true, true, false),
            Ablation::NoAction => (false, true, true),
            Ablation::OnlyAction => (true, false, false),
            Ablation::Baseline => (false, false, false),
        };
        LossMask {
            action,
            fwd,
            bwd,
            true_action_input: self == Ablation::NoAction,
        }
    }

    pub fn uses_bit(self) -> bool {
        self != Ablation::Baseline
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = BitError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            BitError::Argument(format!(
                "unknown ablation `{s}` (expected full, no_fwd, no_bwd, no_action, only_action or baseline)"
            ))
        })
    }
}

/// Active terms of the representation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossMask {
    pub action: bool,
    pub fwd: bool,
    pub bwd: bool,
    /// Feed the recorded action instead of the predicted one to the
    /// transition heads.
    pub true_action_input: bool,
}

impl LossMask {
    pub const FULL: LossMask = LossMask {
        action: true,
        fwd: true,
        bwd: true,
        true_action_input: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub conv_filters: usize,
    /// One entry per convolution layer.
    pub conv_strides: Vec<usize>,
    pub kernel_size: usize,
    /// Encoder output width.
    pub latent_dim: usize,
    pub proj_hidden: usize,
    /// Projection / prediction output width.
    pub proj_dim: usize,
    /// Hidden width of the action, forward and backward heads.
    pub head_hidden: usize,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            conv_filters: 32,
            conv_strides: vec![2, 1, 1, 1],
            kernel_size: 3,
            latent_dim: 64,
            proj_hidden: 128,
            proj_dim: 64,
            head_hidden: 128,
            actor_hidden: 256,
            critic_hidden: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub critic_tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub alpha_beta1: f64,
    pub init_temperature: f64,
    /// Defaults to `-action_dim`.
    pub target_entropy: Option<f64>,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            critic_tau: 0.01,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            alpha_lr: 1e-3,
            alpha_beta1: 0.5,
            init_temperature: 0.1,
            target_entropy: None,
            log_std_min: -10.0,
            log_std_max: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub total_env_steps: usize,
    /// Uniform-random steps collected before any update.
    pub initial_collect: usize,
    /// RL updates per iteration.
    pub omega: usize,
    /// Target-branch momentum.
    pub epsilon: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub ablation: Ablation,
    pub detach_pseudo_action: bool,
    pub bit_lr: f64,
    /// Store episode ends as terminal. Off by default: the only episode end
    /// is the time limit, which the critic should bootstrap through.
    pub timeout_is_terminal: bool,
    /// Baseline runs have no representation objective, so the augmentation
    /// is applied to the critic's inputs instead (both views, independent
    /// draws). Representation-learning variants always feed raw frames to RL.
    pub baseline_rl_augmentation: bool,
    pub aug: AugmentationSpec,
    pub env: EnvConfig,
    pub train_background: BackgroundMode,
    pub eval_backgrounds: Vec<BackgroundMode>,
    pub network: NetworkConfig,
    pub sac: SacConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            total_env_steps: 100_000,
            initial_collect: 1000,
            omega: 2,
            epsilon: 0.05,
            batch_size: 128,
            replay_capacity: 100_000,
            eval_every: 2000,
            eval_episodes: 10,
            checkpoint_every: 0,
            ablation: Ablation::Full,
            detach_pseudo_action: false,
            bit_lr: 1e-3,
            timeout_is_terminal: false,
            baseline_rl_augmentation: true,
            aug: AugmentationSpec::default(),
            env: EnvConfig::default(),
            train_background: BackgroundMode::clean(),
            eval_backgrounds: default_eval_backgrounds(),
            network: NetworkConfig::default(),
            sac: SacConfig::default(),
        }
    }
}

pub fn default_eval_backgrounds() -> Vec<BackgroundMode> {
    BackgroundTier::ALL
        .iter()
        .map(|&t| BackgroundMode::new(t, 1000))
        .collect()
}

impl RunConfig {
    /// Desk-scale preset sized for single-core CPU runs: 32x32 frames, a
    /// two-layer 16-filter encoder and batch 32.
    pub fn smoke() -> Self {
        RunConfig {
            total_env_steps: 20_000,
            batch_size: 32,
            replay_capacity: 20_000,
            eval_every: 5000,
            env: EnvConfig {
                height: 32,
                width: 32,
                ..EnvConfig::default()
            },
            network: NetworkConfig {
                conv_filters: 16,
                conv_strides: vec![2, 2],
                ..NetworkConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Tiny network on 9x9 single frames for finite-difference checks.
    pub fn toy() -> Self {
        RunConfig {
            total_env_steps: 200,
            initial_collect: 50,
            batch_size: 2,
            replay_capacity: 200,
            eval_every: 0,
            eval_episodes: 1,
            env: EnvConfig {
                height: 9,
                width: 9,
                frame_stack: 1,
                horizon: 20,
                ..EnvConfig::default()
            },
            aug: AugmentationSpec {
                kind: AugmentationKind::None,
                ..AugmentationSpec::default()
            },
            network: NetworkConfig {
                conv_filters: 3,
                conv_strides: vec![2, 1],
                kernel_size: 3,
                latent_dim: 4,
                proj_hidden: 8,
                proj_dim: 4,
                head_hidden: 8,
                actor_hidden: 8,
                critic_hidden: 8,
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.aug.validate().map_err(|e| BitError::Config(e.to_string()))?;
        if self.omega < 1 {
            return Err(BitError::Config("omega must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(BitError::Config(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(BitError::Config("batch_size must be positive".into()));
        }
        if self.initial_collect < self.batch_size {
            return Err(BitError::Config(format!(
                "initial_collect {} must cover one batch of {}",
                self.initial_collect, self.batch_size
            )));
        }
        if self.replay_capacity < self.batch_size {
            return Err(BitError::Config("replay_capacity smaller than batch_size".into()));
        }
        let s = &self.sac;
        if !(0.0..1.0).contains(&s.gamma) {
            return Err(BitError::Config(format!("gamma {} outside [0, 1)", s.gamma)));
        }
        if !(s.critic_tau > 0.0 && s.critic_tau <= 1.0) {
            return Err(BitError::Config("critic_tau outside (0, 1]".into()));
        }
        if s.init_temperature <= 0.0 || s.log_std_min >= s.log_std_max {
            return Err(BitError::Config("invalid temperature or log-std bounds".into()));
        }
        let n = &self.network;
        if n.conv_strides.is_empty() || n.conv_strides.contains(&0) || n.kernel_size == 0 || n.conv_filters == 0 {
            return Err(BitError::Config(
                "encoder needs at least one conv layer with positive sizes".into(),
            ));
        }
        let mut size = self.env.height.min(self.env.width);
        for &stride in &n.conv_strides {
            if size < n.kernel_size {
                return Err(BitError::Config(format!(
                    "{}x{} frames too small for {} conv layers",
                    self.env.height,
                    self.env.width,
                    n.conv_strides.len()
                )));
            }
            size = (size - n.kernel_size) / stride + 1;
        }
        if [
            n.latent_dim,
            n.proj_dim,
            n.proj_hidden,
            n.head_hidden,
            n.actor_hidden,
            n.critic_hidden,
        ]
        .contains(&0)
        {
            return Err(BitError::Config("network widths must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Whether the RL update sees augmented frames.
    pub fn rl_augmented(&self) -> bool {
        !self.ablation.uses_bit() && self.baseline_rl_augmentation && self.aug.kind != AugmentationKind::None
    }

    pub fn target_entropy(&self) -> f64 {
        self.sac.target_entropy.unwrap_or(-(crate::env::ACTION_DIM as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::smoke().validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = RunConfig::smoke();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, back);
        let partial: RunConfig = serde_json::from_str(r#"{"omega": 3, "ablation": "no_bwd"}"#).unwrap();
        assert_eq!(partial.omega, 3);
        assert_eq!(partial.ablation, Ablation::NoBwd);
        assert_eq!(partial.epsilon, 0.05);
        assert!(serde_json::from_str::<RunConfig>(r#"{"omgea": 3}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let rejected = |edit: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            edit(&mut c);
            c.validate().is_err()
        };
        assert!(rejected(|c| c.omega = 0));
        assert!(rejected(|c| c.epsilon = 0.0));
        assert!(rejected(|c| c.env.height = 4));
    }

    #[test]
    fn ablation_masks() {
        assert_eq!(Ablation::Full.mask(), LossMask::FULL);
        let m = Ablation::NoAction.mask();
        assert!(!m.action && m.fwd && m.bwd && m.true_action_input);
        let m = Ablation::OnlyAction.mask();
        assert!(m.action && !m.fwd && !m.bwd);
        assert!(!Ablation::Baseline.uses_bit());
        assert_eq!("no-fwd".parse::<Ablation>().unwrap(), Ablation::NoFwd);
    }
}
