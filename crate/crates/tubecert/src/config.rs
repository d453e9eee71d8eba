//! Run configuration: a flat TOML table whose keys are the `RunConfig` field
//! names. Missing keys take per-environment defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tubecert_core::certifier::CertifierConfig;
use tubecert_core::dynamics::{default_hidden, TrainConfig};
use tubecert_core::envs::EnvKind;
use tubecert_core::learner::LearnerConfig;
use tubecert_core::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub initial_steps: usize,

    pub ensemble_size: usize,
    pub model_hidden: Vec<usize>,
    pub model_epochs: usize,
    pub model_batch_size: usize,
    pub model_lr: f64,
    pub use_prior: bool,
    pub prior_offset: f64,

    /// Disabling certification executes the learner's actions directly.
    pub certify: bool,
    pub horizon: usize,
    pub delay: usize,
    pub feedback_fill: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub rollout_budget: usize,
    pub tolerance: f64,
    pub soft_penalty: f64,
    pub warm_start: bool,

    pub actor_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub entropy_weight: f64,
    pub learner_batch_size: usize,
    pub real_ratio: f64,
    /// Gradient steps per block of `update_every` environment steps.
    pub policy_updates: usize,
    /// Environment steps between blocks of learner updates.
    pub update_every: usize,
    /// Rollouts per batch; a batch follows each ensemble retrain.
    pub model_rollouts: usize,
    /// Environment steps between extra rollout batches within an epoch; 0 disables them.
    pub rollout_every: usize,
    pub model_horizon: usize,
    /// Synthetic store capacity in epochs' worth of rollout batches.
    pub rollout_retain: usize,
    pub pretrain_epochs: usize,
    /// Final fraction of epochs over which exploration anneals to zero.
    pub anneal_fraction: f64,
    pub disturbance_scale: f64,

    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn for_env(env: EnvKind) -> Self {
        let learner = LearnerConfig::default();
        let (epochs, batch, rollouts, updates, model_horizon, real_ratio) = match env {
            EnvKind::Pendulum => (200, 256, 400, 10, 5, 0.1),
            EnvKind::CartPole => (50, 256, 400, 5, 1, 0.1),
            EnvKind::TwoLinkArm => (50, 512, 200, 20, 3, 0.1),
            EnvKind::Drone => (50, 512, 400, 20, 1, 1.0),
        };
        let (horizon, delay) = match env {
            EnvKind::Pendulum => (5, 10),
            EnvKind::CartPole => (5, 20),
            EnvKind::TwoLinkArm => (4, 10),
            EnvKind::Drone => (4, 10),
        };
        Self {
            env,
            seed: 0,
            epochs,
            steps_per_epoch: 400,
            initial_steps: 8000,
            ensemble_size: 5,
            model_hidden: default_hidden(env).to_vec(),
            model_epochs: 20,
            model_batch_size: batch,
            model_lr: 1e-3,
            use_prior: true,
            prior_offset: 0.2,
            certify: true,
            horizon,
            delay,
            feedback_fill: 0.5,
            max_outer_iterations: 12,
            max_inner_iterations: 60,
            rollout_budget: 5000,
            tolerance: 1e-6,
            soft_penalty: 1e4,
            warm_start: true,
            actor_hidden: learner.hidden,
            actor_lr: learner.actor_lr,
            critic_lr: learner.critic_lr,
            gamma: learner.gamma,
            tau: learner.tau,
            entropy_weight: learner.entropy_weight,
            learner_batch_size: batch,
            real_ratio,
            policy_updates: updates,
            update_every: 1,
            model_rollouts: rollouts,
            rollout_every: 10,
            model_horizon,
            rollout_retain: 5,
            pretrain_epochs: 20,
            anneal_fraction: 0.2,
            disturbance_scale: 1.0,
            out_dir: PathBuf::from("runs").join(env.name()),
        }
    }

    /// Parses a flat TOML table; `env` selects the defaults the other keys override.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let env = match table.get("env") {
            Some(toml::Value::String(s)) => s
                .parse::<EnvKind>()
                .map_err(|e| ConfigError::Invalid { key: "env", reason: e.to_string() })?,
            Some(_) => {
                return Err(ConfigError::Invalid {
                    key: "env",
                    reason: "expected a string".into(),
                })
            }
            None => EnvKind::Pendulum,
        };
        let defaults = Self::for_env(env);
        let mut merged = toml::Table::try_from(&defaults).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (k, v) in table {
            if !merged.contains_key(&k) {
                return Err(ConfigError::UnknownKey(k));
            }
            let v = match (&merged[&k], v) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            merged.insert(k, v);
        }
        merged.insert("env".into(), toml::Value::String(env.name().into()));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config fields are TOML-representable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check(ok: bool, key: &'static str, reason: &str) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid { key, reason: reason.into() })
            }
        }
        let pos_layers = |v: &[usize]| !v.is_empty() && v.iter().all(|&w| w > 0);
        check(self.epochs >= 1, "epochs", "must be at least 1")?;
        check(self.steps_per_epoch >= 1, "steps_per_epoch", "must be at least 1")?;
        check(
            self.initial_steps >= 2 * self.model_batch_size.max(1),
            "initial_steps",
            "must cover two model minibatches",
        )?;
        check((1..=50).contains(&self.ensemble_size), "ensemble_size", "must lie in [1, 50]")?;
        check(pos_layers(&self.model_hidden), "model_hidden", "needs positive layer widths")?;
        check(self.model_epochs >= 1, "model_epochs", "must be at least 1")?;
        check(self.model_batch_size >= 1, "model_batch_size", "must be positive")?;
        check(self.model_lr > 0.0 && self.model_lr < 1.0, "model_lr", "must lie in (0, 1)")?;
        check((0.0..=1.0).contains(&self.prior_offset), "prior_offset", "must lie in [0, 1]")?;
        check((1..=50).contains(&self.horizon), "horizon", "must lie in [1, 50]")?;
        check(self.delay <= 1000, "delay", "must be at most 1000")?;
        check(self.feedback_fill.is_finite(), "feedback_fill", "must be finite")?;
        check(self.max_outer_iterations >= 1, "max_outer_iterations", "must be at least 1")?;
        check(self.max_inner_iterations >= 1, "max_inner_iterations", "must be at least 1")?;
        check(self.rollout_budget >= 1, "rollout_budget", "must be at least 1")?;
        check(self.tolerance > 0.0 && self.tolerance < 1e-2, "tolerance", "must lie in (0, 1e-2)")?;
        check(self.soft_penalty > 0.0, "soft_penalty", "must be positive")?;
        check(pos_layers(&self.actor_hidden), "actor_hidden", "needs positive layer widths")?;
        check(self.learner_batch_size >= 1, "learner_batch_size", "must be positive")?;
        check(self.update_every >= 1, "update_every", "must be at least 1")?;
        check(self.model_horizon >= 1, "model_horizon", "must be at least 1")?;
        check(self.rollout_retain >= 1, "rollout_retain", "must be at least 1")?;
        check((0.0..=1.0).contains(&self.anneal_fraction), "anneal_fraction", "must lie in [0, 1]")?;
        check(
            self.disturbance_scale >= 0.0 && self.disturbance_scale.is_finite(),
            "disturbance_scale",
            "must be non-negative",
        )?;
        self.learner()
            .validate()
            .map_err(|e| ConfigError::Invalid { key: "learner", reason: e.to_string() })?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding, excluding `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Rollout batches generated per epoch.
    pub fn rollout_batches(&self) -> usize {
        match self.rollout_every {
            0 => 1,
            k => 1 + (self.steps_per_epoch - 1) / k,
        }
    }

    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            hidden: self.actor_hidden.clone(),
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            gamma: self.gamma,
            tau: self.tau,
            entropy_weight: self.entropy_weight,
            batch_size: self.learner_batch_size,
            real_ratio: self.real_ratio,
        }
    }

    pub fn certifier(&self, n_x: usize, n_u: usize) -> CertifierConfig {
        let mut c = CertifierConfig::new(self.horizon, Matrix::from_element(n_u, n_x, self.feedback_fill));
        c.max_outer_iterations = self.max_outer_iterations;
        c.max_inner_iterations = self.max_inner_iterations;
        c.rollout_budget = self.rollout_budget;
        c.tolerance = self.tolerance;
        c.soft_penalty = self.soft_penalty;
        c.warm_start = self.warm_start;
        c.infeasible_threshold = self.horizon;
        c
    }

    pub fn model_training(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.model_epochs,
            batch_size: self.model_batch_size,
            learning_rate: self.model_lr,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_environment() {
        let c = RunConfig::from_toml_str("env = \"cartpole\"\nseed = 3\n").unwrap();
        assert_eq!(c.env, EnvKind::CartPole);
        assert_eq!(c.seed, 3);
        assert_eq!(c.policy_updates, 5);
        assert_eq!(c.model_horizon, 1);
        assert_eq!(c.feedback_fill, 0.5);
    }

    #[test]
    fn integer_literals_fill_float_keys() {
        let c = RunConfig::from_toml_str("prior_offset = 0\nsoft_penalty = 100\n").unwrap();
        assert_eq!(c.prior_offset, 0.0);
        assert_eq!(c.soft_penalty, 100.0);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_ranges() {
        assert!(matches!(RunConfig::from_toml_str("horizn = 5"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(
            RunConfig::from_toml_str("horizon = 0"),
            Err(ConfigError::Invalid { key: "horizon", .. })
        ));
        assert!(matches!(
            RunConfig::from_toml_str("env = \"submarine\""),
            Err(ConfigError::Invalid { key: "env", .. })
        ));
        assert!(RunConfig::from_toml_str("gamma = 1.5").is_err());
        assert!(RunConfig::from_toml_str("horizon = \"five\"").is_err());
    }

    #[test]
    fn rollout_batches_per_epoch() {
        let mut c = RunConfig::for_env(EnvKind::Pendulum);
        c.steps_per_epoch = 400;
        c.rollout_every = 0;
        assert_eq!(c.rollout_batches(), 1);
        c.rollout_every = 10;
        assert_eq!(c.rollout_batches(), 40);
        c.rollout_every = 7;
        assert_eq!(c.rollout_batches(), 58);
    }

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig::for_env(EnvKind::Drone);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        let mut d = c.clone();
        d.out_dir = PathBuf::from("elsewhere");
        assert_eq!(d.hash(), c.hash());
        d.seed += 1;
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }
}
