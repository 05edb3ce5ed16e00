//! Hyperparameters. Defaults follow the published training recipe; epoch
//! counts are not published and default to values that converge on the
//! synthetic benchmark.

use serde::{Deserialize, Serialize};

use crate::embedstore::SampleStrategy;
use crate::encoder::Temperature;
use crate::error::{MpaError, Result};

/// Optimizer settings for one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub momentum: f64,
    pub seed: u64,
    pub temperature: Temperature,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(MpaError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(MpaError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MpaError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Temperature::new(self.temperature.value, self.temperature.trainable)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Params {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for Stage1Params {
    fn default() -> Self {
        Stage1Params { lr: 0.003, epochs: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Params {
    pub lr: f64,
    pub epochs: usize,
    pub alpha: f64,
    /// `d_I`
    pub latent_dim: usize,
    /// Width of the back-projection hidden layer.
    pub hidden: usize,
    /// Drop the L1 agreement term (`α = 0`).
    pub no_l1: bool,
    /// Drop the reconstruction term.
    pub no_ae: bool,
    /// One autoencoder for both prompt pieces.
    pub single_ae: bool,
    /// Drop the pseudo-label classification term.
    pub no_cls: bool,
    /// Also update the stage-1 prompts.
    pub finetune_prompts: bool,
}

impl Default for Stage2Params {
    fn default() -> Self {
        Stage2Params {
            lr: 0.005,
            epochs: 30,
            alpha: 500.0,
            latent_dim: 150,
            hidden: 384,
            no_l1: false,
            no_ae: false,
            single_ae: false,
            no_cls: false,
            finetune_prompts: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstParams {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for LstParams {
    fn default() -> Self {
        LstParams { lr: 0.0005, epochs: 30 }
    }
}

/// Per-class subset sampling applied before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub per_class_cap: usize,
    pub strategy: SampleStrategy,
    /// Also subsample the target (and unseen) domains' pseudo-label pools.
    #[serde(default)]
    pub include_target: bool,
}

/// Every tunable knob of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub seed: u64,
    pub m1: usize,
    pub m2: usize,
    pub tau: f64,
    pub temperature: f64,
    pub trainable_temperature: bool,
    pub init_scale: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub workers: usize,
    pub stage1: Stage1Params,
    pub stage2: Stage2Params,
    pub lst: LstParams,
    pub sampling: Option<SamplingParams>,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            seed: 0,
            m1: 16,
            m2: 16,
            tau: 0.4,
            temperature: 0.01,
            trainable_temperature: false,
            init_scale: 0.02,
            batch_size: 32,
            momentum: 0.0,
            workers: 1,
            stage1: Stage1Params::default(),
            stage2: Stage2Params::default(),
            lst: LstParams::default(),
            sampling: None,
        }
    }
}

impl Hyperparameters {
    pub fn temperature(&self) -> Result<Temperature> {
        Temperature::new(self.temperature, self.trainable_temperature)
    }

    fn train(&self, lr: f64, epochs: usize, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: lr,
            batch_size: self.batch_size,
            epochs,
            momentum: self.momentum,
            seed,
            temperature: self.temperature()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stage1_config(&self) -> Result<TrainConfig> {
        self.train(self.stage1.lr, self.stage1.epochs, self.seed)
    }

    pub fn stage2_config(&self) -> Result<TrainConfig> {
        self.train(self.stage2.lr, self.stage2.epochs, self.seed)
    }

    pub fn lst_config(&self) -> Result<TrainConfig> {
        self.train(self.lst.lr, self.lst.epochs, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m1 == 0 || self.m2 == 0 {
            return Err(MpaError::Config("m1 and m2 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(MpaError::Config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        if !(self.init_scale > 0.0) {
            return Err(MpaError::Config("init_scale must be positive".into()));
        }
        if self.stage2.latent_dim == 0 || self.stage2.hidden == 0 {
            return Err(MpaError::Config("latent_dim and hidden must be positive".into()));
        }
        if self.stage2.alpha < 0.0 {
            return Err(MpaError::Config("alpha must be non-negative".into()));
        }
        if let Some(s) = &self.sampling {
            if s.per_class_cap == 0 {
                return Err(MpaError::Config("sampling cap must be positive".into()));
            }
        }
        self.stage1_config()?;
        self.stage2_config()?;
        self.lst_config()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_recipe() {
        let h = Hyperparameters::default();
        assert_eq!((h.m1, h.m2), (16, 16));
        assert_eq!(h.tau, 0.4);
        assert_eq!(h.batch_size, 32);
        assert_eq!(h.stage1.lr, 0.003);
        assert_eq!(h.stage2.lr, 0.005);
        assert_eq!(h.lst.lr, 0.0005);
        assert_eq!(h.stage2.alpha, 500.0);
        assert_eq!(h.stage2.hidden, 384);
        assert!(h.validate().is_ok());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let h: Hyperparameters = toml::from_str("tau = 0.5\n[stage2]\nno_l1 = true\n").unwrap();
        assert_eq!(h.tau, 0.5);
        assert!(h.stage2.no_l1);
        assert_eq!(h.stage2.alpha, 500.0);
        assert!(toml::from_str::<Hyperparameters>("bogus = 1").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let h = Hyperparameters {
            batch_size: 0,
            ..Default::default()
        };
        assert!(h.validate().is_err());
        let h = Hyperparameters {
            tau: 1.0,
            ..Default::default()
        };
        assert!(h.validate().is_err());
    }
}
