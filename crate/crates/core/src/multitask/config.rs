use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::GramForm;

/// Values searched for both β and γ.
pub const LOSS_WEIGHT_GRID: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5];

/// Named `(β, γ)` settings for task combinations.
pub const PRESETS: [(&str, f64, f64); 4] = [
    ("qqp_snli", 0.01, 0.05),
    ("snli_mnli", 0.005, 0.001),
    ("qqp_allnli", 0.01, 0.05),
    ("qqp_snli_mnli", 0.005, 0.001),
];

pub fn preset(name: &str) -> Option<(f64, f64)> {
    PRESETS.iter().find(|(n, ..)| *n == name).map(|&(_, beta, gamma)| (beta, gamma))
}

/// How the discriminator and the shared encoder play the min-max game.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversarial {
    /// Shared-private without a discriminator.
    Off,
    /// One pass with the discriminator behind a gradient-reversal node.
    #[default]
    Reversal,
    /// Separate discriminator update on detached shared embeddings, then an
    /// encoder update against the frozen discriminator.
    Alternating,
}

impl Adversarial {
    pub fn is_on(self) -> bool {
        self != Adversarial::Off
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lr0: f64,
    pub lr_divisor: f64,
    pub lr_decay: f64,
    pub stop_threshold: f64,
    pub batch_size: usize,
    pub adversarial: Adversarial,
    pub diff_form: GramForm,
    pub seed: u64,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            gamma: 0.05,
            lr0: 0.1,
            lr_divisor: 5.0,
            lr_decay: 0.99,
            stop_threshold: 1e-5,
            batch_size: 128,
            adversarial: Adversarial::Reversal,
            diff_form: GramForm::Timestep,
            seed: 0,
            max_epochs: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.beta) {
            return Err(Error::config("beta", "must be finite and >= 0"));
        }
        if !nonneg(self.gamma) {
            return Err(Error::config("gamma", "must be finite and >= 0"));
        }
        if !(self.stop_threshold.is_finite() && self.stop_threshold >= 0.0) {
            return Err(Error::config("stop_threshold", "must be finite and >= 0"));
        }
        if !(self.lr0.is_finite() && self.lr0 > self.stop_threshold) {
            return Err(Error::config("lr0", "must exceed stop_threshold"));
        }
        if !(self.lr_divisor.is_finite() && self.lr_divisor >= 1.0) {
            return Err(Error::config("lr_divisor", "must be >= 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay", "must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be >= 1"));
        }
        Ok(())
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (beta, gamma) = preset(name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
            Error::config("beta_gamma", format!("unknown preset {name:?}; expected one of {names:?}"))
        })?;
        self.beta = beta;
        self.gamma = gamma;
        Ok(())
    }
}

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// LSTM hidden size `d`; embeddings are `2d` wide.
    pub hidden_dim: usize,
    /// Hidden units of each task classifier; 0 makes it linear.
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 2048,
            classifier_hidden: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be >= 1"));
        }
        Ok(())
    }
}

/// What the schedule did at an epoch boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrEvent {
    Start,
    Decay,
    Divide,
}

/// Per-epoch learning-rate control. Every epoch after the first starts by
/// multiplying the rate by the decay factor; after the epoch's dev
/// evaluation the rate is divided by the divisor if mean dev accuracy fell.
/// Training stops once the rate is below the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    lr: f64,
    decay: f64,
    divisor: f64,
    threshold: f64,
    epochs_started: usize,
    prev_dev: Option<f64>,
    history: Vec<(LrEvent, f64)>,
}

impl LrSchedule {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.lr0,
            decay: config.lr_decay,
            divisor: config.lr_divisor,
            threshold: config.stop_threshold,
            epochs_started: 0,
            prev_dev: None,
            history: vec![(LrEvent::Start, config.lr0)],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Rate to train the next epoch with, or `None` if it fell below the
    /// threshold.
    pub fn begin_epoch(&mut self) -> Option<f64> {
        if self.epochs_started > 0 {
            self.lr *= self.decay;
            self.history.push((LrEvent::Decay, self.lr));
        }
        if self.stopped() {
            return None;
        }
        self.epochs_started += 1;
        Some(self.lr)
    }

    /// Records the epoch's mean dev accuracy; returns true if the rate was divided.
    pub fn end_epoch(&mut self, mean_dev: f64) -> bool {
        let dropped = self.prev_dev.is_some_and(|p| mean_dev < p);
        if dropped {
            self.lr /= self.divisor;
            self.history.push((LrEvent::Divide, self.lr));
        }
        self.prev_dev = Some(mean_dev);
        dropped
    }

    pub fn stopped(&self) -> bool {
        self.lr < self.threshold
    }

    pub fn history(&self) -> &[(LrEvent, f64)] {
        &self.history
    }

    /// Rates in the order they were set.
    pub fn trajectory(&self) -> Vec<f64> {
        self.history.iter().map(|&(_, lr)| lr).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_grid() {
        assert_eq!(preset("qqp_snli"), Some((0.01, 0.05)));
        assert_eq!(preset("snli_mnli"), Some((0.005, 0.001)));
        assert_eq!(preset("nope"), None);
        let mut c = TrainConfig::default();
        c.apply_preset("snli_mnli").unwrap();
        assert_eq!((c.beta, c.gamma), (0.005, 0.001));
        assert!(c.apply_preset("x").unwrap_err().is_validation());
        for (_, b, g) in PRESETS {
            assert!(LOSS_WEIGHT_GRID.contains(&b) && LOSS_WEIGHT_GRID.contains(&g));
        }
    }

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lr0, c.lr_divisor, c.lr_decay, c.batch_size), (0.1, 5.0, 0.99, 128));
        let bad = TrainConfig {
            lr0: 1e-6,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            beta: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deny_unknown_config_fields() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"betta": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"beta": 0.1, "adversarial": "off"}"#).unwrap();
        assert_eq!(c.adversarial, Adversarial::Off);
        assert_eq!(c.gamma, 0.05);
    }

    #[test]
    fn scripted_dev_trace() {
        let mut s = LrSchedule::new(&TrainConfig::default());
        assert_eq!(s.begin_epoch(), Some(0.1));
        assert!(!s.end_epoch(0.70));
        let lr = s.begin_epoch().unwrap();
        assert!((lr - 0.099).abs() < 1e-15);
        assert!(s.end_epoch(0.65));
        assert!((s.lr() - 0.0198).abs() < 1e-15);
        let t = s.trajectory();
        assert_eq!(t.len(), 3);
    }

    #[test]
    fn terminates_and_never_increases() {
        let mut s = LrSchedule::new(&TrainConfig::default());
        let mut epochs = 0;
        let mut dev = 1.0;
        while s.begin_epoch().is_some() {
            epochs += 1;
            dev -= 0.01;
            s.end_epoch(dev);
            assert!(epochs < 100);
        }
        assert!(s.stopped());
        assert!(s.lr() < 1e-5);
        let t = s.trajectory();
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }
}
