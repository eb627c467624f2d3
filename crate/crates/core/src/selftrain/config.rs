use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::losses::{LossKind, RobustLossConfig};
use crate::model::{HeadKind, ModelConfig};
use crate::uncertainty::SelectionMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Uncertainty-aware selection with the robust student objective.
    Sequst,
    /// Plain self-training: every pseudo label, cross-entropy, no consistency term.
    Sst,
    /// Teacher fine-tuning only.
    SupervisedOnly,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequst" => Ok(Self::Sequst),
            "sst" => Ok(Self::Sst),
            "supervised_only" => Ok(Self::SupervisedOnly),
            other => Err(format!("unknown mode {other:?} (expected sequst, sst or supervised_only)")),
        }
    }
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sequst => "sequst",
            Mode::Sst => "sst",
            Mode::SupervisedOnly => "supervised_only",
        }
    }
}

/// Every hyperparameter of a run, as one flat TOML table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: Mode,
    pub seed: u64,
    pub head: HeadKind,
    pub emb_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub embedding_scale: f64,
    pub learning_rate: f64,
    pub warmup_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs of supervised fine-tuning on the labeled set.
    pub teacher_epochs: usize,
    /// Epochs of student training per round.
    pub student_epochs: usize,
    pub t_passes: usize,
    pub tau: f64,
    pub lambda: f64,
    pub k_perturb: usize,
    pub rho: f64,
    pub selection: SelectionMode,
    pub loss: LossKind,
    pub stop_gradient: bool,
    /// Adds the labeled negative log-likelihood to the student objective.
    pub student_labeled: bool,
    pub max_iterations: usize,
    pub patience: usize,
    pub max_length: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sequst,
            seed: 42,
            head: HeadKind::Softmax,
            emb_dim: 32,
            hidden: 32,
            dropout: 0.1,
            embedding_scale: 0.1,
            learning_rate: 0.05,
            warmup_rate: 0.1,
            weight_decay: 0.01,
            batch_size: 4,
            teacher_epochs: 30,
            student_epochs: 4,
            t_passes: 20,
            tau: 10.0,
            lambda: 0.5,
            k_perturb: 3,
            rho: 0.5,
            selection: SelectionMode::Weighted,
            loss: LossKind::Phce,
            stop_gradient: true,
            student_labeled: false,
            max_iterations: 5,
            patience: 2,
            max_length: crate::data::DEFAULT_MAX_LENGTH,
        }
    }
}

fn invalid(field: &'static str, value: impl ToString, constraint: &'static str) -> TrainError {
    TrainError::Config {
        field,
        value: value.to_string(),
        constraint,
    }
}

impl TrainingConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Parse(e.message().to_owned()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            dropout: self.dropout,
            head: self.head,
            embedding_scale: self.embedding_scale,
        }
    }

    pub fn loss_config(&self) -> RobustLossConfig {
        RobustLossConfig {
            tau: self.tau,
            lambda: self.lambda,
            k_perturb: self.k_perturb,
            loss_kind: self.loss,
            stop_gradient: self.stop_gradient,
        }
    }

    /// Hard constraints; violations name the field.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau > 1.0) {
            return Err(invalid("tau", self.tau, "must satisfy tau > 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid("lambda", self.lambda, "must satisfy lambda >= 0"));
        }
        if self.k_perturb < 1 {
            return Err(invalid("k_perturb", self.k_perturb, "must satisfy k_perturb >= 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(invalid("rho", self.rho, "must lie in (0, 1]"));
        }
        if self.t_passes < 1 {
            return Err(invalid("t_passes", self.t_passes, "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout", self.dropout, "must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning_rate", self.learning_rate, "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.warmup_rate) {
            return Err(invalid("warmup_rate", self.warmup_rate, "must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", self.weight_decay, "must be >= 0"));
        }
        if self.batch_size < 1 {
            return Err(invalid("batch_size", self.batch_size, "must be at least 1"));
        }
        if self.emb_dim < 1 || self.hidden < 1 {
            return Err(invalid("hidden", self.hidden, "emb_dim and hidden must be positive"));
        }
        if self.max_length < 1 {
            return Err(invalid("max_length", self.max_length, "must be at least 1"));
        }
        Ok(())
    }

    /// Settings outside the customary search ranges.
    pub fn search_space_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, ok: bool, value: String, allowed: &str| {
            if !ok {
                out.push(format!("{name} = {value} is outside the usual range {allowed}"));
            }
        };
        let near = |v: f64, set: &[f64]| set.iter().any(|s| (v - s).abs() < 1e-12);
        check("batch_size", [1, 4, 8, 16].contains(&self.batch_size), self.batch_size.to_string(), "{1, 4, 8, 16}");
        check(
            "learning_rate",
            near(self.learning_rate, &[1e-5, 2e-5, 5e-5, 1e-4, 2e-4]),
            self.learning_rate.to_string(),
            "{1e-5, 2e-5, 5e-5, 1e-4, 2e-4}",
        );
        check("dropout", near(self.dropout, &[0.1, 0.3, 0.5]), self.dropout.to_string(), "{0.1, 0.3, 0.5}");
        check("t_passes", [5, 10, 15, 20].contains(&self.t_passes), self.t_passes.to_string(), "{5, 10, 15, 20}");
        check("warmup_rate", near(self.warmup_rate, &[0.1]), self.warmup_rate.to_string(), "{0.1}");
        check("max_length", self.max_length == 64, self.max_length.to_string(), "{64}");
        check("lambda", near(self.lambda, &[0.25, 0.5, 0.75, 1.0]), self.lambda.to_string(), "{0.25, 0.5, 0.75, 1.0}");
        check("k_perturb", (1..=5).contains(&self.k_perturb), self.k_perturb.to_string(), "{1, ..., 5}");
        check("tau", near(self.tau, &[10.0]), self.tau.to_string(), "{10}");
        out
    }

    /// Validates and logs every out-of-range setting.
    pub fn check(&self) -> Result<(), TrainError> {
        self.validate()?;
        for w in self.search_space_warnings() {
            log::warn!("{w}");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainingConfig {
            mode: Mode::Sst,
            head: HeadKind::Crf,
            rho: 0.25,
            ..Default::default()
        };
        let back = TrainingConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(TrainingConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = TrainingConfig::from_toml("tau = 5.0\nmode = \"supervised_only\"\n").unwrap();
        assert_eq!(cfg.tau, 5.0);
        assert_eq!(cfg.mode, Mode::SupervisedOnly);
        assert_eq!(cfg.k_perturb, 3);
        assert!(TrainingConfig::from_toml("unknown_key = 1").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = TrainingConfig { tau: 0.5, ..Default::default() };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("tau") && msg.contains("tau > 1"), "{msg}");
        assert!(TrainingConfig { rho: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn search_space() {
        let cfg = TrainingConfig {
            learning_rate: 1e-4,
            ..Default::default()
        };
        assert!(cfg.search_space_warnings().is_empty());
        let w = TrainingConfig::default().search_space_warnings();
        assert_eq!(w.len(), 1);
        assert!(w[0].starts_with("learning_rate"));
    }
}
