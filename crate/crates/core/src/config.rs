//! Strict JSON run configuration with the training recipe defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datahub::SyntheticTask;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalharness::ProtocolKind;
use crate::losses::{LossWeights, TeacherRule};
use crate::promptbank::{Regime, TransferRule};
use crate::rng::derive_seed;
use crate::selection::SelectionConfig;
use crate::trainer::{Objective, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankSection {
    /// Prompts per class.
    #[serde(rename = "N")]
    pub n: usize,
    /// Context tokens per prompt.
    #[serde(rename = "M")]
    pub m: usize,
}

impl Default for BankSection {
    fn default() -> Self {
        Self { n: 10, m: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub teacher: TeacherRule,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            teacher: TeacherRule::default(),
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub regime: Regime,
    /// Generator settings for `gen-data`.
    pub spec: SyntheticTask,
    /// Dataset bundle; `--data` overrides it.
    pub bundle: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            regime: Regime::Synthetic,
            spec: SyntheticTask::default(),
            bundle: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Protocol the bank is trained for: `b2n` trains on the base half only.
    pub protocol: ProtocolKind,
    /// Prompt rule for new classes in base-to-new evaluation.
    pub transfer: TransferRule,
    /// Extra OOD target bundles, evaluated after `--data`.
    pub targets: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every consumer derives its own stream from it.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub bank: BankSection,
    pub selection: SelectionConfig,
    pub loss: LossSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

/// Per-consumer seeds split from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub augment: u64,
    pub shuffle: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.bank.n == 0 {
            return Err(Error::Config("bank.N must be >= 1".into()));
        }
        self.selection.validate()?;
        self.loss.weights().validate()?;
        self.train.validate()?;
        self.data.spec.validate()?;
        if self.data.spec.input_dim != self.encoder.d_img {
            return Err(Error::Config(format!(
                "data.spec.input_dim ({}) must equal encoder.d_img ({})",
                self.data.spec.input_dim, self.encoder.d_img
            )));
        }
        if self.data.spec.attributes_per_class() != self.bank.n {
            return Err(Error::Config(format!(
                "data.spec has {} attributes per class but bank.N is {}",
                self.data.spec.attributes_per_class(),
                self.bank.n
            )));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            data: derive_seed(self.seed, "data", &[]),
            init: derive_seed(self.seed, "init", &[]),
            augment: derive_seed(self.seed, "augment", &[]),
            shuffle: derive_seed(self.seed, "shuffle", &[]),
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            selection: self.selection,
            weights: self.loss.weights(),
            teacher: self.loss.teacher,
        }
    }

    /// Same config with `n` prompts per class, keeping the generator in step.
    pub fn with_prompt_count(&self, n: usize) -> Self {
        let mut c = self.clone();
        c.bank.n = n;
        c.data.spec = c.data.spec.with_prompt_count(n);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_recipe_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!((c.bank.n, c.bank.m), (10, 4));
        assert_eq!((c.loss.lambda1, c.loss.lambda2, c.loss.lambda3), (1.0, 0.5, 1.0));
        assert_eq!((c.train.lr, c.train.batch, c.train.shots, c.train.epochs), (2e-3, 32, 16, 50));
        assert_eq!((c.train.warmup.epochs, c.train.warmup.lr), (1, 1e-5));
        assert_eq!(c.data.spec.num_classes, 8);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"bank": {"N": 5, "K": 2}}"#,
            r#"{"train": {"warmup": {"epoch": 1}}}"#,
            r#"{"data": {"spec": {"classes": 3}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        assert!(RunConfig::from_json(r#"{"bank": {"N": 5}}"#).is_err());
        let ok = RunConfig::default().with_prompt_count(5);
        RunConfig::from_json(&ok.to_json().unwrap()).unwrap();
        assert!(RunConfig::from_json(r#"{"selection": {"beta": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"encoder": {"d_img": 32}}"#).is_err());
    }

    #[test]
    fn round_trip_and_seed_split() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.selection.strategy = "top2".parse().unwrap();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        let s = c.seeds();
        let all = [s.data, s.init, s.augment, s.shuffle];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(all[i], all[j]);
            }
        }
        c.seed = 8;
        assert_ne!(c.seeds().data, s.data);
    }
}
