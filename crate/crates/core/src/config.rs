//! Run configuration: a TOML file of `key = value` lines grouped in sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierDims, PretrainOptions};
use crate::error::{Error, Result};
use crate::generator::{Ablation, GeneratorDims};
use crate::losses::{LossOptions, LossWeights, TrainOptions};

pub const SEED_ENV: &str = "RACOLN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Holds `<split>.<pos|neg>.txt`.
    pub data_dir: PathBuf,
    /// Checkpoints, vocabulary, logs and reports.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            work_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub emb: usize,
    /// Per direction.
    pub enc_hidden: usize,
    pub cln: usize,
    pub dec_hidden: usize,
    pub cln_eps: f64,
    /// Attention softmax temperature.
    pub tau: f64,
    /// Per-direction hidden size of the marker and both classifiers.
    pub classifier_hidden: usize,
    pub min_freq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            emb: 128,
            enc_hidden: 500,
            cln: 200,
            dec_hidden: 700,
            cln_eps: 1e-5,
            tau: 1.0,
            classifier_hidden: 500,
            min_freq: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda_self: f64,
    pub lambda_cycle: f64,
    pub lambda_content: f64,
    pub lambda_style: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub detach_content_target: bool,
    pub precision: Precision,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            lr: 5e-4,
            lambda_self: w.self_recon,
            lambda_cycle: w.cycle,
            lambda_content: w.content,
            lambda_style: w.style,
            batch_size: 64,
            epochs: 20,
            max_len: 32,
            seed: 1,
            clip_norm: 5.0,
            detach_content_target: false,
            precision: Precision::F32,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 5e-4,
            max_epochs: 10,
            patience: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub no_reverse_attention: bool,
    pub no_stylizer: bool,
    pub no_content_loss: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    /// Reduced dimensions sized for a single CPU core and the bundled
    /// synthetic corpus.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig {
                emb: 32,
                enc_hidden: 48,
                cln: 32,
                dec_hidden: 96,
                classifier_hidden: 24,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 8,
                epochs: 20,
                detach_content_target: true,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Reads a config file and applies the `RACOLN_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.train.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let dims = [
            ("model.emb", m.emb),
            ("model.enc_hidden", m.enc_hidden),
            ("model.cln", m.cln),
            ("model.dec_hidden", m.dec_hidden),
            ("model.classifier_hidden", m.classifier_hidden),
            ("model.min_freq", m.min_freq),
            ("train.batch_size", self.train.batch_size),
            ("train.max_len", self.train.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(m.tau > 0.0 && m.cln_eps > 0.0) {
            return Err(Error::Config("model.tau and model.cln_eps must be positive".into()));
        }
        if !(self.train.lr > 0.0 && self.pretrain.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.train.clip_norm < 0.0 {
            return Err(Error::Config("train.clip_norm must be non-negative".into()));
        }
        self.weights()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Loss weights with the content-loss ablation applied.
    pub fn weights(&self) -> LossWeights {
        let t = &self.train;
        LossWeights {
            self_recon: t.lambda_self,
            cycle: t.lambda_cycle,
            content: if self.ablation.no_content_loss { 0.0 } else { t.lambda_content },
            style: t.lambda_style,
        }
    }

    pub fn generator_dims(&self, vocab: usize) -> GeneratorDims {
        let m = &self.model;
        GeneratorDims {
            vocab,
            emb: m.emb,
            enc_hidden: m.enc_hidden,
            cln: m.cln,
            dec_hidden: m.dec_hidden,
            cln_eps: m.cln_eps,
        }
    }

    pub fn classifier_dims(&self, vocab: usize) -> ClassifierDims {
        let m = &self.model;
        ClassifierDims {
            vocab,
            emb: m.emb,
            hidden: m.classifier_hidden,
            att: 2 * m.classifier_hidden,
            tau: m.tau,
        }
    }

    pub fn generator_ablation(&self) -> Ablation {
        Ablation {
            no_reverse_attention: self.ablation.no_reverse_attention,
            no_stylizer: self.ablation.no_stylizer,
        }
    }

    pub fn pretrain_options(&self, seed: u64) -> PretrainOptions {
        PretrainOptions {
            lr: self.pretrain.lr,
            batch_size: self.train.batch_size,
            max_epochs: self.pretrain.max_epochs,
            patience: self.pretrain.patience,
            max_len: self.train.max_len,
            seed,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.train;
        TrainOptions {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            max_len: t.max_len,
            seed: t.seed,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            weights: self.weights(),
            loss: LossOptions {
                detach_content_target: t.detach_content_target,
            },
            log_every: t.log_every,
            log_path: Some(self.paths.work_dir.join("train.log")),
            checkpoint_dir: Some(self.paths.work_dir.join("checkpoints")),
        }
    }
}
