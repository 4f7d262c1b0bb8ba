//! The run-config file: TOML with `[train]`, `[loss]`, `[data]` and
//! `[output]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use patchlab::loss::{LossConfig, LossVariant, SignConvention};
use patchlab::net::{NormScheme, Scale};
use patchlab::train::{LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainSection,
    pub loss: LossSection,
    pub data: DataSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_identities: usize,
    pub learning_rate: f64,
    /// `constant` or `linear-decay`
    pub lr_schedule: String,
    pub seed: u64,
    /// `1/4`, `1/2` or `1`
    pub scale: String,
    /// `frn`, `bn` or `in`
    pub norm: String,
    pub checkpoint_every: usize,
    pub validation: bool,
    pub frozen_layers: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_after_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// `hybrid`, `pure-s`, `pure-d`, `loss-a` or `loss-b`
    pub variant: String,
    pub alpha: f64,
    pub margin: f64,
    pub gamma_reg: f64,
    pub m_a: f64,
    pub m_b1: f64,
    pub m_b2: f64,
    pub margin_pure_s: f64,
    pub margin_pure_d: f64,
    /// `printed` or `corrected`
    pub sign: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `synthetic` or `ubc`
    pub source: String,
    /// Directory of a UBC-format dataset (`source = "ubc"`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub identities: usize,
    pub patches_per_identity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Value width in bits: 32 (training speed) or 64 (verification, determinism).
    pub precision: u32,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile::from_train_config(&TrainConfig::default())
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        RunConfigFile::default().train
    }
}

impl Default for LossSection {
    fn default() -> Self {
        RunConfigFile::default().loss
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: "synthetic".into(),
            path: None,
            identities: 4000,
            patches_per_identity: 3,
        }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            precision: 32,
        }
    }
}

impl RunConfigFile {
    pub fn from_train_config(c: &TrainConfig) -> Self {
        let l = &c.loss;
        RunConfigFile {
            train: TrainSection {
                epochs: c.epochs,
                batch_identities: c.batch_identities,
                learning_rate: c.learning_rate,
                lr_schedule: c.lr_schedule.name().into(),
                seed: c.seed,
                scale: c.scale.name().into(),
                norm: c.norm.name().into(),
                checkpoint_every: c.checkpoint_every,
                validation: c.validation,
                frozen_layers: c.frozen_layers.clone(),
                grad_clip: c.grad_clip,
                stop_after_step: c.stop_after_step,
            },
            loss: LossSection {
                variant: l.variant.name().into(),
                alpha: l.alpha,
                margin: l.margin,
                gamma_reg: l.gamma_reg,
                m_a: l.m_a,
                m_b1: l.m_b1,
                m_b2: l.m_b2,
                margin_pure_s: l.margin_pure_s,
                margin_pure_d: l.margin_pure_d,
                sign: l.sign.name().into(),
            },
            data: DataSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.train_config()?;
        cfg.check_data()?;
        if !matches!(cfg.output.precision, 32 | 64) {
            return Err(CliError::Config(format!(
                "output.precision must be 32 or 64, got {}",
                cfg.output.precision
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config sections serialize")
    }

    /// The typed training configuration this file describes.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let l = &self.loss;
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_identities: t.batch_identities,
            learning_rate: t.learning_rate,
            lr_schedule: LrSchedule::parse(&t.lr_schedule)?,
            seed: t.seed,
            scale: Scale::parse(&t.scale)?,
            norm: NormScheme::parse(&t.norm)?,
            loss: LossConfig {
                alpha: l.alpha,
                margin: l.margin,
                gamma_reg: l.gamma_reg,
                variant: LossVariant::parse(&l.variant)?,
                m_a: l.m_a,
                m_b1: l.m_b1,
                m_b2: l.m_b2,
                margin_pure_s: l.margin_pure_s,
                margin_pure_d: l.margin_pure_d,
                sign: SignConvention::parse(&l.sign)?,
            },
            checkpoint_every: t.checkpoint_every,
            validation: t.validation,
            frozen_layers: t.frozen_layers.clone(),
            grad_clip: t.grad_clip,
            stop_after_step: t.stop_after_step,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn check_data(&self) -> Result<(), CliError> {
        let d = &self.data;
        match d.source.as_str() {
            "synthetic" => {
                if d.identities < 2 || d.patches_per_identity < 2 {
                    return Err(CliError::Config(
                        "synthetic data needs >= 2 identities and >= 2 patches per identity".into(),
                    ));
                }
                Ok(())
            }
            "ubc" if d.path.is_some() => Ok(()),
            "ubc" => Err(CliError::Config("data.source = \"ubc\" needs data.path".into())),
            other => Err(CliError::Config(format!(
                "data.source must be \"synthetic\" or \"ubc\", got {other:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfigFile::default();
        let text = c.to_toml();
        let back = RunConfigFile::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.train_config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfigFile::parse("[train]\nepochs = 3\n[loss]\nvariant = \"pure-d\"\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_identities, 128);
        assert_eq!(c.loss.variant, "pure-d");
        assert_eq!(RunConfigFile::parse("").unwrap(), RunConfigFile::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[train]\nepoch = 3\n", "[optim]\nlr = 1\n", "seed = 1\n"] {
            assert!(matches!(RunConfigFile::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "[train]\nscale = \"1/3\"\n",
            "[train]\nepochs = 0\n",
            "[loss]\nsign = \"inverted\"\n",
            "[data]\nsource = \"ubc\"\n",
            "[output]\nprecision = 16\n",
        ] {
            assert!(RunConfigFile::parse(text).is_err(), "{text}");
        }
    }
}
