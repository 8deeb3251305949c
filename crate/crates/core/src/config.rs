//! Unified run configuration.
//!
//! One JSON document with `seed`, `encoder`, `tsre`, `loss`, `data` and
//! `trainer` sections. Unknown keys are rejected at every level. The global
//! seed, when present, overrides the data and trainer seeds; precedence is
//! explicit override, then the document's `seed`, then `TSRELAB_SEED`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::SynthConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objective::LossConfig;
use crate::trainer::{RunSpec, Stage, TrainConfig};
use crate::tsre::TsreConfig;

pub const SEED_ENV: &str = "TSRELAB_SEED";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub encoder: EncoderConfig,
    pub tsre: Option<TsreConfig>,
    pub loss: LossConfig,
    pub data: SynthConfig,
    pub trainer: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// Seed from `TSRELAB_SEED`, if set and numeric.
    pub fn env_seed() -> Result<Option<u64>> {
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(None),
        }
    }

    /// Applies the seed precedence and pushes the winner into the sections.
    pub fn resolve_seed(&mut self, cli: Option<u64>) -> Result<()> {
        let seed = match (cli, self.seed) {
            (Some(s), _) | (None, Some(s)) => Some(s),
            (None, None) => Self::env_seed()?,
        };
        if let Some(s) = seed {
            self.seed = Some(s);
            self.data.seed = s;
            self.trainer.seed = s;
        }
        Ok(())
    }

    /// Section-level validation plus cross-section agreement.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        self.trainer.validate()?;
        if let Some(t) = &self.tsre {
            t.validate(&self.encoder)?;
        }
        for (name, enc, data) in [
            ("input_dim", self.encoder.input_dim, self.data.input_dim),
            ("latent_dim", self.encoder.latent_dim, self.data.latent_dim),
            ("speaker_dim", self.encoder.speaker_dim, self.data.speaker_dim),
        ] {
            if enc != data {
                return Err(Error::Config(format!("encoder.{name} = {enc} but data.{name} = {data}")));
            }
        }
        if self.trainer.stage == Stage::TsreFinetune && self.tsre.is_none() {
            return Err(Error::Config("trainer.stage tsre-finetune needs a tsre section".into()));
        }
        Ok(())
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            encoder: self.encoder.clone(),
            tsre: self.tsre.clone(),
            loss: self.loss.clone(),
            train: self.trainer.clone(),
        }
    }
}
