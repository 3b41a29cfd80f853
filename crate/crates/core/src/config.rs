//! Run configuration: a TOML document with one section per stage.
//!
//! ```toml
//! [run]
//! model = "mlp:2-32-32-32-4"
//! seed = 7
//! out_dir = "runs/default"
//!
//! [data]       # dataset generator
//! [teacher]    # full-precision training
//! [strategy]   # bitwidth search
//! [train]      # post-training with distillation
//! ```
//!
//! Every key has a default, so sections may be partial or absent. The run
//! seed is the only seed in the file; the stage seeds are derived from it.
//! `SDQ_SEED` and `SDQ_OUT_DIR` override the corresponding `[run]` keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Result, SdqError};
use crate::model::ModelSpec;
use crate::phase1::Phase1Config;
use crate::phase2::Phase2Config;
use crate::train::FpConfig;

pub const ENV_SEED: &str = "SDQ_SEED";
pub const ENV_OUT_DIR: &str = "SDQ_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub model: String,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            model: "mlp:2-32-32-32-4".into(),
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DatasetSpec,
    pub teacher: FpConfig,
    pub strategy: Phase1Config,
    pub train: Phase2Config,
}

/// Stage seeds derived from the run seed. Distinct streams keep the stages
/// independent of each other's consumption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub teacher: u64,
    pub strategy: u64,
    pub gumbel: u64,
    pub train: u64,
}

impl Seeds {
    pub fn from_run(seed: u64) -> Self {
        let mix = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        Seeds {
            data: seed,
            init: mix(1),
            teacher: mix(2),
            strategy: mix(3),
            gumbel: mix(4),
            train: mix(5),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            SdqError::parse(source, line, e.message().to_string())
        })?;
        cfg.set_seed(cfg.run.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SdqError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Sets the run seed and every derived stage seed.
    pub fn set_seed(&mut self, seed: u64) {
        let s = Seeds::from_run(seed);
        self.run.seed = seed;
        self.data.seed = s.data;
        self.teacher.seed = s.teacher;
        self.strategy.seed = s.strategy;
        self.strategy.gumbel.seed = s.gumbel;
        self.train.seed = s.train;
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_run(self.run.seed)
    }

    /// Applies `SDQ_SEED` / `SDQ_OUT_DIR` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(ENV_SEED) {
            let seed = s
                .trim()
                .parse::<u64>()
                .map_err(|e| SdqError::Config(format!("{ENV_SEED}='{s}' is not a seed: {e}")))?;
            self.set_seed(seed);
        }
        if let Ok(d) = std::env::var(ENV_OUT_DIR) {
            self.run.out_dir = PathBuf::from(d);
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::parse(&self.run.model)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self
            .model_spec()
            .map_err(|e| SdqError::Config(format!("run.model: {e}")))?;
        self.data.validate()?;
        if spec.input_len() != self.data.dim {
            return Err(SdqError::Config(format!(
                "model '{}' takes {} inputs but data.dim is {}",
                self.run.model,
                spec.input_len(),
                self.data.dim
            )));
        }
        if spec.classes != self.data.classes {
            return Err(SdqError::Config(format!(
                "model '{}' has {} outputs but data.classes is {}",
                self.run.model, spec.classes, self.data.classes
            )));
        }
        self.teacher.optimizer.validate("teacher.optimizer")?;
        self.strategy.validate()?;
        self.train.validate()
    }
}
