use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::SamplerConfig;
use crate::duration::DEFAULT_FRAME_RATE;
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_LEVEL, DEFAULT_MARGIN, DEFAULT_RESAMPLES, DEFAULT_SEED};
use crate::model::ModelConfig;
use crate::synthcorpus::CorpusConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub margin: f64,
    pub resamples: usize,
    pub level: f64,
    pub bootstrap_seed: u64,
    pub frame_rate: u32,
    /// Evaluate only the first `limit` utterances when set.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            margin: DEFAULT_MARGIN,
            resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            bootstrap_seed: DEFAULT_SEED,
            frame_rate: DEFAULT_FRAME_RATE,
            limit: None,
        }
    }
}

/// Every tunable of a run. Each section and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        self.sampler.validate()?;
        if self.corpus.audio_vocab != self.model.audio_vocab {
            return Err(Error::Config(format!(
                "corpus.audio_vocab {} differs from model.audio_vocab {}",
                self.corpus.audio_vocab, self.model.audio_vocab
            )));
        }
        if self.corpus.n_symbols > self.model.text_vocab {
            return Err(Error::Config(format!(
                "corpus.n_symbols {} exceeds model.text_vocab {}",
                self.corpus.n_symbols, self.model.text_vocab
            )));
        }
        if self.eval.frame_rate == 0 || !(self.eval.margin >= 0.0) {
            return Err(Error::Config("eval.frame_rate must be positive and eval.margin nonnegative".into()));
        }
        Ok(())
    }
}
