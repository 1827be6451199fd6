//! The run configuration file: one JSON object with optional sections
//! `base_model`, `speculator`, `train`, `bench` and `corpus`. Missing
//! sections and fields take their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::corpus::{generate_synthetic_corpus, DocumentStream, SyntheticCorpusSpec};
use crate::error::{Error, Result};
use crate::model::BaseModelConfig;
use crate::speculator::SpeculatorConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Text files to read instead of the synthetic source.
    pub files: Vec<PathBuf>,
    /// Treat each file as one document rather than one per line.
    pub one_per_file: bool,
    pub synthetic: SyntheticCorpusSpec,
    /// Synthetic tokens used for training.
    pub train_tokens: usize,
    /// Tokens held out at the end of the stream for prompts and evaluation.
    pub heldout_tokens: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            files: Vec::new(),
            one_per_file: false,
            synthetic: SyntheticCorpusSpec::default(),
            train_tokens: 200_000,
            heldout_tokens: 20_000,
        }
    }
}

impl CorpusConfig {
    /// Builds the corpus and splits it into (train, held-out).
    pub fn load(&self) -> Result<(DocumentStream, DocumentStream)> {
        let stream = if self.files.is_empty() {
            generate_synthetic_corpus(&self.synthetic, self.train_tokens + self.heldout_tokens)?
        } else {
            DocumentStream::from_files(&self.files, self.one_per_file)?
        };
        let total = stream.token_count();
        if total <= self.heldout_tokens {
            return Err(Error::Data(format!(
                "corpus has {total} tokens, not enough to hold out {}",
                self.heldout_tokens
            )));
        }
        Ok(stream.split_at(total - self.heldout_tokens))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub base_model: BaseModelConfig,
    pub speculator: SpeculatorConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub corpus: CorpusConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.base_model.validate()?;
        self.speculator.validate()?;
        self.train.validate()?;
        self.bench.validate()?;
        self.corpus.synthetic.validate()?;
        if self.speculator.d_base != self.base_model.d_model {
            return Err(Error::Config(format!(
                "speculator.d_base {} does not match base_model.d_model {}",
                self.speculator.d_base, self.base_model.d_model
            )));
        }
        if self.speculator.vocab_size != self.base_model.vocab_size {
            return Err(Error::Config(format!(
                "speculator.vocab_size {} does not match base_model.vocab_size {}",
                self.speculator.vocab_size, self.base_model.vocab_size
            )));
        }
        Ok(())
    }

    /// Reseeds model initialisation, training order and bench prompts. The
    /// corpus keeps its own seed so that runs compare on the same data.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base_model.seed = seed;
        self.speculator.seed = seed;
        self.train.seed = seed;
        self.bench.seed = seed;
        self
    }
}
