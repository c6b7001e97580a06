//! Run configuration: a flat `key = value` text format covering every
//! knob of the pipeline, with typed parsing and a canonical dump.
//!
//! The format is deliberately minimal so that a resolved configuration can
//! be embedded verbatim in run manifests and diffed or re-parsed byte for
//! byte: dumping a config, parsing the dump, and dumping again yields the
//! identical text. Keys under `manifest.` and `preset.` are ignored by the
//! parser — the former so a manifest file can be fed straight back in as a
//! config, the latter because presets are informational constants that the
//! dump always re-emits.

use crate::corpus::{load_text, synth_corpus, Corpus, CorpusError, GrammarSpec, SynthCorpus};
use crate::denoiser::MixtureConfig;
use crate::model::ModelConfig;
use crate::tokenizer::{TokenId, Vocab};
use crate::trainer::{AdamConfig, Phase, Schedule, TrainConfig};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line} has no '=': {text:?}")]
    BadLine { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}' has invalid value {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Every tunable of the pipeline, fully resolved. The model's vocabulary
/// size is not a knob — it is pinned by the token layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub len_inputs: usize,
    pub len_targets: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub s_as_lm: bool,
    pub mixture: MixtureConfig,
    /// `grammar` (built-in template grammar), `grammar:<path>` (grammar
    /// spec file), or `file:<path>` (plain text, one document per line).
    pub corpus_source: String,
    /// Documents to draw when the corpus comes from the grammar generator.
    pub corpus_n_docs: usize,
    /// Held-out fraction for the built-in grammar and for `file:` corpora;
    /// a `grammar:<path>` spec file carries its own fraction.
    pub corpus_heldout_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 512,
            steps: 300,
            batch_size: 8,
            len_inputs: 256,
            len_targets: 256,
            lr_max: 1e-4,
            lr_min: 1e-6,
            schedule: Schedule::Cosine,
            adam: AdamConfig::default(),
            s_as_lm: false,
            mixture: MixtureConfig::default(),
            corpus_source: "grammar".to_string(),
            corpus_n_docs: 400,
            corpus_heldout_fraction: 0.2,
        }
    }
}

/// Reference-scale run shape, kept alongside the desk defaults so dumps
/// document both. These are constants, not configuration: the parser
/// ignores `preset.` keys and the dump always re-emits them.
pub const REFERENCE_PRESET: [(&str, u64); 4] = [
    ("preset.reference.steps", 20000),
    ("preset.reference.batch_size", 32),
    ("preset.reference.len_inputs", 1024),
    ("preset.reference.len_targets", 1024),
];

fn parse_u64(key: &str, value: &str) -> Result<u64, ConfigError> {
    value.parse().map_err(|e| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: format!("{e}"),
    })
}

fn parse_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    value.parse().map_err(|e| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: format!("{e}"),
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    value.parse().map_err(|e| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: format!("{e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

impl Config {
    /// Apply one `key = value` assignment.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            _ if key.starts_with("manifest.") || key.starts_with("preset.") => {}
            "seed" => self.seed = parse_u64(key, value)?,
            "model.d_model" => self.d_model = parse_usize(key, value)?,
            "model.n_layers" => self.n_layers = parse_usize(key, value)?,
            "model.n_heads" => self.n_heads = parse_usize(key, value)?,
            "model.d_ff" => self.d_ff = parse_usize(key, value)?,
            "model.max_len" => self.max_len = parse_usize(key, value)?,
            "train.steps" => self.steps = parse_u64(key, value)?,
            "train.batch_size" => self.batch_size = parse_usize(key, value)?,
            "train.len_inputs" => self.len_inputs = parse_usize(key, value)?,
            "train.len_targets" => self.len_targets = parse_usize(key, value)?,
            "train.lr_max" => self.lr_max = parse_f64(key, value)?,
            "train.lr_min" => self.lr_min = parse_f64(key, value)?,
            "train.schedule" => {
                self.schedule = match value {
                    "cosine" => Schedule::Cosine,
                    "constant" => Schedule::Constant,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected cosine or constant".into(),
                        })
                    }
                }
            }
            "train.adam_beta1" => self.adam.beta1 = parse_f64(key, value)?,
            "train.adam_beta2" => self.adam.beta2 = parse_f64(key, value)?,
            "train.adam_eps" => self.adam.eps = parse_f64(key, value)?,
            "train.s_as_lm" => self.s_as_lm = parse_bool(key, value)?,
            "mixture.s" => self.mixture.s_weight = parse_f64(key, value)?,
            "mixture.r" => self.mixture.r_weight = parse_f64(key, value)?,
            "mixture.x" => self.mixture.x_weight = parse_f64(key, value)?,
            "mixture.x_long" => self.mixture.x_long_weight = parse_f64(key, value)?,
            "mixture.x_high" => self.mixture.x_high_weight = parse_f64(key, value)?,
            "denoiser.r.rate" => self.mixture.r_params.rate = parse_f64(key, value)?,
            "denoiser.r.mean_span" => self.mixture.r_params.mean_span = parse_f64(key, value)?,
            "denoiser.x_long.rate" => self.mixture.x_long_params.rate = parse_f64(key, value)?,
            "denoiser.x_long.mean_span" => {
                self.mixture.x_long_params.mean_span = parse_f64(key, value)?
            }
            "denoiser.x_high.rate" => self.mixture.x_high_params.rate = parse_f64(key, value)?,
            "denoiser.x_high.mean_span" => {
                self.mixture.x_high_params.mean_span = parse_f64(key, value)?
            }
            "corpus.source" => self.corpus_source = value.to_string(),
            "corpus.n_docs" => self.corpus_n_docs = parse_usize(key, value)?,
            "corpus.heldout_fraction" => {
                self.corpus_heldout_fraction = parse_f64(key, value)?
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse config text on top of the current values. Lines are
    /// `key = value`; blank lines and lines starting with `#` are skipped.
    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine { line: i + 1, text: raw.to_string() });
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_str(&text)
    }

    /// Canonical text form: every key, fixed order, `Display` formatting.
    /// `parse_str(dump()) == self` and `dump` of that parse is byte-equal.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "# model");
        let _ = writeln!(s, "model.d_model = {}", self.d_model);
        let _ = writeln!(s, "model.n_layers = {}", self.n_layers);
        let _ = writeln!(s, "model.n_heads = {}", self.n_heads);
        let _ = writeln!(s, "model.d_ff = {}", self.d_ff);
        let _ = writeln!(s, "model.max_len = {}", self.max_len);
        let _ = writeln!(s, "# training");
        let _ = writeln!(s, "train.steps = {}", self.steps);
        let _ = writeln!(s, "train.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train.len_inputs = {}", self.len_inputs);
        let _ = writeln!(s, "train.len_targets = {}", self.len_targets);
        let _ = writeln!(s, "train.lr_max = {}", self.lr_max);
        let _ = writeln!(s, "train.lr_min = {}", self.lr_min);
        let schedule = match self.schedule {
            Schedule::Cosine => "cosine",
            Schedule::Constant => "constant",
        };
        let _ = writeln!(s, "train.schedule = {schedule}");
        let _ = writeln!(s, "train.adam_beta1 = {}", self.adam.beta1);
        let _ = writeln!(s, "train.adam_beta2 = {}", self.adam.beta2);
        let _ = writeln!(s, "train.adam_eps = {}", self.adam.eps);
        let _ = writeln!(s, "train.s_as_lm = {}", self.s_as_lm);
        let _ = writeln!(s, "# denoiser mixture");
        let _ = writeln!(s, "mixture.s = {}", self.mixture.s_weight);
        let _ = writeln!(s, "mixture.r = {}", self.mixture.r_weight);
        let _ = writeln!(s, "mixture.x = {}", self.mixture.x_weight);
        let _ = writeln!(s, "mixture.x_long = {}", self.mixture.x_long_weight);
        let _ = writeln!(s, "mixture.x_high = {}", self.mixture.x_high_weight);
        let _ = writeln!(s, "denoiser.r.rate = {}", self.mixture.r_params.rate);
        let _ = writeln!(s, "denoiser.r.mean_span = {}", self.mixture.r_params.mean_span);
        let _ = writeln!(s, "denoiser.x_long.rate = {}", self.mixture.x_long_params.rate);
        let _ = writeln!(s, "denoiser.x_long.mean_span = {}", self.mixture.x_long_params.mean_span);
        let _ = writeln!(s, "denoiser.x_high.rate = {}", self.mixture.x_high_params.rate);
        let _ = writeln!(s, "denoiser.x_high.mean_span = {}", self.mixture.x_high_params.mean_span);
        let _ = writeln!(s, "# corpus");
        let _ = writeln!(s, "corpus.source = {}", self.corpus_source);
        let _ = writeln!(s, "corpus.n_docs = {}", self.corpus_n_docs);
        let _ = writeln!(s, "corpus.heldout_fraction = {}", self.corpus_heldout_fraction);
        let _ = writeln!(s, "# reference-scale preset (informational; ignored by the parser)");
        for (key, value) in REFERENCE_PRESET {
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: Vocab::SIZE as usize,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
        }
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        TrainConfig {
            phase,
            steps: self.steps,
            batch_size: self.batch_size,
            len_inputs: self.len_inputs,
            len_targets: self.len_targets,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            schedule: self.schedule,
            adam: self.adam,
            seed: self.seed,
            mixture: self.mixture,
            s_as_lm: self.s_as_lm,
            model: self.model(),
        }
    }

    /// Materialize the configured corpus.
    pub fn load_corpus(&self) -> Result<LoadedCorpus, ConfigError> {
        if self.corpus_source == "grammar" {
            let mut spec = GrammarSpec::desk_default();
            spec.heldout_fraction = self.corpus_heldout_fraction;
            return Ok(LoadedCorpus::Grammar(synth_corpus(&spec, self.corpus_n_docs, self.seed)?));
        }
        if let Some(path) = self.corpus_source.strip_prefix("grammar:") {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_string(),
                source,
            })?;
            let spec = GrammarSpec::parse(&text)?;
            return Ok(LoadedCorpus::Grammar(synth_corpus(&spec, self.corpus_n_docs, self.seed)?));
        }
        if let Some(path) = self.corpus_source.strip_prefix("file:") {
            return Ok(LoadedCorpus::File(load_text(
                Path::new(path),
                self.corpus_heldout_fraction,
                self.seed,
            )?));
        }
        Err(ConfigError::BadValue {
            key: "corpus.source".into(),
            value: self.corpus_source.clone(),
            reason: "expected grammar, grammar:<path>, or file:<path>".into(),
        })
    }
}

/// A corpus materialized from config, with or without generator metadata.
pub enum LoadedCorpus {
    Grammar(SynthCorpus),
    File(Corpus),
}

impl LoadedCorpus {
    pub fn train_docs(&self) -> &[Vec<TokenId>] {
        match self {
            LoadedCorpus::Grammar(s) => &s.corpus.train,
            LoadedCorpus::File(c) => &c.train,
        }
    }

    pub fn heldout_docs(&self) -> &[Vec<TokenId>] {
        match self {
            LoadedCorpus::Grammar(s) => &s.corpus.heldout,
            LoadedCorpus::File(c) => &c.heldout,
        }
    }
}
