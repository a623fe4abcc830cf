//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use glks::data::Limits;
use glks::model::ModelConfig;
use glks::train::TrainConfig;
use glks::{GlksError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Vocabulary file to load; built from the training split when absent.
    pub vocab_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub vocab_cap: usize,
    pub background_limit: usize,
    pub context_limit: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub m: usize,
    pub gks_depth: usize,
    pub use_gks: bool,
    pub decoder_uses_aggregated: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(0);
        let limits = Limits::default();
        RunConfig {
            train_path: None,
            valid_path: None,
            test_path: None,
            vocab_path: None,
            embeddings_path: None,
            out_dir: PathBuf::from("runs"),
            vocab_cap: 26_000,
            background_limit: limits.background,
            context_limit: limits.context,
            emb_dim: model.emb_dim,
            hidden: model.hidden,
            m: model.m,
            gks_depth: model.gks_depth,
            use_gks: model.use_gks,
            decoder_uses_aggregated: model.decoder_uses_aggregated,
            train: TrainConfig::default(),
        }
    }
}

/// Every configuration key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("train_path", "training JSONL file"),
    ("valid_path", "validation JSONL file"),
    ("test_path", "test JSONL file"),
    (
        "vocab_path",
        "vocabulary file (one token per line); built from train_path when unset",
    ),
    (
        "embeddings_path",
        "optional text embeddings, one `token v1 .. vD` per line",
    ),
    (
        "out_dir",
        "directory for checkpoints, vocabulary and the training log",
    ),
    (
        "vocab_cap",
        "maximum vocabulary size including reserved tokens",
    ),
    ("background_limit", "background tokens kept per episode"),
    (
        "context_limit",
        "most recent context tokens kept per episode",
    ),
    ("emb_dim", "word embedding size"),
    ("hidden", "hidden state size"),
    ("m", "semantic unit (window) size"),
    ("gks_depth", "highway layers per aggregation"),
    (
        "use_gks",
        "enable global knowledge selection (false = -GKS ablation)",
    ),
    (
        "decoder_uses_aggregated",
        "decoder attends over highway-aggregated states",
    ),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam beta1"),
    ("beta2", "Adam beta2"),
    ("eps", "Adam epsilon"),
    ("clip_norm", "global gradient norm limit"),
    ("pretrain_epochs", "distant-supervision-only epochs"),
    ("epochs", "joint training epochs"),
    ("batch_size", "episodes per batch"),
    ("seed", "seed for initialisation and shuffling"),
    (
        "use_ds",
        "distant supervision loss (false = -L_ds ablation)",
    ),
    ("use_mce", "entropy loss term (false = -L_mce ablation)"),
    ("w_mle", "weight of the likelihood loss"),
    ("w_ds", "weight of the distant supervision loss"),
    ("w_mce", "weight of the entropy loss"),
    (
        "ds_temperature",
        "softmax temperature of the distant supervision targets",
    ),
    ("eval_every", "validate every N joint epochs (0 = never)"),
    ("max_len", "maximum decoded length"),
    ("beam", "beam width (1 = greedy)"),
    ("record_timing", "write wall-clock seconds to the epoch log"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| GlksError::Config(format!("invalid value {value:?} for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(GlksError::Config(format!(
            "invalid value {value:?} for `{key}`: expected true or false"
        ))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or(String::new(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "train_path" => self.train_path = path(value),
            "valid_path" => self.valid_path = path(value),
            "test_path" => self.test_path = path(value),
            "vocab_path" => self.vocab_path = path(value),
            "embeddings_path" => self.embeddings_path = path(value),
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            "vocab_cap" => self.vocab_cap = parse(key, value)?,
            "background_limit" => self.background_limit = parse(key, value)?,
            "context_limit" => self.context_limit = parse(key, value)?,
            "emb_dim" => self.emb_dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "gks_depth" => self.gks_depth = parse(key, value)?,
            "use_gks" => self.use_gks = parse_bool(key, value)?,
            "decoder_uses_aggregated" => self.decoder_uses_aggregated = parse_bool(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "pretrain_epochs" => t.pretrain_epochs = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "use_ds" => t.use_ds = parse_bool(key, value)?,
            "use_mce" => t.use_mce = parse_bool(key, value)?,
            "w_mle" => t.w_mle = parse(key, value)?,
            "w_ds" => t.w_ds = parse(key, value)?,
            "w_mce" => t.w_mce = parse(key, value)?,
            "ds_temperature" => t.ds_temperature = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "max_len" => t.max_len = parse(key, value)?,
            "beam" => t.beam = parse(key, value)?,
            "record_timing" => t.record_timing = parse_bool(key, value)?,
            _ => {
                return Err(GlksError::Config(format!(
                    "unknown configuration key `{key}`"
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "train_path" => show(&self.train_path),
            "valid_path" => show(&self.valid_path),
            "test_path" => show(&self.test_path),
            "vocab_path" => show(&self.vocab_path),
            "embeddings_path" => show(&self.embeddings_path),
            "out_dir" => self.out_dir.display().to_string(),
            "vocab_cap" => self.vocab_cap.to_string(),
            "background_limit" => self.background_limit.to_string(),
            "context_limit" => self.context_limit.to_string(),
            "emb_dim" => self.emb_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "m" => self.m.to_string(),
            "gks_depth" => self.gks_depth.to_string(),
            "use_gks" => self.use_gks.to_string(),
            "decoder_uses_aggregated" => self.decoder_uses_aggregated.to_string(),
            "lr" => t.lr.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "pretrain_epochs" => t.pretrain_epochs.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "use_ds" => t.use_ds.to_string(),
            "use_mce" => t.use_mce.to_string(),
            "w_mle" => t.w_mle.to_string(),
            "w_ds" => t.w_ds.to_string(),
            "w_mce" => t.w_mce.to_string(),
            "ds_temperature" => t.ds_temperature.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "max_len" => t.max_len.to_string(),
            "beam" => t.beam.to_string(),
            "record_timing" => t.record_timing.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. Errors name the
    /// file and line.
    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = || format!("{origin}:{}", n + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| GlksError::Parse {
                location: location(),
                message: format!("expected `key = value`, found {line:?}"),
            })?;
            cfg.set(k.trim(), v).map_err(|e| GlksError::Parse {
                location: location(),
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            GlksError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Renders every key, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn limits(&self) -> Limits {
        Limits {
            background: self.background_limit,
            context: self.context_limit,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            m: self.m,
            gks_depth: self.gks_depth,
            use_gks: self.use_gks,
            decoder_uses_aggregated: self.decoder_uses_aggregated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("background_limit", self.background_limit),
            ("context_limit", self.context_limit),
            ("vocab_cap", self.vocab_cap),
        ] {
            if v == 0 {
                return Err(GlksError::Config(format!("{name} must be positive")));
            }
        }
        self.model_config(5).validate()?;
        self.train.validate()
    }
}
