//! Merging of config file values, command-line flags and defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use ocor::config::KeyValues;
use ocor::eval::DEFAULT_LAMBDA;
use ocor::model::{ModelConfig, MODEL_KEYS};
use ocor::training::{TrainConfig, TRAIN_KEYS};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "OCOR_CONFIG";

const RUN_KEYS: &[&str] = &["corpus", "dev_cases", "out_dir", "lambda", "threads"];

/// Model and training settings shared by commands that build a model.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub target_mrr: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub char_len: Option<usize>,
    #[arg(long)]
    pub conv_first: Option<usize>,
    #[arg(long)]
    pub conv_kernel: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub max_len_nl: Option<usize>,
    #[arg(long)]
    pub max_len_code: Option<usize>,
    /// `lcs` or `lcp`.
    #[arg(long)]
    pub overlap_metric: Option<String>,
    #[arg(long)]
    pub share_cross_weights: Option<bool>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

macro_rules! flag_entries {
    ($o:expr; $($field:ident),* $(,)?) => {
        vec![$((stringify!($field), $o.$field.as_ref().map(|v| v.to_string()))),*]
    };
}

impl Overrides {
    /// `(config key, flag value)` for every flag.
    fn entries(&self) -> Vec<(&'static str, Option<String>)> {
        flag_entries!(self;
            epochs, seed, learning_rate, dropout, negatives, batch_size,
            checkpoint_interval, patience, eval_interval, target_mrr, layers,
            d_model, heads, char_len, conv_first, conv_kernel, mlp_hidden,
            max_len_nl, max_len_code, overlap_metric, share_cross_weights, lambda,
        )
    }
}

/// The merged settings for one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub values: KeyValues,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lambda: f64,
    pub corpus: Option<PathBuf>,
    pub dev_cases: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Reads `explicit`, or the file named by [`CONFIG_ENV`], or nothing.
pub fn load_file(explicit: Option<&Path>) -> Result<KeyValues> {
    let path = match explicit {
        Some(p) => Some(p.to_path_buf()),
        None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
    };
    let Some(path) = path else {
        return Ok(KeyValues::new());
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let kv =
        KeyValues::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
    log::info!("loaded config {}", path.display());
    Ok(kv)
}

/// Sets `key` from a flag, logging when it replaces a file value.
pub fn set_flag(kv: &mut KeyValues, key: &str, value: Option<String>) {
    if let Some(v) = value {
        if let Some(old) = kv.set(key, &v) {
            if old != v {
                log::info!(
                    "flag --{} = {v} overrides config value {old}",
                    key.replace('_', "-")
                );
            }
        }
    }
}

impl RunConfig {
    pub fn build(
        mut values: KeyValues,
        overrides: &Overrides,
        paths: &[(&str, Option<&Path>)],
    ) -> Result<Self> {
        for (k, v) in overrides.entries() {
            set_flag(&mut values, k, v);
        }
        for (k, v) in paths {
            set_flag(&mut values, k, v.map(|p| p.display().to_string()));
        }
        let known: Vec<&str> = MODEL_KEYS
            .iter()
            .chain(TRAIN_KEYS)
            .chain(RUN_KEYS)
            .copied()
            .collect();
        values.reject_unknown(&known)?;

        let mut model = ModelConfig::default();
        model.apply(&values)?;
        model.validate()?;
        let mut train = TrainConfig::default();
        train.apply(&values)?;
        train.validate()?;
        let lambda = values.parse_opt("lambda")?.unwrap_or(DEFAULT_LAMBDA);
        if !(0.0..=1.0).contains(&lambda) {
            bail!("lambda {lambda} is outside [0, 1]");
        }
        let path = |k: &str| values.get(k).map(PathBuf::from);
        Ok(Self {
            model,
            train,
            lambda,
            corpus: path("corpus"),
            dev_cases: path("dev_cases"),
            out_dir: path("out_dir"),
            values,
        })
    }

    /// Every effective setting, defaults included, as config text.
    pub fn effective(&self) -> KeyValues {
        let mut kv = self.values.clone();
        self.model.write_into(&mut kv);
        let t = &self.train;
        kv.set("epochs", t.epochs);
        kv.set("negatives", t.negatives_per_query);
        kv.set("learning_rate", t.learning_rate);
        kv.set("dropout", t.dropout_rate);
        kv.set("seed", t.seed);
        kv.set("batch_size", t.batch_size);
        kv.set("checkpoint_interval", t.checkpoint_interval);
        kv.set("patience", t.patience);
        kv.set("eval_interval", t.eval_interval);
        if let Some(m) = t.target_mrr {
            kv.set("target_mrr", m);
        }
        kv.set("lambda", self.lambda);
        kv
    }
}
