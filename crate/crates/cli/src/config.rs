//! Run configuration: a flat TOML file of `ModelConfig` keys, overridden by
//! command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use mbsr::{Execution, ItemLoss, ModelConfig, SessionAblation, Task, WeightTransform};
use serde::Serialize;

/// One flag per `ModelConfig` field.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// Flat key-value TOML file with `ModelConfig` keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Graph propagation layers (0 disables the global graph).
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Behavior loss weights, comma separated, in behavior-index order.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, visible_alias = "batch")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub lr_decay_step: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub neighbor_cap: Option<usize>,
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub weight_transform: Option<WeightTransform>,
    #[arg(long)]
    pub item_loss: Option<ItemLoss>,
    #[arg(long)]
    pub normalize_attention: Option<bool>,
    #[arg(long)]
    pub tie_behavior_attention: Option<bool>,
    #[arg(long)]
    pub session_ablation: Option<SessionAblation>,
    #[arg(long)]
    pub execution: Option<Execution>,
}

fn put<T: Serialize>(table: &mut toml::Table, key: &str, value: &Option<T>) -> Result<()> {
    if let Some(v) = value {
        table.insert(key.to_string(), toml::Value::try_from(v)?);
    }
    Ok(())
}

impl ModelFlags {
    fn overrides(&self) -> Result<toml::Table> {
        let mut t = toml::Table::new();
        put(&mut t, "d", &self.d)?;
        put(&mut t, "layers", &self.layers)?;
        put(&mut t, "max_len", &self.max_len)?;
        put(&mut t, "beta", &self.beta)?;
        put(&mut t, "gamma", &self.gamma)?;
        put(&mut t, "lambda", &self.lambda)?;
        put(&mut t, "batch_size", &self.batch_size)?;
        put(&mut t, "lr", &self.lr)?;
        put(&mut t, "lr_decay", &self.lr_decay)?;
        put(&mut t, "lr_decay_step", &self.lr_decay_step)?;
        put(&mut t, "epochs", &self.epochs)?;
        put(&mut t, "seed", &self.seed)?;
        put(&mut t, "task", &self.task)?;
        put(&mut t, "neighbor_cap", &self.neighbor_cap)?;
        put(&mut t, "init_std", &self.init_std)?;
        put(&mut t, "weight_transform", &self.weight_transform)?;
        put(&mut t, "item_loss", &self.item_loss)?;
        put(&mut t, "normalize_attention", &self.normalize_attention)?;
        put(&mut t, "tie_behavior_attention", &self.tie_behavior_attention)?;
        put(&mut t, "session_ablation", &self.session_ablation)?;
        put(&mut t, "execution", &self.execution)?;
        Ok(t)
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut table = match &self.config {
            Some(path) => load_table(path)?,
            None => toml::Table::new(),
        };
        table.extend(self.overrides()?);
        let config: ModelConfig = table.try_into().context("invalid model configuration")?;
        config.validate()?;
        Ok(config)
    }
}

fn load_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<toml::Table>().with_context(|| format!("parsing {}", path.display()))
}

/// The effective configuration as a TOML file that `--config` accepts back.
pub fn to_toml(config: &ModelConfig) -> Result<String> {
    Ok(toml::to_string(config)?)
}
