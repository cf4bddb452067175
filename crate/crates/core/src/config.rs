use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;

/// Which prediction problem is trained and evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Next item, with the next behavior given.
    Task1,
    /// Next behavior, then next item conditioned on the predicted behavior.
    #[default]
    Task2,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task1" => Ok(Task::Task1),
            "task2" => Ok(Task::Task2),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Task1 => "task1",
            Task::Task2 => "task2",
        })
    }
}

/// How the raw co-occurrence count enters the relation attention score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightTransform {
    #[default]
    Log1p,
    Raw,
}

impl WeightTransform {
    pub fn apply(self, w: u32) -> f64 {
        match self {
            WeightTransform::Log1p => (w as f64).ln_1p(),
            WeightTransform::Raw => w as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemLoss {
    /// `-Σ_i [y_i log ŷ_i + (1 - y_i) log(1 - ŷ_i)]` over the full softmax.
    #[default]
    BinarySum,
    /// `-log ŷ_target`.
    Categorical,
}

/// Which session-intent channels feed the session embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionAblation {
    #[default]
    Full,
    NoCurrent,
    NoGeneral,
}

macro_rules! from_str_via_serde {
    ($($t:ty),*) => {$(
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::Config(format!("invalid value `{s}` for {}", stringify!($t))))
            }
        }
    )*};
}
from_str_via_serde!(WeightTransform, ItemLoss, SessionAblation, Execution);

/// Every model and training knob. Defaults follow the reference setup:
/// `d = 128`, one graph layer, sessions truncated to 8, intention factor
/// 0.1, joint weight 10, batches of 512.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    /// Number of graph propagation layers; 0 disables the global graph.
    pub layers: usize,
    pub max_len: usize,
    /// Intention factor mixing the context-attended representation in.
    pub beta: f64,
    pub gamma: f64,
    /// Per-behavior weights of the behavior loss, in behavior-index order.
    pub lambda: Option<Vec<f64>>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_step: usize,
    pub epochs: usize,
    pub seed: u64,
    pub task: Task,
    pub neighbor_cap: usize,
    pub init_std: f64,
    pub weight_transform: WeightTransform,
    pub item_loss: ItemLoss,
    pub normalize_attention: bool,
    pub tie_behavior_attention: bool,
    pub session_ablation: SessionAblation,
    pub execution: Execution,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            layers: 1,
            max_len: 8,
            beta: 0.1,
            gamma: 10.0,
            lambda: None,
            batch_size: 512,
            lr: 0.001,
            lr_decay: 0.1,
            lr_decay_step: 3,
            epochs: 10,
            seed: 0,
            task: Task::Task2,
            neighbor_cap: 12,
            init_std: 0.1,
            weight_transform: WeightTransform::Log1p,
            item_loss: ItemLoss::BinarySum,
            normalize_attention: false,
            tie_behavior_attention: false,
            session_ablation: SessionAblation::Full,
            execution: Execution::Parallel,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 {
            return fail("d must be positive");
        }
        if self.max_len == 0 {
            return fail("max_len must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.gamma >= 0.0) {
            return fail("gamma must be non-negative");
        }
        if !self.beta.is_finite() {
            return fail("beta must be finite");
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return fail("lr and lr_decay must be positive");
        }
        if self.lr_decay_step == 0 {
            return fail("lr_decay_step must be positive");
        }
        if !(self.init_std > 0.0) {
            return fail("init_std must be positive");
        }
        if let Some(l) = &self.lambda {
            if l.iter().any(|x| !(*x >= 0.0)) {
                return fail("lambda entries must be non-negative");
            }
        }
        Ok(())
    }

    /// Behavior-loss weights for `n_behaviors` classes: the configured list,
    /// or the reference weights `{0.2, 0.8}` / `{0.2, 0.4, 0.4}` (majority
    /// behavior first), or uniform ones otherwise.
    pub fn lambda_for(&self, n_behaviors: usize) -> Result<Vec<f64>> {
        match &self.lambda {
            Some(l) if l.len() == n_behaviors => Ok(l.clone()),
            Some(l) => Err(Error::Config(format!(
                "lambda has {} entries for {n_behaviors} behaviors",
                l.len()
            ))),
            None => Ok(match n_behaviors {
                2 => vec![0.2, 0.8],
                3 => vec![0.2, 0.4, 0.4],
                n => vec![1.0; n],
            }),
        }
    }

    /// Step decay: `lr · lr_decay^(epoch / lr_decay_step)` for 0-based epochs.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_step) as i32)
    }
}
