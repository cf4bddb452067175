//! The full forward pass: global graph encoding, local context, session
//! heads and predictions.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::config::{ModelConfig, Task};
use crate::context::{context_attend, encode_local_sequence, fuse_item_representation, local_inputs};
use crate::encoder::encode_global;
use crate::error::{Error, Result};
use crate::graph::GlobalGraph;
use crate::params::{Checkpoint, ModelParams};
use crate::predictor::{argmax, behavior_loss, item_loss, score_against};
use crate::scope::Scope;
use crate::session_model::{behavior_intent, build_message, compose_session, SessionRepr};
use crate::sessions::SessionExample;

/// Source of the behavior tag fed into the session messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextBehavior {
    Given(usize),
    /// The argmax of the model's own behavior distribution.
    Predicted,
}

/// Rows of the global representation one example needs: its prefix items
/// and, when context attention is on, their graph neighbors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    /// Global item indices, ascending.
    pub rows: Vec<usize>,
    /// Position of each prefix item in `rows`.
    pub prefix_rows: Vec<usize>,
    /// Per prefix position, neighbor positions in `rows`.
    pub neighbors: Vec<Vec<usize>>,
}

impl Support {
    pub fn new(graph: &GlobalGraph, prefix: &[(usize, usize)], with_neighbors: bool) -> Self {
        let mut rows: Vec<usize> = prefix.iter().map(|p| p.0).collect();
        if with_neighbors {
            for &(item, _) in prefix {
                if item < graph.n_items() {
                    rows.extend_from_slice(graph.union_neighbors(item));
                }
            }
        }
        rows.sort_unstable();
        rows.dedup();
        let at = |i: usize| rows.binary_search(&i).expect("row present");
        let prefix_rows = prefix.iter().map(|p| at(p.0)).collect();
        let neighbors = if with_neighbors {
            prefix
                .iter()
                .map(|&(item, _)| {
                    if item < graph.n_items() {
                        graph.union_neighbors(item).iter().map(|&j| at(j)).collect()
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        } else {
            vec![Vec::new(); prefix.len()]
        };
        Support { rows, prefix_rows, neighbors }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub intent: Var,
    pub behavior_logits: Var,
    pub behavior_probs: Var,
    pub chosen_behavior: usize,
    pub session: SessionRepr,
    pub item_logits: Var,
    pub item_probs: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub item: Var,
    pub behavior: Var,
    /// What training minimizes: `item` for task 1, `item + γ·behavior` for task 2.
    pub joint: Var,
}

/// Result of one inference pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_logits: Vec<f64>,
    pub item_scores: Vec<f64>,
    pub behavior_scores: Vec<f64>,
    pub chosen_behavior: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    lambda: Vec<f64>,
}

impl Model {
    /// Freshly initialized from `config.seed`.
    pub fn new(config: ModelConfig, n_items: usize, n_behaviors: usize) -> Result<Self> {
        if n_items == 0 || n_behaviors == 0 {
            return Err(Error::Invalid("model needs at least one item and one behavior".into()));
        }
        let params = ModelParams::for_config(&config, n_items, n_behaviors)?;
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let dims = params.dims();
        if (dims.d, dims.layers, dims.max_len) != (config.d, config.layers, config.max_len) {
            return Err(Error::Config(format!(
                "parameters have d={}, layers={}, max_len={} but config says d={}, layers={}, max_len={}",
                dims.d, dims.layers, dims.max_len, config.d, config.layers, config.max_len
            )));
        }
        let lambda = config.lambda_for(dims.n_behaviors)?;
        Ok(Model { config, params, lambda })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Self::from_parts(ck.config, ck.params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.config.clone(), params: self.params.clone() }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn n_items(&self) -> usize {
        self.params.dims().n_items
    }

    pub fn n_behaviors(&self) -> usize {
        self.params.dims().n_behaviors
    }

    fn uses_context(&self) -> bool {
        self.config.beta != 0.0
    }

    pub fn support(&self, graph: &GlobalGraph, prefix: &[(usize, usize)]) -> Support {
        Support::new(graph, prefix, self.uses_context())
    }

    pub fn check_graph(&self, graph: &GlobalGraph) -> Result<()> {
        if graph.n_items() != self.n_items() || graph.behaviors().len() != self.n_behaviors() {
            return Err(Error::Invalid(format!(
                "graph has {} items and {} behaviors, model has {} and {}",
                graph.n_items(),
                graph.behaviors().len(),
                self.n_items(),
                self.n_behaviors()
            )));
        }
        Ok(())
    }

    /// `H^g` for every item.
    pub fn global_repr(&self, s: &mut Scope<'_, '_>, graph: &GlobalGraph) -> Result<Var> {
        let l = self.params.layout();
        let h0 = s.param(l.item_emb);
        encode_global(s, &l.layers, graph, h0, self.config.weight_transform)
    }

    /// One example given the `support.rows` rows of `H^g` as `hg_local`.
    pub fn forward_example(
        &self,
        s: &mut Scope<'_, '_>,
        hg_local: Var,
        support: &Support,
        prefix: &[(usize, usize)],
        next: NextBehavior,
    ) -> Result<ForwardVars> {
        if prefix.is_empty() {
            return Err(Error::Invalid("empty prefix".into()));
        }
        let l = self.params.layout();
        let cfg = &self.config;
        let behaviors: Vec<usize> = prefix.iter().map(|p| p.1).collect();

        let hg = s.tape.gather_rows(hg_local, &support.prefix_rows)?;
        let q = local_inputs(s, l.item_emb, l.behavior_emb, prefix)?;
        let c = encode_local_sequence(s, &l.gru, q)?;
        let h = if self.uses_context() {
            let hl = context_attend(s, l.w_l, l.w_g, c, &support.neighbors, hg_local)?;
            fuse_item_representation(s, hg, hl, cfg.beta)?
        } else {
            hg
        };

        let intent = behavior_intent(s, l, c, cfg.tie_behavior_attention, cfg.normalize_attention)?;
        let (behavior_logits, behavior_probs) = score_against(s, intent, l.behavior_emb)?;
        let chosen_behavior = match next {
            NextBehavior::Given(b) if b < self.n_behaviors() => b,
            NextBehavior::Given(b) => return Err(Error::Invalid(format!("behavior index {b} out of range"))),
            NextBehavior::Predicted => argmax(s.tape.value(behavior_probs).data()),
        };

        let m = build_message(s, l, h, &behaviors, chosen_behavior, cfg.max_len)?;
        let session = compose_session(s, l, m, cfg.session_ablation, cfg.normalize_attention)?;
        let (item_logits, item_probs) = score_against(s, session.s, l.item_emb)?;
        Ok(ForwardVars {
            intent,
            behavior_logits,
            behavior_probs,
            chosen_behavior,
            session,
            item_logits,
            item_probs,
        })
    }

    pub fn losses(
        &self,
        s: &mut Scope<'_, '_>,
        out: &ForwardVars,
        target_item: usize,
        target_behavior: usize,
    ) -> Result<Losses> {
        let item = item_loss(s, out.item_probs, target_item, self.config.item_loss)?;
        let behavior = behavior_loss(s, out.behavior_probs, target_behavior, &self.lambda)?;
        let joint = match self.config.task {
            Task::Task1 => item,
            Task::Task2 => {
                let w = s.tape.scalar_mul(behavior, self.config.gamma)?;
                s.tape.add(item, w)?
            }
        };
        Ok(Losses { item, behavior, joint })
    }

    /// Mean training loss of `batch` on a single tape, with teacher forcing.
    /// Slow but direct; the trainer computes the same gradients in parallel.
    pub fn batch_loss(&self, s: &mut Scope<'_, '_>, graph: &GlobalGraph, batch: &[SessionExample]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let hg = self.global_repr(s, graph)?;
        let mut total: Option<Var> = None;
        for ex in batch {
            let support = self.support(graph, &ex.prefix);
            let local = s.tape.gather_rows(hg, &support.rows)?;
            let out = self.forward_example(s, local, &support, &ex.prefix, NextBehavior::Given(ex.target_behavior))?;
            let l = self.losses(s, &out, ex.target_item, ex.target_behavior)?;
            total = Some(match total {
                Some(t) => s.tape.add(t, l.joint)?,
                None => l.joint,
            });
        }
        s.tape.scalar_mul(total.expect("non-empty batch"), 1.0 / batch.len() as f64)
    }

    /// `H^g` values for inference.
    pub fn global_representations(&self, graph: &GlobalGraph) -> Result<Tensor> {
        self.check_graph(graph)?;
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, &self.params, false);
        let hg = self.global_repr(&mut s, graph)?;
        Ok(tape.value(hg).clone())
    }

    /// Scores every item for `prefix`; `hg` comes from
    /// [`Model::global_representations`].
    pub fn predict(
        &self,
        graph: &GlobalGraph,
        hg: &Tensor,
        prefix: &[(usize, usize)],
        next: NextBehavior,
    ) -> Result<Prediction> {
        let support = self.support(graph, prefix);
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, &self.params, false);
        let local = s.tape.constant(hg.select_rows(&support.rows));
        let out = self.forward_example(&mut s, local, &support, prefix, next)?;
        Ok(Prediction {
            item_logits: tape.value(out.item_logits).data().to_vec(),
            item_scores: tape.value(out.item_probs).data().to_vec(),
            behavior_scores: tape.value(out.behavior_probs).data().to_vec(),
            chosen_behavior: out.chosen_behavior,
        })
    }
}
