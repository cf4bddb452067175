//! Named parameter store, its layout, and JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_items: usize,
    pub n_behaviors: usize,
    pub d: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl Dims {
    pub fn n_relations(&self) -> usize {
        self.n_behaviors * self.n_behaviors
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationIds {
    pub w_t: usize,
    pub w_s: usize,
    pub a: usize,
    pub w_w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIds {
    pub relations: Vec<RelationIds>,
    pub w_res: usize,
}

/// Gate weights act on `q_t` (`w_*`, `[d, 2d]`) and `c_{t-1}` (`u_*`, `[d, d]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruIds {
    pub w_z: usize,
    pub u_z: usize,
    pub b_z: usize,
    pub w_r: usize,
    pub u_r: usize,
    pub b_r: usize,
    pub w_h: usize,
    pub u_h: usize,
    pub b_h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionIds {
    pub w_1: usize,
    pub w_2: usize,
    pub r: usize,
    pub b: usize,
}

/// Index of every named tensor. Matrices are stored `[out, in]` and applied
/// as `x · Wᵀ` to row vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub item_emb: usize,
    pub behavior_emb: usize,
    pub position_emb: usize,
    pub layers: Vec<LayerIds>,
    pub gru: GruIds,
    pub w_l: usize,
    pub w_g: usize,
    pub w_0: usize,
    pub general: AttentionIds,
    pub current: AttentionIds,
    pub behavior: AttentionIds,
    pub w_c: usize,
    pub w_bhv: usize,
    pub b_bhv: usize,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
}

impl Builder {
    fn add(&mut self, name: String, shape: [usize; 2]) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionIds {
        AttentionIds {
            w_1: self.add(format!("{prefix}.w_1"), [d, d]),
            w_2: self.add(format!("{prefix}.w_2"), [d, d]),
            r: self.add(format!("{prefix}.r"), [1, d]),
            b: self.add(format!("{prefix}.b"), [1, d]),
        }
    }
}

fn build_layout(dims: &Dims) -> (Layout, Vec<String>, Vec<[usize; 2]>) {
    let d = dims.d;
    let mut b = Builder { names: Vec::new(), shapes: Vec::new() };
    let item_emb = b.add("item_emb".into(), [dims.n_items, d]);
    let behavior_emb = b.add("behavior_emb".into(), [dims.n_behaviors, d]);
    let position_emb = b.add("position_emb".into(), [dims.max_len, d]);
    let layers = (0..dims.layers)
        .map(|k| {
            let relations = (0..dims.n_relations())
                .map(|r| RelationIds {
                    w_t: b.add(format!("layer{k}.rel{r}.w_t"), [d, d]),
                    w_s: b.add(format!("layer{k}.rel{r}.w_s"), [d, d]),
                    a: b.add(format!("layer{k}.rel{r}.a"), [1, d]),
                    w_w: b.add(format!("layer{k}.rel{r}.w_w"), [1, d]),
                })
                .collect();
            LayerIds { relations, w_res: b.add(format!("layer{k}.w_res"), [d, d]) }
        })
        .collect();
    let mut gate = |g: &str| {
        (
            b.add(format!("gru.w_{g}"), [d, 2 * d]),
            b.add(format!("gru.u_{g}"), [d, d]),
            b.add(format!("gru.b_{g}"), [1, d]),
        )
    };
    let (w_z, u_z, b_z) = gate("z");
    let (w_r, u_r, b_r) = gate("r");
    let (w_h, u_h, b_h) = gate("h");
    let gru = GruIds { w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h };
    let w_l = b.add("w_l".into(), [d, d]);
    let w_g = b.add("w_g".into(), [d, d]);
    let w_0 = b.add("w_0".into(), [d, 4 * d]);
    let general = b.attention("attn_general", d);
    let current = b.attention("attn_current", d);
    let behavior = b.attention("attn_behavior", d);
    let w_c = b.add("w_c".into(), [d, 2 * d]);
    let w_bhv = b.add("w_bhv".into(), [d, d]);
    let b_bhv = b.add("b_bhv".into(), [1, d]);
    let layout = Layout {
        item_emb,
        behavior_emb,
        position_emb,
        layers,
        gru,
        w_l,
        w_g,
        w_0,
        general,
        current,
        behavior,
        w_c,
        w_bhv,
        b_bhv,
    };
    (layout, b.names, b.shapes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: Dims,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// All-zero parameters; mostly useful for hand-set tests.
    pub fn zeros(dims: Dims) -> Self {
        let (layout, names, shapes) = build_layout(&dims);
        let tensors = shapes.iter().map(|&[r, c]| Tensor::zeros(r, c)).collect();
        ModelParams { dims, layout, names, tensors }
    }

    /// Every entry drawn from `N(0, std²)`, in layout order, from `seed`.
    pub fn init(dims: Dims, std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init std: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        for t in &mut p.tensors {
            for v in t.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn for_config(config: &ModelConfig, n_items: usize, n_behaviors: usize) -> Result<Self> {
        config.validate()?;
        let dims = Dims {
            n_items,
            n_behaviors,
            d: config.d,
            layers: config.layers,
            max_len: config.max_len,
        };
        Self::init(dims, config.init_std, config.seed)
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, idx: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[idx].shape() {
            return Err(Error::shape(
                "set_param",
                format!("{} expects {:?}, got {:?}", self.names[idx], self.tensors[idx].shape(), value.shape()),
            ));
        }
        self.tensors[idx] = value;
        Ok(())
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    dims: Dims,
    config: ModelConfig,
    params: BTreeMap<String, Entry>,
}

/// Parameters together with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let params = self
            .params
            .names
            .iter()
            .zip(&self.params.tensors)
            .map(|(n, t)| (n.clone(), Entry { shape: t.shape(), values: t.data().to_vec() }))
            .collect();
        let file = CheckpointFile { dims: self.params.dims, config: self.config.clone(), params };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut file: CheckpointFile = serde_json::from_str(text)?;
        let mut params = ModelParams::zeros(file.dims);
        for (idx, name) in params.names.clone().iter().enumerate() {
            let entry = file
                .params
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let t = Tensor::new(entry.shape[0], entry.shape[1], entry.values)
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            params.set(idx, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if let Some(extra) = file.params.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Checkpoint { config: file.config, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
