use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::GraphAttention;
use crate::sequencer::hex_digest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Bottleneck width of each adapter.
    pub adapter_width: usize,
    pub dropout: f64,
    pub seed: u64,
    pub graph_attention: GraphAttention,
    /// Give graph tokens their own position table, indexed from the start of
    /// the graph segment.
    pub separate_graph_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            max_len: 512,
            vocab_size: 2,
            adapter_width: 8,
            dropout: 0.1,
            seed: 0,
            graph_attention: GraphAttention::Structural,
            separate_graph_positions: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("adapter_width", self.adapter_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: Norm,
}

/// Bottleneck adapter: down-project, GELU, up-project, residual.
#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

/// A named set of per-layer adapters (after attention and after the
/// feed-forward sublayer) with its own scoring head.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub name: String,
    pub layers: Vec<[Adapter; 2]>,
    pub head: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainablePolicy {
    Full,
    AdaptersAndHeadOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCounts {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

#[derive(Clone, Debug)]
pub struct ModelParameters {
    pub(crate) config: ModelConfig,
    pub(crate) tensors: Vec<Tensor>,
    pub(crate) token_emb: ParamId,
    pub(crate) pos_emb: ParamId,
    pub(crate) graph_pos_emb: Option<ParamId>,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) head: Linear,
    pub(crate) adapters: Vec<AdapterSet>,
    pub(crate) active: Option<usize>,
    rng: ChaCha8Rng,
}

const INIT_STD: f64 = 0.02;
const ADAPTER_UP_STD: f64 = 1e-3;

impl ModelParameters {
    /// Randomly initialized parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut m = ModelParameters {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            tensors: Vec::new(),
            token_emb: ParamId(0),
            pos_emb: ParamId(0),
            graph_pos_emb: None,
            layers: Vec::new(),
            head: Linear {
                w: ParamId(0),
                b: ParamId(0),
            },
            adapters: Vec::new(),
            active: None,
        };
        let c = m.config.clone();
        let d = c.d_model;
        m.token_emb = m.normal("embeddings.token", c.vocab_size, d, 1.0 / (d as f64).sqrt());
        m.pos_emb = m.normal("embeddings.position", c.max_len, d, 1.0 / (d as f64).sqrt());
        if c.separate_graph_positions {
            m.graph_pos_emb = Some(m.normal(
                "embeddings.graph_position",
                c.max_len,
                d,
                1.0 / (d as f64).sqrt(),
            ));
        }
        for i in 0..c.layers {
            let p = format!("layers.{i}");
            let layer = LayerParams {
                q: m.linear(&format!("{p}.attn.q"), d, d, xavier(d, d)),
                k: m.linear(&format!("{p}.attn.k"), d, d, xavier(d, d)),
                v: m.linear(&format!("{p}.attn.v"), d, d, xavier(d, d)),
                o: m.linear(&format!("{p}.attn.o"), d, d, xavier(d, d)),
                ln1: m.norm(&format!("{p}.ln1"), d),
                ff1: m.linear(&format!("{p}.ffn.in"), d, c.d_ff, xavier(d, c.d_ff)),
                ff2: m.linear(&format!("{p}.ffn.out"), c.d_ff, d, xavier(c.d_ff, d)),
                ln2: m.norm(&format!("{p}.ln2"), d),
            };
            m.layers.push(layer);
        }
        m.head = m.linear("head", d, 1, INIT_STD);
        Ok(m)
    }

    fn push(&mut self, name: String, value: Array2<f64>) -> ParamId {
        self.tensors.push(Tensor {
            name,
            value,
            trainable: true,
        });
        ParamId(self.tensors.len() - 1)
    }

    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.push(name.to_string(), value)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Linear {
        let w = self.normal(&format!("{name}.weight"), fan_in, fan_out, std);
        let b = self.push(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let gamma = self.push(format!("{name}.gamma"), Array2::ones((1, d)));
        let beta = self.push(format!("{name}.beta"), Array2::zeros((1, d)));
        Norm { gamma, beta }
    }

    /// Adds a named adapter set. Its head starts as a copy of the base head.
    pub fn add_adapter_set(&mut self, name: &str) -> Result<()> {
        if self.adapters.iter().any(|a| a.name == name) {
            return Err(Error::invalid(format!(
                "adapter set {name:?} already exists"
            )));
        }
        // Adapter init depends only on the seed and the set name, so adding a
        // set to a reloaded checkpoint matches adding it in-process.
        let salt = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        self.rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ salt);
        let d = self.config.d_model;
        let b = self.config.adapter_width;
        let mut layers = Vec::with_capacity(self.config.layers);
        for i in 0..self.config.layers {
            let mut pair = Vec::with_capacity(2);
            for site in ["attn", "ffn"] {
                let p = format!("adapters.{name}.layers.{i}.{site}");
                let down = self.linear(&format!("{p}.down"), d, b, xavier(d, b));
                let up = self.linear(&format!("{p}.up"), b, d, ADAPTER_UP_STD);
                pair.push(Adapter { down, up });
            }
            layers.push([pair[0], pair[1]]);
        }
        let hw = self.tensors[self.head.w.0].value.clone();
        let hb = self.tensors[self.head.b.0].value.clone();
        let head = Linear {
            w: self.push(format!("adapters.{name}.head.weight"), hw),
            b: self.push(format!("adapters.{name}.head.bias"), hb),
        };
        self.adapters.push(AdapterSet {
            name: name.to_string(),
            layers,
            head,
        });
        Ok(())
    }

    /// Selects the adapter set (and its head) used by forward passes; `None`
    /// runs the bare encoder with the base head.
    pub fn set_active_adapter(&mut self, name: Option<&str>) -> Result<()> {
        self.active = match name {
            None => None,
            Some(n) => Some(
                self.adapters
                    .iter()
                    .position(|a| a.name == n)
                    .ok_or_else(|| Error::invalid(format!("no adapter set named {n:?}")))?,
            ),
        };
        Ok(())
    }

    pub fn active_adapter(&self) -> Option<&str> {
        self.active.map(|i| self.adapters[i].name.as_str())
    }

    pub fn adapter_names(&self) -> Vec<String> {
        self.adapters.iter().map(|a| a.name.clone()).collect()
    }

    pub fn has_adapter(&self, name: &str) -> bool {
        self.adapters.iter().any(|a| a.name == name)
    }

    pub(crate) fn active_set(&self) -> Option<&AdapterSet> {
        self.active.map(|i| &self.adapters[i])
    }

    pub(crate) fn active_head(&self) -> Linear {
        self.active_set().map_or(self.head, |a| a.head)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Switches graph-block attention; only the mask changes, no tensors.
    pub fn set_graph_attention(&mut self, mode: GraphAttention) {
        self.config.graph_attention = mode;
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    /// Ids of the tensors that belong to the named adapter set.
    pub fn adapter_tensor_ids(&self, name: &str) -> Vec<ParamId> {
        let prefix = format!("adapters.{name}.");
        (0..self.tensors.len())
            .filter(|&i| self.tensors[i].name.starts_with(&prefix))
            .map(ParamId)
            .collect()
    }

    pub fn set_trainable(&mut self, policy: TrainablePolicy) -> Result<ParamCounts> {
        match policy {
            TrainablePolicy::Full => {
                for t in &mut self.tensors {
                    t.trainable = true;
                }
            }
            TrainablePolicy::AdaptersAndHeadOnly => {
                let set = self.active_set().ok_or_else(|| {
                    Error::invalid("adapter-only training needs an active adapter set")
                })?;
                let keep = self.adapter_tensor_ids(&set.name.clone());
                for t in &mut self.tensors {
                    t.trainable = false;
                }
                for id in keep {
                    self.tensors[id.0].trainable = true;
                }
            }
        }
        let counts = self.param_counts();
        log::info!(
            "trainable parameters: {} / {} ({:.2}%)",
            counts.trainable,
            counts.total,
            100.0 * counts.trainable_fraction()
        );
        Ok(counts)
    }

    pub fn param_counts(&self) -> ParamCounts {
        let total = self.tensors.iter().map(|t| t.value.len()).sum();
        let trainable = self
            .tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.value.len())
            .sum();
        ParamCounts { total, trainable }
    }

    /// SHA-256 over the names and little-endian values of every tensor that is
    /// not part of an adapter set (embeddings, encoder layers, base head).
    pub fn base_tensor_hash(&self) -> String {
        self.hash_where(|t| !t.name.starts_with("adapters."))
    }

    pub fn tensor_hash(&self) -> String {
        self.hash_where(|_| true)
    }

    fn hash_where(&self, keep: impl Fn(&Tensor) -> bool) -> String {
        let mut bytes = Vec::new();
        for t in self.tensors.iter().filter(|t| keep(t)) {
            bytes.extend_from_slice(t.name.as_bytes());
            for v in t.value.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hex_digest(&bytes)
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Gradients for trainable tensors, indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct GradientSet {
    grads: Vec<Option<Array2<f64>>>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParameters) -> Self {
        Self {
            grads: params
                .tensors
                .iter()
                .map(|t| t.trainable.then(|| Array2::zeros(t.value.raw_dim())))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    pub fn by_name<'a>(&'a self, params: &ModelParameters, name: &str) -> Option<&'a Array2<f64>> {
        params.find(name).and_then(|id| self.get(id))
    }

    pub(crate) fn slot(&mut self, id: ParamId) -> Option<&mut Array2<f64>> {
        self.grads[id.0].as_mut()
    }

    pub(crate) fn slots2(
        &mut self,
        a: ParamId,
        b: ParamId,
    ) -> (Option<&mut Array2<f64>>, Option<&mut Array2<f64>>) {
        assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.grads.split_at_mut(b.0);
            (lo[a.0].as_mut(), hi[0].as_mut())
        } else {
            let (lo, hi) = self.grads.split_at_mut(a.0);
            (hi[0].as_mut(), lo[b.0].as_mut())
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds `other` into `self` in place.
    pub fn accumulate(&mut self, other: &GradientSet) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn clear(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }
}
