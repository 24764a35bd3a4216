//! Post-norm Transformer encoder with structurally masked self-attention,
//! optional bottleneck adapters, and exact reverse-mode gradients.

mod ops;
mod params;

pub use ops::{gelu, layer_norm, softmax_rows};
pub use params::{
    Adapter, AdapterSet, GradientSet, LayerParams, Linear, ModelConfig, ModelParameters, Norm,
    ParamCounts, ParamId, Tensor, TrainablePolicy,
};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::sequencer::InputSequence;
use ops::{
    gelu_backward, layer_norm_backward, linear, linear_backward, softmax_rows_backward,
    LayerNormCache,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, driven by this seed.
    Train {
        seed: u64,
    },
}

/// Borrowed attention projections, `d×d` weights and `1×d` biases.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a> {
    pub wq: &'a Array2<f64>,
    pub bq: &'a Array2<f64>,
    pub wk: &'a Array2<f64>,
    pub bk: &'a Array2<f64>,
    pub wv: &'a Array2<f64>,
    pub bv: &'a Array2<f64>,
    pub wo: &'a Array2<f64>,
    pub bo: &'a Array2<f64>,
}

struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn new(rate: f64, mode: Mode) -> Self {
        match mode {
            Mode::Train { seed } if rate > 0.0 => Self {
                rate,
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            },
            _ => Self { rate, rng: None },
        }
    }

    /// Scaled keep-mask, or `None` when dropout is inactive.
    fn mask(&mut self, shape: (usize, usize)) -> Option<Array2<f64>> {
        let rate = self.rate;
        let rng = self.rng.as_mut()?;
        let keep = 1.0 / (1.0 - rate);
        Some(Array2::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        }))
    }
}

fn apply(x: Array2<f64>, m: &Option<Array2<f64>>) -> Array2<f64> {
    match m {
        Some(m) => x * m,
        None => x,
    }
}

struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax output per head, before dropout.
    probs: Vec<Array2<f64>>,
    drop: Vec<Option<Array2<f64>>>,
    ctx: Array2<f64>,
}

struct AdapterCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

struct LayerCache {
    x: Array2<f64>,
    attn: AttnCache,
    drop1: Option<Array2<f64>>,
    ad1: Option<AdapterCache>,
    ln1: LayerNormCache,
    y1: Array2<f64>,
    h1: Array2<f64>,
    g1: Array2<f64>,
    drop2: Option<Array2<f64>>,
    ad2: Option<AdapterCache>,
    ln2: LayerNormCache,
}

struct Trace {
    question_ids: Vec<usize>,
    node_ids: Vec<Vec<usize>>,
    positions: Vec<usize>,
    layers: Vec<LayerCache>,
    output: Array2<f64>,
}

/// Records one forward pass so gradients can be taken afterwards.
#[derive(Default)]
pub struct Tape {
    trace: Option<Trace>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.trace.is_some()
    }

    /// Hidden states entering each layer followed by the final output.
    pub fn layer_outputs(&self) -> Vec<Array2<f64>> {
        match &self.trace {
            None => Vec::new(),
            Some(t) => t
                .layers
                .iter()
                .map(|l| l.x.clone())
                .chain(std::iter::once(t.output.clone()))
                .collect(),
        }
    }

    /// Back-propagates `d_hidden` (gradient of the loss w.r.t. the final
    /// hidden states) into `grads`. Frozen tensors receive nothing.
    pub fn backward(
        &self,
        params: &ModelParameters,
        d_hidden: &Array2<f64>,
        grads: &mut GradientSet,
    ) -> Result<()> {
        let trace = self.trace.as_ref().ok_or(Error::NoForward)?;
        if d_hidden.dim() != trace.output.dim() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match hidden states {:?}",
                d_hidden.dim(),
                trace.output.dim()
            )));
        }
        params.backward(trace, d_hidden.clone(), grads);
        Ok(())
    }
}

/// Multi-head attention with an additive mask shared across heads:
/// `softmax(Q Kᵀ / sqrt(d_head) + M) V`, then the output projection.
pub fn masked_attention(
    x: &Array2<f64>,
    mask: &AttentionMask,
    w: AttentionWeights<'_>,
    heads: usize,
) -> Result<Array2<f64>> {
    let (l, d) = x.dim();
    if mask.len() != l {
        return Err(Error::Shape(format!("mask {} vs sequence {l}", mask.len())));
    }
    for (name, m, rows) in [
        ("wq", w.wq, d),
        ("wk", w.wk, d),
        ("wv", w.wv, d),
        ("wo", w.wo, d),
    ] {
        if m.dim() != (rows, d) {
            return Err(Error::Shape(format!(
                "{name} is {:?}, expected ({d}, {d})",
                m.dim()
            )));
        }
    }
    for (name, b) in [("bq", w.bq), ("bk", w.bk), ("bv", w.bv), ("bo", w.bo)] {
        if b.dim() != (1, d) {
            return Err(Error::Shape(format!(
                "{name} is {:?}, expected (1, {d})",
                b.dim()
            )));
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!(
            "{d} not divisible into {heads} heads"
        )));
    }
    let mut drop = Dropout::new(0.0, Mode::Eval);
    let (out, _) = attention_forward(&x.view(), mask.values(), &w, heads, &mut drop);
    Ok(out)
}

fn attention_forward(
    x: &ArrayView2<f64>,
    mask: &Array2<f64>,
    w: &AttentionWeights<'_>,
    heads: usize,
    drop: &mut Dropout,
) -> (Array2<f64>, AttnCache) {
    let (l, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(x, w.wq, w.bq);
    let k = linear(x, w.wk, w.bk);
    let v = linear(x, w.wv, w.bv);
    let mut ctx = Array2::zeros((l, d));
    let mut probs = Vec::with_capacity(heads);
    let mut drops = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|a| a * scale);
        scores += mask;
        let p = ops::softmax_rows(&scores);
        let dm = drop.mask((l, l));
        let pd = apply(p.clone(), &dm);
        ctx.slice_mut(cols).assign(&pd.dot(&v.slice(cols)));
        probs.push(p);
        drops.push(dm);
    }
    let out = linear(&ctx.view(), w.wo, w.bo);
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            drop: drops,
            ctx,
        },
    )
}

impl ModelParameters {
    fn attention_weights(&self, layer: &LayerParams) -> AttentionWeights<'_> {
        AttentionWeights {
            wq: self.value(layer.q.w),
            bq: self.value(layer.q.b),
            wk: self.value(layer.k.w),
            bk: self.value(layer.k.b),
            wv: self.value(layer.v.w),
            bv: self.value(layer.v.b),
            wo: self.value(layer.o.w),
            bo: self.value(layer.o.b),
        }
    }

    fn lin(&self, l: Linear, x: &ArrayView2<f64>) -> Array2<f64> {
        linear(x, self.value(l.w), self.value(l.b))
    }

    fn lin_back(
        &self,
        grads: &mut GradientSet,
        l: Linear,
        x: &ArrayView2<f64>,
        dy: &Array2<f64>,
    ) -> Array2<f64> {
        let (dw, db) = grads.slots2(l.w, l.b);
        linear_backward(x, self.value(l.w), dy, dw, db)
    }

    /// Sum of a node label's subword embeddings.
    pub fn embed_node(&self, subword_ids: &[usize]) -> Array2<f64> {
        let table = self.value(self.token_emb);
        let mut out = Array2::zeros((1, self.config.d_model));
        for &id in subword_ids {
            let mut row = out.row_mut(0);
            row += &table.row(id);
        }
        out
    }

    /// Input embedding matrix: token (or summed subword) embeddings plus
    /// position embeddings.
    pub fn embed(&self, input: &InputSequence) -> Result<Array2<f64>> {
        self.embed_ids(&input.question_ids, &input.node_ids, &input.positions)
    }

    fn embed_ids(
        &self,
        question_ids: &[usize],
        node_ids: &[Vec<usize>],
        positions: &[usize],
    ) -> Result<Array2<f64>> {
        let n_q = question_ids.len();
        let l = n_q + node_ids.len();
        let c = &self.config;
        if positions.len() != l {
            return Err(Error::Shape(format!(
                "{} position ids for {l} tokens",
                positions.len()
            )));
        }
        if let Some(p) = positions.iter().find(|&&p| p >= c.max_len) {
            return Err(Error::Shape(format!(
                "position {p} exceeds max_len {}",
                c.max_len
            )));
        }
        if positions[n_q..].iter().any(|&p| p < n_q) {
            return Err(Error::Shape(
                "graph token positioned inside the question".into(),
            ));
        }
        let table = self.value(self.token_emb);
        let all = question_ids
            .iter()
            .map(std::slice::from_ref)
            .chain(node_ids.iter().map(Vec::as_slice));
        for id in all.clone().flatten() {
            if *id >= table.nrows() {
                return Err(Error::Shape(format!("token id {id} outside vocabulary")));
            }
        }
        let pos = self.value(self.pos_emb);
        let gpos = self.graph_pos_emb.map(|p| self.value(p));
        let mut x = Array2::zeros((l, c.d_model));
        for (i, ids) in all.enumerate() {
            let mut row = x.row_mut(i);
            for &id in ids {
                row += &table.row(id);
            }
            let p = positions[i];
            match gpos {
                Some(g) if i >= n_q => row += &g.row(p - n_q),
                _ => row += &pos.row(p),
            }
        }
        Ok(x)
    }

    pub fn forward(&self, input: &InputSequence, mode: Mode) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        self.forward_recorded(input, mode, &mut tape)
    }

    /// Forward pass that leaves everything needed for [`Tape::backward`] on `tape`.
    pub fn forward_recorded(
        &self,
        input: &InputSequence,
        mode: Mode,
        tape: &mut Tape,
    ) -> Result<Array2<f64>> {
        let mut x = self.embed(input)?;
        let mask = input.mask.values();
        if mask.nrows() != x.nrows() {
            return Err(Error::Shape(format!(
                "mask {} vs sequence {}",
                mask.nrows(),
                x.nrows()
            )));
        }
        let mut drop = Dropout::new(self.config.dropout, mode);
        let adapters = self.active_set();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let ad = adapters.map(|a| a.layers[li]);
            let (y, cache) = self.layer_forward(x, mask, layer, ad, &mut drop);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {li}")));
            }
            caches.push(cache);
            x = y;
        }
        tape.trace = Some(Trace {
            question_ids: input.question_ids.clone(),
            node_ids: input.node_ids.clone(),
            positions: input.positions.clone(),
            layers: caches,
            output: x.clone(),
        });
        Ok(x)
    }

    fn adapter_forward(&self, a: Adapter, input: Array2<f64>) -> (Array2<f64>, AdapterCache) {
        let pre = self.lin(a.down, &input.view());
        let act = ops::gelu(&pre);
        let out = &input + &self.lin(a.up, &act.view());
        (out, AdapterCache { input, pre, act })
    }

    fn adapter_backward(
        &self,
        grads: &mut GradientSet,
        a: Adapter,
        cache: &AdapterCache,
        dy: Array2<f64>,
    ) -> Array2<f64> {
        let dact = self.lin_back(grads, a.up, &cache.act.view(), &dy);
        let dpre = gelu_backward(&cache.pre, &dact);
        let din = self.lin_back(grads, a.down, &cache.input.view(), &dpre);
        dy + din
    }

    fn layer_forward(
        &self,
        x: Array2<f64>,
        mask: &Array2<f64>,
        layer: &LayerParams,
        adapters: Option<[Adapter; 2]>,
        drop: &mut Dropout,
    ) -> (Array2<f64>, LayerCache) {
        let heads = self.config.heads;
        let w = self.attention_weights(layer);
        let (a, attn) = attention_forward(&x.view(), mask, &w, heads, drop);
        let drop1 = drop.mask(a.dim());
        let a = apply(a, &drop1);
        let (a, ad1) = match adapters {
            Some([first, _]) => {
                let (o, c) = self.adapter_forward(first, a);
                (o, Some(c))
            }
            None => (a, None),
        };
        let (y1, ln1) = ops::layer_norm(
            &(&x + &a),
            self.value(layer.ln1.gamma),
            self.value(layer.ln1.beta),
        );
        let h1 = self.lin(layer.ff1, &y1.view());
        let g1 = ops::gelu(&h1);
        let f = self.lin(layer.ff2, &g1.view());
        let drop2 = drop.mask(f.dim());
        let f = apply(f, &drop2);
        let (f, ad2) = match adapters {
            Some([_, second]) => {
                let (o, c) = self.adapter_forward(second, f);
                (o, Some(c))
            }
            None => (f, None),
        };
        let (y2, ln2) = ops::layer_norm(
            &(&y1 + &f),
            self.value(layer.ln2.gamma),
            self.value(layer.ln2.beta),
        );
        (
            y2,
            LayerCache {
                x,
                attn,
                drop1,
                ad1,
                ln1,
                y1,
                h1,
                g1,
                drop2,
                ad2,
                ln2,
            },
        )
    }

    fn backward(&self, trace: &Trace, d_out: Array2<f64>, grads: &mut GradientSet) {
        let adapters = self.active_set();
        let mut dy = d_out;
        for (li, (layer, cache)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            let ad = adapters.map(|a| a.layers[li]);
            dy = self.layer_backward(layer, ad, cache, dy, grads);
        }
        self.embed_backward(trace, &dy, grads);
    }

    fn embed_backward(&self, trace: &Trace, dx: &Array2<f64>, grads: &mut GradientSet) {
        let n_q = trace.question_ids.len();
        let all = trace
            .question_ids
            .iter()
            .map(std::slice::from_ref)
            .chain(trace.node_ids.iter().map(Vec::as_slice));
        if let Some(g) = grads.slot(self.token_emb) {
            for (i, ids) in all.enumerate() {
                for &id in ids {
                    let mut row = g.row_mut(id);
                    row += &dx.row(i);
                }
            }
        }
        for (i, &p) in trace.positions.iter().enumerate() {
            let (table, row) = match self.graph_pos_emb {
                Some(gp) if i >= n_q => (gp, p - n_q),
                _ => (self.pos_emb, p),
            };
            if let Some(g) = grads.slot(table) {
                let mut r = g.row_mut(row);
                r += &dx.row(i);
            }
        }
    }

    fn layer_backward(
        &self,
        layer: &LayerParams,
        adapters: Option<[Adapter; 2]>,
        c: &LayerCache,
        dy2: Array2<f64>,
        grads: &mut GradientSet,
    ) -> Array2<f64> {
        // y2 = LN2(y1 + f)
        let dres2 = {
            let (dg, db) = grads.slots2(layer.ln2.gamma, layer.ln2.beta);
            layer_norm_backward(&c.ln2, self.value(layer.ln2.gamma), &dy2, dg, db)
        };
        let mut df = dres2.clone();
        let mut dy1 = dres2;
        if let (Some([_, second]), Some(cache)) = (adapters, &c.ad2) {
            df = self.adapter_backward(grads, second, cache, df);
        }
        let df = apply(df, &c.drop2);
        let dg1 = self.lin_back(grads, layer.ff2, &c.g1.view(), &df);
        let dh1 = gelu_backward(&c.h1, &dg1);
        dy1 += &self.lin_back(grads, layer.ff1, &c.y1.view(), &dh1);

        // y1 = LN1(x + a)
        let dres1 = {
            let (dg, db) = grads.slots2(layer.ln1.gamma, layer.ln1.beta);
            layer_norm_backward(&c.ln1, self.value(layer.ln1.gamma), &dy1, dg, db)
        };
        let mut da = dres1.clone();
        let mut dx = dres1;
        if let (Some([first, _]), Some(cache)) = (adapters, &c.ad1) {
            da = self.adapter_backward(grads, first, cache, da);
        }
        let da = apply(da, &c.drop1);
        let dctx = self.lin_back(grads, layer.o, &c.attn.ctx.view(), &da);

        let heads = self.config.heads;
        let d = self.config.d_model;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let l = c.x.nrows();
        let mut dq = Array2::zeros((l, d));
        let mut dk = Array2::zeros((l, d));
        let mut dv = Array2::zeros((l, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.attn.probs[h];
            let pd = apply(p.clone(), &c.attn.drop[h]);
            let dctx_h = dctx.slice(cols);
            let vh = c.attn.v.slice(cols);
            dv.slice_mut(cols).assign(&pd.t().dot(&dctx_h));
            let dpd = dctx_h.dot(&vh.t());
            let dp = apply(dpd, &c.attn.drop[h]);
            let mut dscores = softmax_rows_backward(p, &dp);
            dscores.mapv_inplace(|g| g * scale);
            dq.slice_mut(cols)
                .assign(&dscores.dot(&c.attn.k.slice(cols)));
            dk.slice_mut(cols)
                .assign(&dscores.t().dot(&c.attn.q.slice(cols)));
        }
        let xv = c.x.view();
        dx += &self.lin_back(grads, layer.q, &xv, &dq);
        dx += &self.lin_back(grads, layer.k, &xv, &dk);
        dx += &self.lin_back(grads, layer.v, &xv, &dv);
        dx
    }

    /// Rows of the attention probability matrices (per layer, per head) from
    /// an eval-mode pass. Used by diagnostics and tests.
    pub fn attention_probabilities(&self, input: &InputSequence) -> Result<Vec<Vec<Array2<f64>>>> {
        let mut tape = Tape::new();
        self.forward_recorded(input, Mode::Eval, &mut tape)?;
        let trace = tape.trace.expect("recorded");
        Ok(trace.layers.into_iter().map(|l| l.attn.probs).collect())
    }
}

/// Sums `rows` of `x` selected by `positions` against a `d×1` head.
pub(crate) fn gather_rows(x: &Array2<f64>, positions: &[usize]) -> Array2<f64> {
    x.select(Axis(0), positions)
}
