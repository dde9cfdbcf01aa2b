//! Multi-head attention, post-norm encoder and fusion blocks, positional
//! embeddings, and the attention recording consumed by [`crate::relevancy`].
//!
//! Every attention layer pushes the post-softmax probabilities of each head
//! into a [`TraceSink`]. After `backward`, [`TraceSink::collect`] turns the
//! recorded nodes into [`AttentionTrace`]s holding both `A` and `∂y/∂A`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Seeded parameter initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut self.rng)).collect())
            .expect("shape")
    }

    /// Glorot-uniform weight for an `fan_in × fan_out` projection.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-limit..limit))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("shape")
    }
}

/// Dropout state for a training pass.
#[derive(Debug)]
struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// One forward pass: a tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    dropout: Option<Dropout>,
}

impl<'p> Graph<'p> {
    /// Inference-mode graph; dropout is off.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            dropout: None,
        }
    }

    /// Training-mode graph with dropout at `rate`, drawn from `seed`.
    pub fn training(store: &'p ParamStore, rate: f64, seed: u64) -> Self {
        let mut g = Self::new(store);
        if rate > 0.0 {
            g.dropout = Some(Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
        g
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every parameter after `tape.backward`; unreached
    /// parameters get zeros.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| self.tape.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect()
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(d) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - d.rate;
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.mask(x, mask)
    }
}

/// Hidden sizes shared by every attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Training only; interpretation passes never apply dropout.
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            dropout: 0.0,
            layer_norm_eps: 1e-9,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model, n_heads and d_ff must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    TextSelf,
    AudioSelf,
    Cross,
    SpeechSelf,
}

/// Which stack a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AudioEncoder,
    TextEncoder,
    Fusion,
    Speech,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub kind: AttnKind,
    pub stage: Stage,
    pub depth: usize,
    /// Sentence position for sentence-level layers.
    pub sentence: Option<usize>,
}

/// Adds `delta` to one pre-softmax logit of one recorded layer. Used to
/// check `∂y/∂A` against finite differences.
#[derive(Clone, Copy, Debug)]
pub struct LogitPerturbation {
    pub seq: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct TraceRecord {
    pub layer: LayerId,
    pub seq: usize,
    pub heads: Vec<Var>,
}

/// Collects attention nodes in forward execution order.
#[derive(Debug, Default)]
pub struct TraceSink {
    records: Vec<TraceRecord>,
    sentence: Option<usize>,
    perturbation: Option<LogitPerturbation>,
}

impl TraceSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_perturbation(p: LogitPerturbation) -> Self {
        Self {
            perturbation: Some(p),
            ..Self::default()
        }
    }

    /// Tags subsequently recorded sentence-level layers with `sentence`.
    pub fn set_sentence(&mut self, sentence: Option<usize>) {
        self.sentence = sentence;
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn next_seq(&self) -> usize {
        self.records.len()
    }

    fn layer(&self, kind: AttnKind, stage: Stage, depth: usize) -> LayerId {
        LayerId {
            kind,
            stage,
            depth,
            sentence: if stage == Stage::Speech { None } else { self.sentence },
        }
    }

    /// Materializes every record as an [`AttentionTrace`], attaching
    /// gradients if a backward pass has run.
    pub fn collect(&self, tape: &Tape) -> Result<Vec<AttentionTrace>> {
        self.records.iter().map(|r| AttentionTrace::from_record(r, tape)).collect()
    }
}

/// Post-softmax attention probabilities of one layer, per head, with their
/// gradients once available. Both tensors are `[heads, queries, keys]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub layer: LayerId,
    pub seq: usize,
    pub attn: Tensor,
    pub grad: Option<Tensor>,
}

impl AttentionTrace {
    fn from_record(r: &TraceRecord, tape: &Tape) -> Result<Self> {
        let first = tape.value(r.heads[0]);
        let (q, k) = (first.rows(), first.cols());
        let h = r.heads.len();
        let mut attn = Vec::with_capacity(h * q * k);
        let mut grad = Vec::with_capacity(h * q * k);
        let mut has_grad = true;
        for &v in &r.heads {
            attn.extend_from_slice(tape.value(v).data());
            match tape.grad(v) {
                Some(g) => grad.extend_from_slice(g.data()),
                None => has_grad = false,
            }
        }
        Ok(Self {
            layer: r.layer,
            seq: r.seq,
            attn: Tensor::new(vec![h, q, k], attn)?,
            grad: if has_grad {
                Some(Tensor::new(vec![h, q, k], grad)?)
            } else {
                None
            },
        })
    }

    /// Builds a trace directly from per-head matrices.
    pub fn from_heads(layer: LayerId, seq: usize, attn: &[Tensor], grad: Option<&[Tensor]>) -> Result<Self> {
        let stack = |ms: &[Tensor]| -> Result<Tensor> {
            let first = ms.first().ok_or(Error::Empty("attention heads"))?;
            let (q, k) = first.as_matrix("attention head")?;
            let mut data = Vec::with_capacity(ms.len() * q * k);
            for m in ms {
                first.same_shape("attention head", m)?;
                data.extend_from_slice(m.data());
            }
            Tensor::new(vec![ms.len(), q, k], data)
        };
        Ok(Self {
            layer,
            seq,
            attn: stack(attn)?,
            grad: grad.map(stack).transpose()?,
        })
    }

    pub fn heads(&self) -> usize {
        self.attn.shape()[0]
    }

    pub fn queries(&self) -> usize {
        self.attn.shape()[1]
    }

    pub fn keys(&self) -> usize {
        self.attn.shape()[2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), init.glorot(d_in, d_out)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Projections of one multi-head attention layer.
#[derive(Clone, Debug)]
pub struct AttentionLayerParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl AttentionLayerParams {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &BlockConfig) -> Self {
        let d = cfg.d_model;
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), d, d),
            k: Linear::new(store, init, &format!("{name}.k"), d, d),
            v: Linear::new(store, init, &format!("{name}.v"), d, d),
            o: Linear::new(store, init, &format!("{name}.o"), d, d),
            n_heads: cfg.n_heads,
            d_model: d,
        }
    }
}

/// Scaled dot-product attention per head, heads concatenated and projected.
/// Records one trace of kind `kind` into `sink`.
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    params: &AttentionLayerParams,
    sink: &mut TraceSink,
    kind: AttnKind,
    stage: Stage,
    depth: usize,
) -> Result<Var> {
    let d = params.d_model;
    for x in [queries, keys_values] {
        let t = g.tape.value(x);
        if t.rank() != 2 || t.cols() != d {
            return Err(Error::Shape {
                op: "multi_head_attention",
                left: vec![d],
                right: t.shape().to_vec(),
            });
        }
        if t.rows() == 0 {
            return Err(Error::Empty("attention sequence"));
        }
    }
    let seq = sink.next_seq();
    let layer = sink.layer(kind, stage, depth);
    let q = params.q.forward(g, queries)?;
    let k = params.k.forward(g, keys_values)?;
    let v = params.v.forward(g, keys_values)?;
    let dh = d / params.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(params.n_heads);
    let mut outs = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let qh = g.tape.slice_cols(q, h * dh, dh)?;
        let kh = g.tape.slice_cols(k, h * dh, dh)?;
        let vh = g.tape.slice_cols(v, h * dh, dh)?;
        let raw = g.tape.matmul_bt(qh, kh)?;
        let mut logits = g.tape.scale(raw, scale)?;
        if let Some(p) = sink.perturbation.filter(|p| p.seq == seq && p.head == h) {
            let mut delta = Tensor::zeros(g.tape.value(logits).shape());
            delta.set(p.row, p.col, p.delta);
            let dv = g.tape.constant(delta);
            logits = g.tape.add(logits, dv)?;
        }
        let a = g.tape.softmax_rows(logits)?;
        heads.push(a);
        outs.push(g.tape.matmul(a, vh)?);
    }
    sink.records.push(TraceRecord { layer, seq, heads });
    let cat = if outs.len() == 1 { outs[0] } else { g.tape.concat_cols(&outs)? };
    params.o.forward(g, cat)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &BlockConfig) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), cfg.d_model, cfg.d_ff),
            down: Linear::new(store, init, &format!("{name}.down"), cfg.d_ff, cfg.d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Post-norm self-attention encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: AttentionLayerParams,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &BlockConfig) -> Self {
        Self {
            attn: AttentionLayerParams::new(store, init, &format!("{name}.attn"), cfg),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model, cfg.layer_norm_eps),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), cfg),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model, cfg.layer_norm_eps),
        }
    }
}

/// Self-attention, residual, layer norm, feed-forward, residual, layer norm.
/// Emits exactly one trace.
pub fn encoder_block_forward(
    g: &mut Graph,
    x: Var,
    layer: &EncoderLayer,
    sink: &mut TraceSink,
    kind: AttnKind,
    stage: Stage,
    depth: usize,
) -> Result<Var> {
    let a = multi_head_attention(g, x, x, &layer.attn, sink, kind, stage, depth)?;
    let a = g.dropout(a)?;
    let r = g.tape.add(x, a)?;
    let h = layer.norm1.forward(g, r)?;
    let f = layer.ff.forward(g, h)?;
    let f = g.dropout(f)?;
    let r = g.tape.add(h, f)?;
    layer.norm2.forward(g, r)
}

/// Decoder-style fusion block: unmasked text self-attention, cross-attention
/// from text queries to audio memory, feed-forward.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub self_attn: AttentionLayerParams,
    pub norm1: LayerNorm,
    pub cross_attn: AttentionLayerParams,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &BlockConfig) -> Self {
        let d = cfg.d_model;
        let eps = cfg.layer_norm_eps;
        Self {
            self_attn: AttentionLayerParams::new(store, init, &format!("{name}.self_attn"), cfg),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, eps),
            cross_attn: AttentionLayerParams::new(store, init, &format!("{name}.cross_attn"), cfg),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, eps),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), cfg),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d, eps),
        }
    }
}

/// Emits a text-self trace followed by a cross trace of shape `h×t×a`.
pub fn decoder_fusion_block_forward(
    g: &mut Graph,
    text_x: Var,
    audio_mem: Var,
    block: &FusionBlock,
    sink: &mut TraceSink,
    depth: usize,
) -> Result<Var> {
    let s = multi_head_attention(g, text_x, text_x, &block.self_attn, sink, AttnKind::TextSelf, Stage::Fusion, depth)?;
    let s = g.dropout(s)?;
    let r = g.tape.add(text_x, s)?;
    let h1 = block.norm1.forward(g, r)?;
    let c = multi_head_attention(g, h1, audio_mem, &block.cross_attn, sink, AttnKind::Cross, Stage::Fusion, depth)?;
    let c = g.dropout(c)?;
    let r = g.tape.add(h1, c)?;
    let h2 = block.norm2.forward(g, r)?;
    let f = block.ff.forward(g, h2)?;
    let f = g.dropout(f)?;
    let r = g.tape.add(h2, f)?;
    block.norm3.forward(g, r)
}

/// `x[i] + table[i]` for the first `n` rows of a learned table.
pub fn add_positional_embeddings(g: &mut Graph, x: Var, table: ParamId) -> Result<Var> {
    let n = g.tape.value(x).rows();
    let capacity = g.store().get(table).rows();
    if n > capacity {
        return Err(Error::Capacity { len: n, capacity });
    }
    let t = g.param(table);
    let rows = g.tape.slice_rows(t, 0, n)?;
    g.tape.add(x, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, softmax_rows};

    fn cfg(d: usize, heads: usize) -> BlockConfig {
        BlockConfig {
            d_model: d,
            n_heads: heads,
            d_ff: 2 * d,
            ..BlockConfig::default()
        }
    }

    fn random_input(seed: u64, n: usize, d: usize) -> Tensor {
        Initializer::new(seed).normal(&[n, d], 1.0)
    }

    #[test]
    fn config_requires_divisible_heads() {
        assert!(cfg(6, 4).validate().is_err());
        assert!(cfg(8, 4).validate().is_ok());
    }

    #[test]
    fn single_position_attention_is_one() {
        let mut store = ParamStore::default();
        let p = AttentionLayerParams::new(&mut store, &mut Initializer::new(1), "a", &cfg(8, 2));
        let mut g = Graph::new(&store);
        let x = g.tape.constant(random_input(2, 1, 8));
        let mut sink = TraceSink::new();
        multi_head_attention(&mut g, x, x, &p, &mut sink, AttnKind::TextSelf, Stage::TextEncoder, 0).unwrap();
        let t = &sink.collect(&g.tape).unwrap()[0];
        assert_eq!(t.attn.shape(), &[2, 1, 1]);
        assert!(t.attn.data().iter().all(|&v| v == 1.0));
        assert!(t.grad.is_none());
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let mut store = ParamStore::default();
        let p = AttentionLayerParams::new(&mut store, &mut Initializer::new(3), "a", &cfg(8, 2));
        let mut g = Graph::new(&store);
        let q = g.tape.constant(random_input(4, 3, 8));
        let row = random_input(5, 1, 8);
        let kv = g.tape.constant(Tensor::new(vec![4, 8], row.data().repeat(4)).unwrap());
        let mut sink = TraceSink::new();
        multi_head_attention(&mut g, q, kv, &p, &mut sink, AttnKind::Cross, Stage::Fusion, 0).unwrap();
        let t = &sink.collect(&g.tape).unwrap()[0];
        for v in t.attn.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn heads_decompose_into_single_head_computations() {
        let c = cfg(8, 2);
        let mut store = ParamStore::default();
        let p = AttentionLayerParams::new(&mut store, &mut Initializer::new(6), "a", &c);
        // Give the projections non-zero biases so they are exercised too.
        for lin in [p.q, p.k, p.v, p.o] {
            *store.get_mut(lin.b) = Initializer::new(lin.b.index() as u64).normal(&[8], 0.3);
        }
        let x = random_input(7, 3, 8);
        let mut g = Graph::new(&store);
        let xv = g.tape.constant(x.clone());
        let mut sink = TraceSink::new();
        let out = multi_head_attention(&mut g, xv, xv, &p, &mut sink, AttnKind::TextSelf, Stage::TextEncoder, 0).unwrap();
        let out = g.tape.value(out).clone();

        // Oracle: each head on its own with plain matrix algebra.
        let proj = |lin: &Linear, x: &Tensor| {
            let mut y = matmul(x, store.get(lin.w)).unwrap();
            let b = store.get(lin.b).data().to_vec();
            for i in 0..y.rows() {
                for j in 0..y.cols() {
                    let v = y.get(i, j) + b[j];
                    y.set(i, j, v);
                }
            }
            y
        };
        let (q, k, v) = (proj(&p.q, &x), proj(&p.k, &x), proj(&p.v, &x));
        let cols = |t: &Tensor, s: usize| {
            Tensor::from_rows(&(0..t.rows()).map(|i| t.row(i)[s..s + 4].to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let mut concat = vec![vec![]; 3];
        for h in 0..2 {
            let (qh, kh, vh) = (cols(&q, 4 * h), cols(&k, 4 * h), cols(&v, 4 * h));
            let logits = matmul(&qh, &kh.transpose().unwrap()).unwrap().scale(0.5);
            let oh = matmul(&softmax_rows(&logits).unwrap(), &vh).unwrap();
            for (i, row) in concat.iter_mut().enumerate() {
                row.extend_from_slice(oh.row(i));
            }
        }
        let expected = proj(&p.o, &Tensor::from_rows(&concat).unwrap());
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        let mut store = ParamStore::default();
        let p = AttentionLayerParams::new(&mut store, &mut Initializer::new(1), "a", &cfg(8, 2));
        let mut g = Graph::new(&store);
        let bad = g.tape.constant(Tensor::zeros(&[2, 6]));
        let mut sink = TraceSink::new();
        assert!(multi_head_attention(&mut g, bad, bad, &p, &mut sink, AttnKind::TextSelf, Stage::TextEncoder, 0).is_err());
        let empty = g.tape.constant(Tensor::zeros(&[0, 8]));
        assert!(matches!(
            multi_head_attention(&mut g, empty, empty, &p, &mut sink, AttnKind::TextSelf, Stage::TextEncoder, 0),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn encoder_block_shape_and_single_trace() {
        let c = cfg(8, 2);
        let mut store = ParamStore::default();
        let layer = EncoderLayer::new(&mut store, &mut Initializer::new(9), "enc", &c);
        for n in 1..5 {
            let mut g = Graph::new(&store);
            let x = g.tape.constant(random_input(n as u64, n, 8));
            let mut sink = TraceSink::new();
            let y = encoder_block_forward(&mut g, x, &layer, &mut sink, AttnKind::SpeechSelf, Stage::Speech, 0).unwrap();
            assert_eq!(g.tape.value(y).shape(), &[n, 8]);
            assert_eq!(sink.len(), 1);
            let t = &sink.collect(&g.tape).unwrap()[0];
            for row in t.attn.data().chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encoder_block_single_token_hand_trace() {
        // With one token, attention output is o(v(x)), independent of q and k.
        let c = cfg(4, 1);
        let mut store = ParamStore::default();
        let layer = EncoderLayer::new(&mut store, &mut Initializer::new(10), "enc", &c);
        let x = random_input(11, 1, 4);
        let mut g = Graph::new(&store);
        let xv = g.tape.constant(x.clone());
        let mut sink = TraceSink::new();
        let y = encoder_block_forward(&mut g, xv, &layer, &mut sink, AttnKind::TextSelf, Stage::TextEncoder, 0).unwrap();
        let y = g.tape.value(y).clone();

        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            let w = store.get(l.w);
            let b = store.get(l.b).data();
            (0..w.cols()).map(|j| b[j] + (0..x.len()).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect()
        };
        let norm = |x: &[f64]| -> Vec<f64> {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            x.iter().map(|v| (v - m) / (var + 1e-9).sqrt()).collect()
        };
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let attn = lin(&layer.attn.o, &lin(&layer.attn.v, x.data()));
        let h: Vec<f64> = norm(&x.data().iter().zip(&attn).map(|(a, b)| a + b).collect::<Vec<_>>());
        let f = lin(&layer.ff.down, &lin(&layer.ff.up, &h).into_iter().map(gelu).collect::<Vec<_>>());
        let out = norm(&h.iter().zip(&f).map(|(a, b)| a + b).collect::<Vec<_>>());
        for (a, b) in y.data().iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(sink.collect(&g.tape).unwrap()[0].attn.data(), &[1.0]);
    }

    #[test]
    fn fusion_block_traces_and_zero_memory_ablation() {
        let c = cfg(8, 2);
        let mut store = ParamStore::default();
        let block = FusionBlock::new(&mut store, &mut Initializer::new(12), "fuse", &c);
        let text = random_input(13, 3, 8);
        let mut g = Graph::new(&store);
        let t = g.tape.constant(text.clone());
        let a = g.tape.constant(random_input(14, 5, 8));
        let mut sink = TraceSink::new();
        decoder_fusion_block_forward(&mut g, t, a, &block, &mut sink, 0).unwrap();
        let traces = sink.collect(&g.tape).unwrap();
        assert_eq!(traces.len(), 2);
        assert_eq!(traces[0].layer.kind, AttnKind::TextSelf);
        assert_eq!(traces[1].layer.kind, AttnKind::Cross);
        assert_eq!(traces[1].attn.shape(), &[2, 3, 5]);

        // Single audio key: every cross row is [1].
        let mut g = Graph::new(&store);
        let t = g.tape.constant(text.clone());
        let a = g.tape.constant(random_input(15, 1, 8));
        let mut sink = TraceSink::new();
        decoder_fusion_block_forward(&mut g, t, a, &block, &mut sink, 0).unwrap();
        assert!(sink.collect(&g.tape).unwrap()[1].attn.data().iter().all(|&v| v == 1.0));

        // Zero memory, zero value and output biases: the cross path adds nothing.
        let mut g = Graph::new(&store);
        let t = g.tape.constant(text);
        let a = g.tape.constant(Tensor::zeros(&[4, 8]));
        let mut sink = TraceSink::new();
        let full = decoder_fusion_block_forward(&mut g, t, a, &block, &mut sink, 0).unwrap();
        let full = g.tape.value(full).clone();

        let mut h = Graph::new(&store);
        let t = h.tape.constant(g.tape.value(t).clone());
        let mut sink = TraceSink::new();
        let s = multi_head_attention(&mut h, t, t, &block.self_attn, &mut sink, AttnKind::TextSelf, Stage::Fusion, 0).unwrap();
        let r = h.tape.add(t, s).unwrap();
        let h1 = block.norm1.forward(&mut h, r).unwrap();
        let h2 = block.norm2.forward(&mut h, h1).unwrap();
        let f = block.ff.forward(&mut h, h2).unwrap();
        let r = h.tape.add(h2, f).unwrap();
        let expected = block.norm3.forward(&mut h, r).unwrap();
        assert!(full.max_abs_diff(h.tape.value(expected)).unwrap() < 1e-12);
    }

    #[test]
    fn positional_embeddings() {
        let mut store = ParamStore::default();
        let zero = store.add("zero", Tensor::zeros(&[3, 4]));
        let table = store.add("pos", Initializer::new(1).normal(&[3, 4], 1.0));
        let x = random_input(2, 3, 4);
        let mut g = Graph::new(&store);
        let xv = g.tape.constant(x.clone());
        let y = add_positional_embeddings(&mut g, xv, zero).unwrap();
        assert_eq!(g.tape.value(y), &x);

        let swapped = Tensor::from_rows(&[x.row(1).to_vec(), x.row(0).to_vec(), x.row(2).to_vec()]).unwrap();
        let sv = g.tape.constant(swapped);
        let a = add_positional_embeddings(&mut g, xv, table).unwrap();
        let b = add_positional_embeddings(&mut g, sv, table).unwrap();
        assert_ne!(g.tape.value(a).row(0), g.tape.value(b).row(1));

        let too_long = g.tape.constant(Tensor::zeros(&[4, 4]));
        assert!(matches!(
            add_positional_embeddings(&mut g, too_long, table),
            Err(Error::Capacity { len: 4, capacity: 3 })
        ));
    }

    #[test]
    fn dropout_only_in_training_graphs() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let x = g.tape.constant(Tensor::filled(&[10, 10], 1.0));
        assert_eq!(g.dropout(x).unwrap(), x);
        let mut g = Graph::training(&store, 0.5, 3);
        let x = g.tape.constant(Tensor::filled(&[10, 10], 1.0));
        let y = g.dropout(x).unwrap();
        let zeros = g.tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 20 && zeros < 80);
    }
}
