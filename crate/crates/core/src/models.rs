//! Decoder-only transformer and recurrent baselines over real-valued tokens.
//!
//! Models are plain parameter lists plus a config; the forward pass is built
//! on an autodiff [`Tape`] so the same code serves training and analysis.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Field};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    AttentionOnly,
    MlpOnly,
}

impl Variant {
    pub fn has_attention(self) -> bool {
        self != Variant::MlpOnly
    }

    pub fn has_mlp(self) -> bool {
        self != Variant::AttentionOnly
    }
}

fn default_true() -> bool {
    true
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub variant: Variant,
    #[serde(default = "default_true")]
    pub use_layer_norm: bool,
    /// Drop the `1/sqrt(d_head)` logit scale.
    #[serde(default)]
    pub unscaled_attention: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 12,
            heads: 8,
            hidden: 256,
            embed_dim: 1,
            max_len: 102,
            variant: Variant::Full,
            use_layer_norm: true,
            unscaled_attention: false,
            init_std: 0.02,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.embed_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, e, l) = (self.hidden, self.embed_dim, self.layers);
        let ln = if self.use_layer_norm { 2 * d } else { 0 };
        let attn = if self.variant.has_attention() { ln + 4 * d * d + 4 * d } else { 0 };
        let mlp = if self.variant.has_mlp() { ln + 8 * d * d + 5 * d } else { 0 };
        e * d + self.max_len * d + l * (attn + mlp) + ln + d * e + e
    }
}

/// `(layers, heads)` pairs for the depth sweep at fixed width.
pub const DEPTH_SWEEP: [(usize, usize); 4] = [(1, 8), (2, 4), (4, 2), (8, 1)];

pub fn depth_sweep(base: &TransformerConfig) -> Vec<TransformerConfig> {
    DEPTH_SWEEP
        .iter()
        .map(|&(layers, heads)| TransformerConfig {
            layers,
            heads,
            ..base.clone()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RnnKind {
    Elman,
    Lstm,
    Gru,
}

impl RnnKind {
    fn gates(self) -> &'static [&'static str] {
        match self {
            RnnKind::Elman => &["h"],
            RnnKind::Lstm => &["i", "f", "g", "o"],
            RnnKind::Gru => &["r", "z", "n"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RnnConfig {
    pub kind: RnnKind,
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        RnnConfig {
            kind: RnnKind::Lstm,
            layers: 2,
            hidden: 256,
            embed_dim: 1,
        }
    }
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("rnn dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Rnn(RnnConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Transformer(TransformerConfig::default())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::Rnn(c) => c.validate(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.embed_dim,
            ModelConfig::Rnn(c) => c.embed_dim,
        }
    }

    /// Longest sequence the model accepts.
    pub fn max_len(&self) -> Option<usize> {
        match self {
            ModelConfig::Transformer(c) => Some(c.max_len),
            ModelConfig::Rnn(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    match cfg {
        ModelConfig::Transformer(c) => {
            let (d, e) = (c.hidden, c.embed_dim);
            let std = c.init_std;
            let proj = Init::Normal(std / (2.0 * c.layers as f64).sqrt());
            push("w_e".into(), vec![e, d], Init::Normal(std));
            push("w_p".into(), vec![c.max_len, d], Init::Normal(std));
            for l in 0..c.layers {
                if c.variant.has_attention() {
                    if c.use_layer_norm {
                        push(format!("l{l}.ln1.g"), vec![d], Init::Ones);
                        push(format!("l{l}.ln1.b"), vec![d], Init::Zeros);
                    }
                    for m in ["q", "k", "v"] {
                        push(format!("l{l}.attn.w_{m}"), vec![d, d], Init::Normal(std));
                        push(format!("l{l}.attn.b_{m}"), vec![d], Init::Zeros);
                    }
                    push(format!("l{l}.attn.w_o"), vec![d, d], proj);
                    push(format!("l{l}.attn.b_o"), vec![d], Init::Zeros);
                }
                if c.variant.has_mlp() {
                    if c.use_layer_norm {
                        push(format!("l{l}.ln2.g"), vec![d], Init::Ones);
                        push(format!("l{l}.ln2.b"), vec![d], Init::Zeros);
                    }
                    push(format!("l{l}.mlp.w_in"), vec![d, 4 * d], Init::Normal(std));
                    push(format!("l{l}.mlp.b_in"), vec![4 * d], Init::Zeros);
                    push(format!("l{l}.mlp.w_out"), vec![4 * d, d], proj);
                    push(format!("l{l}.mlp.b_out"), vec![d], Init::Zeros);
                }
            }
            if c.use_layer_norm {
                push("ln_f.g".into(), vec![d], Init::Ones);
                push("ln_f.b".into(), vec![d], Init::Zeros);
            }
            push("w_u".into(), vec![d, e], Init::Normal(std));
            push("b_u".into(), vec![e], Init::Zeros);
        }
        ModelConfig::Rnn(c) => {
            let d = c.hidden;
            let k = Init::Uniform(1.0 / (d as f64).sqrt());
            for l in 0..c.layers {
                let input = if l == 0 { c.embed_dim } else { d };
                for g in c.kind.gates() {
                    push(format!("l{l}.w_{g}"), vec![input, d], k);
                    push(format!("l{l}.u_{g}"), vec![d, d], k);
                    push(format!("l{l}.b_{g}"), vec![d], k);
                }
                if c.kind == RnnKind::Gru {
                    push(format!("l{l}.b_hn"), vec![d], k);
                }
            }
            push("w_r".into(), vec![d, c.embed_dim], k);
            push("b_r".into(), vec![c.embed_dim], k);
        }
    }
    out
}

/// Named parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

impl ModelState {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Rebuilds a state from stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let want = layout(&config);
        if want.len() != names.len() || names.len() != params.len() {
            return Err(Error::dim("model_state", format!("{} tensors, expected {}", params.len(), want.len())));
        }
        for ((wn, ws, _), (n, p)) in want.iter().zip(names.iter().zip(&params)) {
            if wn != n || ws.as_slice() != p.shape() {
                return Err(Error::dim("model_state", format!("{} {:?} vs expected {} {:?}", n, p.shape(), wn, ws)));
            }
        }
        Ok(ModelState { config, names, params })
    }
}

/// Deterministic initialization from `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (i, (name, shape, init)) in layout(cfg).into_iter().enumerate() {
        let mut rng = stream(seed, i as u64, Field::Init);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(s) => {
                let dist = Normal::new(0.0, s).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform(k) => (0..n).map(|_| rng.random_range(-k..=k)).collect(),
        };
        names.push(name);
        params.push(Tensor::new(shape, data)?);
    }
    Ok(ModelState {
        config: cfg.clone(),
        names,
        params,
    })
}

/// Variables produced by one forward construction.
#[derive(Debug, Clone)]
pub struct Graph {
    /// `[rows, E]`: every position, or only the requested read rows.
    pub output: Var,
    /// `R_l` per layer (transformer only).
    pub residual: Vec<Var>,
    /// `X_0..X_L` for transformers; per-layer hidden states for RNNs.
    pub hidden: Vec<Var>,
    /// `[batch*heads, T, T]` per layer, when attention is present.
    pub attention: Vec<Option<Var>>,
}

/// Records the model on `tape`. `input` is `[batch*seq, E]` with row
/// `b*seq + t`; `read` restricts the output to the listed rows.
pub fn build_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &[Var],
    input: Var,
    batch: usize,
    seq: usize,
    read: Option<&[usize]>,
) -> Result<Graph> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 2 || shape[0] != batch * seq || shape[1] != cfg.embed_dim() {
        return Err(Error::dim(
            "forward",
            format!("input {:?} for batch {} x seq {} x E {}", shape, batch, seq, cfg.embed_dim()),
        ));
    }
    if let Some(max) = cfg.max_len() {
        if seq > max {
            return Err(Error::ContextOverflow { len: seq, max });
        }
    }
    let mut it = params.iter().copied();
    let mut next = move || it.next().ok_or_else(|| Error::dim("forward", "too few parameters"));
    match cfg {
        ModelConfig::Transformer(c) => transformer(tape, c, &mut next, input, batch, seq, read),
        ModelConfig::Rnn(c) => rnn(tape, c, &mut next, input, batch, seq, read),
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn transformer(
    tape: &mut Tape,
    c: &TransformerConfig,
    next: &mut dyn FnMut() -> Result<Var>,
    input: Var,
    batch: usize,
    seq: usize,
    read: Option<&[usize]>,
) -> Result<Graph> {
    let (w_e, w_p) = (next()?, next()?);
    let emb = tape.matmul(input, w_e)?;
    let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos = tape.gather_rows(w_p, &pos_idx)?;
    let mut x = tape.add(emb, pos)?;
    let mut graph = Graph {
        output: x,
        residual: Vec::new(),
        hidden: vec![x],
        attention: Vec::new(),
    };
    let scale = if c.unscaled_attention {
        1.0
    } else {
        1.0 / (c.head_dim() as f64).sqrt()
    };
    let norm = |tape: &mut Tape, v: Var, next: &mut dyn FnMut() -> Result<Var>| -> Result<Var> {
        if c.use_layer_norm {
            let (g, b) = (next()?, next()?);
            tape.layer_norm(v, g, b)
        } else {
            Ok(v)
        }
    };
    for _ in 0..c.layers {
        let r = if c.variant.has_attention() {
            let h = norm(tape, x, next)?;
            let (wq, bq, wk, bk, wv, bv, wo, bo) = (next()?, next()?, next()?, next()?, next()?, next()?, next()?, next()?);
            let q = linear(tape, h, wq, bq)?;
            let k = linear(tape, h, wk, bk)?;
            let v = linear(tape, h, wv, bv)?;
            let q = tape.split_heads(q, batch, seq, c.heads)?;
            let k = tape.split_heads(k, batch, seq, c.heads)?;
            let v = tape.split_heads(v, batch, seq, c.heads)?;
            let mut logits = tape.batch_matmul(q, k, true)?;
            if scale != 1.0 {
                logits = tape.scale(logits, scale)?;
            }
            let a = tape.softmax_causal(logits)?;
            graph.attention.push(Some(a));
            let ctx = tape.batch_matmul(a, v, false)?;
            let ctx = tape.merge_heads(ctx, batch, seq, c.heads)?;
            let m = linear(tape, ctx, wo, bo)?;
            tape.add(x, m)?
        } else {
            graph.attention.push(None);
            x
        };
        graph.residual.push(r);
        x = if c.variant.has_mlp() {
            let h = norm(tape, r, next)?;
            let (w1, b1, w2, b2) = (next()?, next()?, next()?, next()?);
            let u = linear(tape, h, w1, b1)?;
            let u = tape.unary(Unary::Gelu, u)?;
            let o = linear(tape, u, w2, b2)?;
            tape.add(r, o)?
        } else {
            r
        };
        graph.hidden.push(x);
    }
    let top = match read {
        Some(rows) => tape.gather_rows(x, rows)?,
        None => x,
    };
    let top = norm(tape, top, next)?;
    let (w_u, b_u) = (next()?, next()?);
    graph.output = linear(tape, top, w_u, b_u)?;
    Ok(graph)
}

fn rnn(
    tape: &mut Tape,
    c: &RnnConfig,
    next: &mut dyn FnMut() -> Result<Var>,
    input: Var,
    batch: usize,
    seq: usize,
    read: Option<&[usize]>,
) -> Result<Graph> {
    let d = c.hidden;
    let zeros = tape.leaf(Tensor::zeros(&[batch, d]));
    let rows_at = |t: usize| -> Vec<usize> { (0..batch).map(|b| b * seq + t).collect() };
    let mut layer_in = input;
    let mut hidden = Vec::new();
    for _ in 0..c.layers {
        // (input projection over all steps, recurrent matrix) per gate.
        let mut gates = Vec::new();
        for _ in c.kind.gates() {
            let (w, u, b) = (next()?, next()?, next()?);
            gates.push((linear(tape, layer_in, w, b)?, u));
        }
        let b_hn = if c.kind == RnnKind::Gru { Some(next()?) } else { None };
        let mut h = zeros;
        let mut cell = zeros;
        let mut outs = Vec::with_capacity(seq);
        for t in 0..seq {
            let idx = rows_at(t);
            let pre = |tape: &mut Tape, g: usize, with_h: bool| -> Result<Var> {
                let xw = tape.gather_rows(gates[g].0, &idx)?;
                if with_h {
                    let hu = tape.matmul(h, gates[g].1)?;
                    tape.add(xw, hu)
                } else {
                    Ok(xw)
                }
            };
            h = match c.kind {
                RnnKind::Elman => {
                    let a = pre(tape, 0, true)?;
                    tape.unary(Unary::Tanh, a)?
                }
                RnnKind::Lstm => {
                    let i = pre(tape, 0, true)?;
                    let i = tape.unary(Unary::Sigmoid, i)?;
                    let f = pre(tape, 1, true)?;
                    let f = tape.unary(Unary::Sigmoid, f)?;
                    let g = pre(tape, 2, true)?;
                    let g = tape.unary(Unary::Tanh, g)?;
                    let o = pre(tape, 3, true)?;
                    let o = tape.unary(Unary::Sigmoid, o)?;
                    let keep = tape.mul(f, cell)?;
                    let write = tape.mul(i, g)?;
                    cell = tape.add(keep, write)?;
                    let tc = tape.unary(Unary::Tanh, cell)?;
                    tape.mul(o, tc)?
                }
                RnnKind::Gru => {
                    let r = pre(tape, 0, true)?;
                    let r = tape.unary(Unary::Sigmoid, r)?;
                    let z = pre(tape, 1, true)?;
                    let z = tape.unary(Unary::Sigmoid, z)?;
                    let xn = pre(tape, 2, false)?;
                    let hn = tape.matmul(h, gates[2].1)?;
                    let hn = tape.add_bias(hn, b_hn.expect("gru has b_hn"))?;
                    let rh = tape.mul(r, hn)?;
                    let n = tape.add(xn, rh)?;
                    let n = tape.unary(Unary::Tanh, n)?;
                    let one_minus_z = tape.affine(z, -1.0, 1.0)?;
                    let a = tape.mul(one_minus_z, n)?;
                    let b = tape.mul(z, h)?;
                    tape.add(a, b)?
                }
            };
            outs.push(h);
        }
        layer_in = tape.stack_time(&outs)?;
        hidden.push(layer_in);
    }
    let top = match read {
        Some(rows) => tape.gather_rows(layer_in, rows)?,
        None => layer_in,
    };
    let (w_r, b_r) = (next()?, next()?);
    Ok(Graph {
        output: linear(tape, top, w_r, b_r)?,
        residual: Vec::new(),
        hidden,
        attention: Vec::new(),
    })
}

/// Concrete values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub residual: Vec<Tensor>,
    pub hidden: Vec<Tensor>,
    pub attention: Vec<Option<Tensor>>,
    pub output: Tensor,
}

/// Stacks equal-length token matrices into a `[batch*T, E]` tensor.
pub fn stack_batch(tokens: &[&Tensor]) -> Result<(Tensor, usize)> {
    let first = tokens.first().ok_or_else(|| Error::dim("stack_batch", "empty batch"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 2 || tokens.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(Error::dim("stack_batch", "token matrices must share a 2-D shape"));
    }
    let data = tokens.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok((Tensor::new(vec![tokens.len() * shape[0], shape[1]], data)?, shape[0]))
}

/// Runs the model on a batch of equal-length sequences.
pub fn forward_batch(state: &ModelState, tokens: &[&Tensor], read: Option<&[usize]>) -> Result<ForwardTrace> {
    let (input, seq) = stack_batch(tokens)?;
    let mut tape = Tape::new();
    let params: Vec<Var> = state.params.iter().map(|p| tape.leaf(p.clone())).collect();
    let x = tape.leaf(input);
    let g = build_forward(&mut tape, &state.config, &params, x, tokens.len(), seq, read)?;
    let val = |v: Var| tape.value(v).clone();
    Ok(ForwardTrace {
        residual: g.residual.iter().map(|&v| val(v)).collect(),
        hidden: g.hidden.iter().map(|&v| val(v)).collect(),
        attention: g.attention.iter().map(|a| a.map(val)).collect(),
        output: val(g.output),
    })
}

/// Transformer forward on one `[T, E]` sequence.
pub fn gpt2_forward(state: &ModelState, tokens: &Tensor) -> Result<(Tensor, ForwardTrace)> {
    if !matches!(state.config, ModelConfig::Transformer(_)) {
        return Err(Error::Unsupported("gpt2_forward needs a transformer".into()));
    }
    let trace = forward_batch(state, &[tokens], None)?;
    Ok((trace.output.clone(), trace))
}

/// Recurrent forward on one `[T, E]` sequence.
pub fn rnn_forward(state: &ModelState, tokens: &Tensor) -> Result<Tensor> {
    if !matches!(state.config, ModelConfig::Rnn(_)) {
        return Err(Error::Unsupported("rnn_forward needs a recurrent model".into()));
    }
    Ok(forward_batch(state, &[tokens], None)?.output)
}

/// Which positions of a `[T, E]` prediction matrix are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Regression prompts: the last position (the intervened input).
    Final,
    /// Positions `start..end` predict tokens `start+1..=end`.
    Span { start: usize, end: usize },
}

pub fn readout_prediction(predictions: &Tensor, readout: Readout) -> Result<Tensor> {
    let t = predictions.rows();
    let e = predictions.cols();
    let (start, end) = match readout {
        Readout::Final => (t.saturating_sub(1), t),
        Readout::Span { start, end } => (start, end),
    };
    if predictions.shape().len() != 2 || t == 0 || start >= end || end > t {
        return Err(Error::dim(
            "readout",
            format!("{:?} from predictions {:?}", readout, predictions.shape()),
        ));
    }
    Tensor::new(vec![end - start, e], predictions.data()[start * e..end * e].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn small(l: usize, h: usize, d: usize) -> TransformerConfig {
        TransformerConfig {
            layers: l,
            heads: h,
            hidden: d,
            embed_dim: 1,
            max_len: 16,
            ..TransformerConfig::default()
        }
    }

    fn tokens(t: usize, e: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, 0, Field::Misc);
        Tensor::new(vec![t, e], (0..t * e).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::Transformer(small(2, 2, 8));
        assert_eq!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 3).unwrap());
        assert_ne!(init_model(&cfg, 0).unwrap(), init_model(&cfg, 1).unwrap());
    }

    #[test]
    fn parameter_count_audit() {
        for variant in [Variant::Full, Variant::AttentionOnly, Variant::MlpOnly] {
            for ln in [true, false] {
                let c = TransformerConfig {
                    variant,
                    use_layer_norm: ln,
                    ..small(2, 1, 8)
                };
                let s = init_model(&ModelConfig::Transformer(c.clone()), 0).unwrap();
                assert_eq!(s.param_count(), c.param_count());
            }
        }
        // L=2, H=1, D=8, E=1, T=16 by hand:
        // 8 + 128 + 2 * (16 + 256 + 32 + 16 + 512 + 40) + 16 + 8 + 1.
        assert_eq!(small(2, 1, 8).param_count(), 8 + 128 + 2 * 872 + 16 + 8 + 1);
    }

    #[test]
    fn invalid_configs() {
        assert!(small(2, 3, 8).validate().is_err());
        assert!(small(0, 1, 8).validate().is_err());
    }

    #[test]
    fn zero_unembedding_gives_zero_output() {
        let cfg = ModelConfig::Transformer(small(2, 2, 8));
        let mut s = init_model(&cfg, 1).unwrap();
        s.get_mut("w_u").unwrap().data_mut().fill(0.0);
        let (out, _) = gpt2_forward(&s, &tokens(6, 1, 0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causality_is_bit_exact() {
        let cfg = ModelConfig::Transformer(small(2, 2, 8));
        let s = init_model(&cfg, 2).unwrap();
        let x = tokens(8, 1, 1);
        let (a, _) = gpt2_forward(&s, &x).unwrap();
        for t in 0..8 {
            let mut y = x.clone();
            y.data_mut()[t] += 1.7;
            let (b, _) = gpt2_forward(&s, &y).unwrap();
            assert_eq!(&a.data()[..t], &b.data()[..t], "perturbing {t}");
            assert_ne!(a.data()[t], b.data()[t]);
        }
    }

    #[test]
    fn context_overflow() {
        let s = init_model(&ModelConfig::Transformer(small(1, 1, 4)), 0).unwrap();
        assert!(matches!(
            gpt2_forward(&s, &tokens(17, 1, 0)),
            Err(Error::ContextOverflow { len: 17, max: 16 })
        ));
    }

    #[test]
    fn attention_rows_are_stochastic_and_causal() {
        let s = init_model(&ModelConfig::Transformer(small(2, 2, 8)), 4).unwrap();
        let (_, trace) = gpt2_forward(&s, &tokens(7, 1, 2)).unwrap();
        for a in trace.attention.iter().flatten() {
            assert_eq!(a.shape(), &[2, 7, 7]);
            for row in 0..a.rows() {
                let r = a.row(row);
                let t = row % 7;
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(r[t + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn attention_scaling_is_exactly_one_over_sqrt_dh() {
        // With a single layer and identity-free weights the logits differ by
        // exactly the scale; compare through the softmax of 2 positions.
        let mut c = small(1, 1, 4);
        c.use_layer_norm = false;
        let scaled = init_model(&ModelConfig::Transformer(c.clone()), 5).unwrap();
        let mut literal = scaled.clone();
        c.unscaled_attention = true;
        literal.config = ModelConfig::Transformer(c);
        let x = tokens(2, 1, 3);
        let (_, ts) = gpt2_forward(&scaled, &x).unwrap();
        let (_, tl) = gpt2_forward(&literal, &x).unwrap();
        let logit = |a: &Tensor| (a.at(1, 1) / a.at(1, 0)).ln();
        let (a_s, a_l) = (ts.attention[0].clone().unwrap(), tl.attention[0].clone().unwrap());
        let a_s = a_s.reshape(vec![2, 2]).unwrap();
        let a_l = a_l.reshape(vec![2, 2]).unwrap();
        assert!((logit(&a_s) - logit(&a_l) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn skipped_sublayers_contribute_nothing() {
        let s = init_model(&ModelConfig::Transformer(TransformerConfig { variant: Variant::MlpOnly, ..small(2, 2, 8) }), 1).unwrap();
        let (_, t) = gpt2_forward(&s, &tokens(5, 1, 0)).unwrap();
        for l in 0..2 {
            assert_eq!(t.residual[l], t.hidden[l]);
            assert!(t.attention[l].is_none());
        }
        let s = init_model(&ModelConfig::Transformer(TransformerConfig { variant: Variant::AttentionOnly, ..small(2, 2, 8) }), 1).unwrap();
        let (_, t) = gpt2_forward(&s, &tokens(5, 1, 0)).unwrap();
        for l in 0..2 {
            assert_eq!(t.hidden[l + 1], t.residual[l]);
        }
    }

    #[test]
    fn depth_sweep_constructs_and_runs() {
        let base = TransformerConfig {
            hidden: 16,
            max_len: 8,
            ..TransformerConfig::default()
        };
        let cfgs = depth_sweep(&base);
        assert_eq!(cfgs.len(), 4);
        for c in cfgs {
            let s = init_model(&ModelConfig::Transformer(c), 0).unwrap();
            let (o, _) = gpt2_forward(&s, &tokens(8, 1, 0)).unwrap();
            assert!(o.is_finite());
        }
    }

    fn full_grad_check(cfg: ModelConfig) {
        let state = init_model(&cfg, 9).unwrap();
        let x = tokens(6, 1, 4);
        // Check against a flattened subset of every parameter tensor by
        // treating one tensor at a time as the variable.
        for (i, p) in state.params.iter().enumerate() {
            let f = |tape: &mut Tape, v: Var| -> Result<Var> {
                let params: Vec<Var> = state
                    .params
                    .iter()
                    .enumerate()
                    .map(|(j, q)| if j == i { v } else { tape.leaf(q.clone()) })
                    .collect();
                let input = tape.leaf(x.clone());
                let g = build_forward(tape, &state.config, &params, input, 1, 6, None)?;
                let sq = tape.mul(g.output, g.output)?;
                tape.sum(sq)
            };
            if state.names[i].ends_with("attn.b_k") {
                // Softmax is shift-invariant per row, so the key bias has an
                // exactly vanishing gradient; a relative check is meaningless.
                let mut tape = Tape::new();
                let v = tape.leaf(p.clone());
                let loss = f(&mut tape, v).unwrap();
                let g = tape.backward(loss).unwrap().wrt(v);
                assert!(g.data().iter().all(|x| x.abs() < 1e-10));
                continue;
            }
            let err = grad_check(f, p, 1e-5).unwrap();
            assert!(err < 1e-4, "{}: {}", state.names[i], err);
        }
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let mut c = small(2, 2, 8);
        c.init_std = 0.3;
        full_grad_check(ModelConfig::Transformer(c));
    }

    #[test]
    fn rnn_gradients_match_finite_differences() {
        for kind in [RnnKind::Elman, RnnKind::Lstm, RnnKind::Gru] {
            full_grad_check(ModelConfig::Rnn(RnnConfig {
                kind,
                layers: 2,
                hidden: 4,
                embed_dim: 1,
            }));
        }
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// `x W + h U + b` for one row.
    fn pre(s: &ModelState, g: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (w, u, b) = (s.get(&format!("l0.w_{g}")).unwrap(), s.get(&format!("l0.u_{g}")).unwrap(), s.get(&format!("l0.b_{g}")).unwrap());
        let d = b.len();
        (0..d)
            .map(|j| {
                let mut acc = b.data()[j];
                for (i, xv) in x.iter().enumerate() {
                    acc += xv * w.at(i, j);
                }
                for (i, hv) in h.iter().enumerate() {
                    acc += hv * u.at(i, j);
                }
                acc
            })
            .collect()
    }

    fn reference(s: &ModelState, kind: RnnKind, xs: &Tensor) -> Vec<Vec<f64>> {
        let d = s.get(&format!("l0.b_{}", kind.gates()[0])).unwrap().len();
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut out = Vec::new();
        for t in 0..xs.rows() {
            let x = xs.row(t);
            h = match kind {
                RnnKind::Elman => pre(s, "h", x, &h).iter().map(|v| v.tanh()).collect(),
                RnnKind::Lstm => {
                    let i: Vec<f64> = pre(s, "i", x, &h).into_iter().map(sig).collect();
                    let f: Vec<f64> = pre(s, "f", x, &h).into_iter().map(sig).collect();
                    let g: Vec<f64> = pre(s, "g", x, &h).into_iter().map(f64::tanh).collect();
                    let o: Vec<f64> = pre(s, "o", x, &h).into_iter().map(sig).collect();
                    c = (0..d).map(|j| f[j] * c[j] + i[j] * g[j]).collect();
                    (0..d).map(|j| o[j] * c[j].tanh()).collect()
                }
                RnnKind::Gru => {
                    let r: Vec<f64> = pre(s, "r", x, &h).into_iter().map(sig).collect();
                    let z: Vec<f64> = pre(s, "z", x, &h).into_iter().map(sig).collect();
                    let xn = pre(s, "n", x, &vec![0.0; d]);
                    let hn = pre(s, "n", &vec![0.0; x.len()], &h);
                    let (b_n, b_hn) = (s.get("l0.b_n").unwrap(), s.get("l0.b_hn").unwrap());
                    (0..d)
                        .map(|j| {
                            // pre() adds b_n twice when split; remove once.
                            let n = (xn[j] + r[j] * (hn[j] - b_n.data()[j] + b_hn.data()[j])).tanh();
                            (1.0 - z[j]) * n + z[j] * h[j]
                        })
                        .collect()
                }
            };
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn rnn_steps_match_reference() {
        for kind in [RnnKind::Elman, RnnKind::Lstm, RnnKind::Gru] {
            let cfg = ModelConfig::Rnn(RnnConfig {
                kind,
                layers: 1,
                hidden: 5,
                embed_dim: 2,
            });
            let s = init_model(&cfg, 7).unwrap();
            let xs = tokens(4, 2, 8);
            let trace = forward_batch(&s, &[&xs], None).unwrap();
            let want = reference(&s, kind, &xs);
            let got = &trace.hidden[0];
            for t in 0..4 {
                for j in 0..5 {
                    assert!((got.at(t, j) - want[t][j]).abs() < 1e-12, "{kind:?} t={t} j={j}");
                }
            }
        }
    }

    fn zero_state(kind: RnnKind) -> ModelState {
        let cfg = ModelConfig::Rnn(RnnConfig {
            kind,
            layers: 1,
            hidden: 3,
            embed_dim: 1,
        });
        let mut s = init_model(&cfg, 0).unwrap();
        for p in &mut s.params {
            p.data_mut().fill(0.0);
        }
        s
    }

    #[test]
    fn elman_with_zero_weights_is_silent() {
        let s = zero_state(RnnKind::Elman);
        let out = rnn_forward(&s, &tokens(5, 1, 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_hold_the_cell() {
        let mut s = zero_state(RnnKind::Lstm);
        s.get_mut("l0.b_f").unwrap().data_mut().fill(1e3);
        s.get_mut("l0.b_i").unwrap().data_mut().fill(-1e3);
        s.get_mut("l0.b_o").unwrap().data_mut().fill(1e3);
        s.get_mut("l0.w_g").unwrap().data_mut().fill(1.0);
        let trace = forward_batch(&s, &[&tokens(5, 1, 1)], None).unwrap();
        // c starts at 0 and never receives input, so h = tanh(c) stays 0.
        assert!(trace.hidden[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_with_closed_update_gate_copies_state() {
        let mut s = zero_state(RnnKind::Gru);
        s.get_mut("l0.b_z").unwrap().data_mut().fill(1e3);
        s.get_mut("l0.w_n").unwrap().data_mut().fill(1.0);
        let trace = forward_batch(&s, &[&tokens(5, 1, 1)], None).unwrap();
        assert!(trace.hidden[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn readout_layouts() {
        let p = Tensor::new(vec![12, 1], (0..12).map(f64::from).collect()).unwrap();
        // n = 5: T = 12, read index 11.
        assert_eq!(readout_prediction(&p, Readout::Final).unwrap().data(), &[11.0]);
        let p = Tensor::zeros(&[81, 1]);
        // 20 event times: 41 + 40 tokens, 38 masked predictions.
        let span = readout_prediction(&p, Readout::Span { start: 42, end: 80 }).unwrap();
        assert_eq!(span.rows(), 38);
        assert!(readout_prediction(&p, Readout::Span { start: 42, end: 82 }).is_err());
    }
}
