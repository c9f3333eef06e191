//! Transformer forward passes over token sequences.
//!
//! Layers are linear or softmax self-attention, optionally followed by a
//! GELU MLP, each sublayer with optional pre-LayerNorm and a residual
//! connection. Predictions are read out as the negated target slots of the
//! query token, so a model that writes `-(y_hat)` there implements the
//! usual regression readout.
//!
//! Every forward exists twice: a plain `Matrix` version and a tape version
//! for gradients. Both compose the same primitive ops in the same order,
//! so their outputs agree bit for bit (asserted in tests).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::SeedStream;
use crate::numerics::tape::{gelu_scalar, Tape, Var};
use crate::taskgen::TokenSeq;

pub const LN_EPS: f64 = 1e-5;
/// Token magnitude above which a forward pass is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnKind {
    Linear,
    Softmax,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_k: Matrix,
    pub w_q: Matrix,
    pub w_v: Matrix,
    pub p: Matrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpWeights {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LnWeights {
    pub gain: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerWeights {
    pub attn: Option<AttnKind>,
    pub heads: Vec<HeadWeights>,
    pub mlp: Option<MlpWeights>,
    pub ln_attn: Option<LnWeights>,
    pub ln_mlp: Option<LnWeights>,
}

/// Structure of one layer; weights are instantiated from this.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub attn: Option<AttnKind>,
    pub heads: usize,
    pub mlp_widening: Option<usize>,
    pub layer_norm: bool,
}

impl LayerSpec {
    pub fn linear_attn() -> Self {
        LayerSpec { attn: Some(AttnKind::Linear), heads: 1, mlp_widening: None, layer_norm: false }
    }

    pub fn softmax_attn(heads: usize) -> Self {
        LayerSpec { attn: Some(AttnKind::Softmax), heads, mlp_widening: None, layer_norm: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// raw token dimension before any embedding
    pub token_dim: usize,
    pub embed_dim: Option<usize>,
    /// number of layer applications
    pub depth: usize,
    /// if true, `layers` holds one spec applied `depth` times (weight sharing)
    pub recurrent: bool,
    pub layers: Vec<LayerSpec>,
    /// symmetric token clamp applied after each layer application
    pub clip_tokens: Option<f64>,
    /// if false, the query token is excluded from keys and values
    pub use_full_self_attn: bool,
    /// attention init std is `0.002 * init_std_scale / depth`
    pub init_std_scale: f64,
    /// fan-in init (std 1/sqrt(fan_in)) for embedding and MLP weights
    /// instead of the attention std
    pub fan_in_mlp_init: bool,
}

impl ModelConfig {
    pub fn single_lsa(token_dim: usize) -> Self {
        ModelConfig {
            token_dim,
            embed_dim: None,
            depth: 1,
            recurrent: false,
            layers: vec![LayerSpec::linear_attn()],
            clip_tokens: None,
            use_full_self_attn: true,
            init_std_scale: 1.0,
            fan_in_mlp_init: false,
        }
    }

    pub fn deep_lsa(token_dim: usize, depth: usize, recurrent: bool) -> Self {
        ModelConfig {
            token_dim,
            embed_dim: None,
            depth,
            recurrent,
            layers: if recurrent {
                vec![LayerSpec::linear_attn()]
            } else {
                vec![LayerSpec::linear_attn(); depth]
            },
            clip_tokens: if depth > 2 { Some(10.0) } else { None },
            use_full_self_attn: true,
            init_std_scale: 1.0,
            fan_in_mlp_init: false,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.embed_dim.unwrap_or(self.token_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidParam("depth must be >= 1".into()));
        }
        let expected = if self.recurrent { 1 } else { self.depth };
        if self.layers.len() != expected {
            return Err(Error::InvalidParam(format!(
                "expected {} layer specs, got {}",
                expected,
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.attn.is_some() && l.heads == 0 {
                return Err(Error::InvalidParam(format!("layer {i}: attention with 0 heads")));
            }
            if l.attn.is_none() && l.mlp_widening.is_none() {
                return Err(Error::InvalidParam(format!("layer {i}: neither attention nor mlp")));
            }
            if let Some(w) = l.mlp_widening {
                if w == 0 {
                    return Err(Error::InvalidParam(format!("layer {i}: mlp widening 0")));
                }
            }
        }
        Ok(())
    }

    /// Which layer's weights apply at application `l`.
    fn spec_index(&self, l: usize) -> usize {
        if self.recurrent {
            0
        } else {
            l
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelParams {
    pub embed: Option<Matrix>,
    pub layers: Vec<LayerWeights>,
}

impl ModelParams {
    /// Truncated-normal init, std `0.002 * scale / depth`, matching the
    /// training recipe. LayerNorm gains start at 1, biases at 0.
    pub fn init(cfg: &ModelConfig, stream: &mut SeedStream) -> Result<ModelParams> {
        cfg.validate()?;
        let d = cfg.model_dim();
        let std = 0.002 * cfg.init_std_scale / cfg.depth as f64;
        let embed = cfg.embed_dim.map(|ed| {
            let s = if cfg.fan_in_mlp_init { 1.0 / (cfg.token_dim as f64).sqrt() } else { std };
            stream.trunc_normal(s, ed, cfg.token_dim)
        });
        let mut layers = Vec::new();
        for spec in &cfg.layers {
            let n_heads = if spec.attn.is_some() { spec.heads } else { 0 };
            let heads = (0..n_heads)
                .map(|_| HeadWeights {
                    w_k: stream.trunc_normal(std, d, d),
                    w_q: stream.trunc_normal(std, d, d),
                    w_v: stream.trunc_normal(std, d, d),
                    p: stream.trunc_normal(std, d, d),
                })
                .collect();
            let mlp = spec.mlp_widening.map(|w| {
                let hidden = w * d;
                let (s1, s2) = if cfg.fan_in_mlp_init {
                    (1.0 / (d as f64).sqrt(), 1.0 / (hidden as f64).sqrt())
                } else {
                    (std, std)
                };
                MlpWeights {
                    w1: stream.trunc_normal(s1, hidden, d),
                    b1: Matrix::zeros(hidden, 1),
                    w2: stream.trunc_normal(s2, d, hidden),
                    b2: Matrix::zeros(d, 1),
                }
            });
            let make_ln = || LnWeights { gain: Matrix::filled(d, 1, 1.0), bias: Matrix::zeros(d, 1) };
            layers.push(LayerWeights {
                attn: spec.attn,
                heads,
                mlp,
                ln_attn: if spec.layer_norm && spec.attn.is_some() { Some(make_ln()) } else { None },
                ln_mlp: if spec.layer_norm && spec.mlp_widening.is_some() { Some(make_ln()) } else { None },
            });
        }
        Ok(ModelParams { embed, layers })
    }

    /// Deterministic (name, matrix) pairs covering every parameter.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        if let Some(e) = &self.embed {
            out.push(("embed".into(), e));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}_head{h}_wk"), &head.w_k));
                out.push((format!("layer{l}_head{h}_wq"), &head.w_q));
                out.push((format!("layer{l}_head{h}_wv"), &head.w_v));
                out.push((format!("layer{l}_head{h}_p"), &head.p));
            }
            if let Some(m) = &layer.mlp {
                out.push((format!("layer{l}_mlp_w1"), &m.w1));
                out.push((format!("layer{l}_mlp_b1"), &m.b1));
                out.push((format!("layer{l}_mlp_w2"), &m.w2));
                out.push((format!("layer{l}_mlp_b2"), &m.b2));
            }
            if let Some(ln) = &layer.ln_attn {
                out.push((format!("layer{l}_ln_attn_gain"), &ln.gain));
                out.push((format!("layer{l}_ln_attn_bias"), &ln.bias));
            }
            if let Some(ln) = &layer.ln_mlp {
                out.push((format!("layer{l}_ln_mlp_gain"), &ln.gain));
                out.push((format!("layer{l}_ln_mlp_bias"), &ln.bias));
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<Matrix> {
        self.named().into_iter().map(|(_, m)| m.clone()).collect()
    }

    /// Rebuild from a flat list in [`ModelParams::flatten`] order, using
    /// `self` as the structural template.
    pub fn unflatten_like(&self, flat: &[Matrix]) -> Result<ModelParams> {
        let mut out = self.clone();
        let mut it = flat.iter();
        let mut take = |slot: &mut Matrix, what: &str| -> Result<()> {
            let m = it
                .next()
                .ok_or_else(|| Error::InvalidParam(format!("missing parameter {what}")))?;
            slot.check_same_shape(m, "unflatten_like")?;
            *slot = m.clone();
            Ok(())
        };
        if let Some(e) = &mut out.embed {
            take(e, "embed")?;
        }
        for layer in &mut out.layers {
            for head in &mut layer.heads {
                take(&mut head.w_k, "w_k")?;
                take(&mut head.w_q, "w_q")?;
                take(&mut head.w_v, "w_v")?;
                take(&mut head.p, "p")?;
            }
            if let Some(m) = &mut layer.mlp {
                take(&mut m.w1, "w1")?;
                take(&mut m.b1, "b1")?;
                take(&mut m.w2, "w2")?;
                take(&mut m.b2, "b2")?;
            }
            if let Some(ln) = &mut layer.ln_attn {
                take(&mut ln.gain, "ln_attn_gain")?;
                take(&mut ln.bias, "ln_attn_bias")?;
            }
            if let Some(ln) = &mut layer.ln_mlp {
                take(&mut ln.gain, "ln_mlp_gain")?;
                take(&mut ln.bias, "ln_mlp_bias")?;
            }
        }
        if it.next().is_some() {
            return Err(Error::InvalidParam("too many parameter matrices".into()));
        }
        Ok(out)
    }
}

/// Readout window (row offset, rows) of the prediction inside the final
/// token matrix. With an embedding the target channel is pinned to the
/// last `ny` embedding coordinates.
pub fn readout_window(cfg: &ModelConfig, seq: &TokenSeq) -> (usize, usize) {
    if let Some(ed) = cfg.embed_dim {
        (ed - seq.ny, seq.ny)
    } else {
        seq.readout_range()
    }
}

fn kv_columns(tokens: &Matrix, query_index: usize, use_full: bool) -> Result<Matrix> {
    if use_full {
        Ok(tokens.clone())
    } else {
        if query_index != tokens.cols() - 1 {
            return Err(Error::BadLayout(
                "masked attention expects the query token in last position".into(),
            ));
        }
        Ok(tokens.block(0, 0, tokens.rows(), tokens.cols() - 1))
    }
}

/// One self-attention sublayer (no LayerNorm, no residual): returns the
/// summed head updates.
pub fn attention_update(
    kind: AttnKind,
    heads: &[HeadWeights],
    tokens: &Matrix,
    query_index: usize,
    use_full: bool,
) -> Result<Matrix> {
    if heads.is_empty() {
        return Err(Error::InvalidParam("attention_update with no heads".into()));
    }
    let kv = kv_columns(tokens, query_index, use_full)?;
    let mut total: Option<Matrix> = None;
    for head in heads {
        let q = head.w_q.matmul(tokens);
        let k = head.w_k.matmul(&kv);
        let scores = k.transpose().matmul(&q);
        let attn = match kind {
            AttnKind::Linear => scores,
            AttnKind::Softmax => softmax_cols_plain(&scores.scale(1.0 / (tokens.rows() as f64).sqrt())),
        };
        let v = head.w_v.matmul(&kv);
        let pv = head.p.matmul(&v);
        let upd = pv.matmul(&attn);
        total = Some(match total {
            None => upd,
            Some(t) => t.add(&upd),
        });
    }
    Ok(total.unwrap())
}

/// Linear self-attention with residual: `E + sum_h P_h W_V E_kv (W_K E_kv)^T W_Q E`.
pub fn lsa_forward(
    heads: &[HeadWeights],
    tokens: &Matrix,
    query_index: usize,
    use_full: bool,
) -> Result<Matrix> {
    let upd = attention_update(AttnKind::Linear, heads, tokens, query_index, use_full)?;
    Ok(tokens.add(&upd))
}

/// Softmax self-attention with residual and 1/sqrt(d) score scaling.
pub fn softmax_sa_forward(
    heads: &[HeadWeights],
    tokens: &Matrix,
    query_index: usize,
    use_full: bool,
) -> Result<Matrix> {
    let upd = attention_update(AttnKind::Softmax, heads, tokens, query_index, use_full)?;
    Ok(tokens.add(&upd))
}

fn softmax_cols_plain(scores: &Matrix) -> Matrix {
    // mirrors Tape::softmax_cols exactly
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for j in 0..scores.cols() {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..scores.rows() {
            mx = mx.max(scores.get(i, j));
        }
        let mut z = 0.0;
        for i in 0..scores.rows() {
            let e = (scores.get(i, j) - mx).exp();
            out.set(i, j, e);
            z += e;
        }
        for i in 0..scores.rows() {
            out.set(i, j, out.get(i, j) / z);
        }
    }
    out
}

/// GELU MLP with residual: `X + W2 gelu(W1 X + b1) + b2`.
pub fn mlp_forward(mlp: &MlpWeights, tokens: &Matrix) -> Matrix {
    let h1 = mlp.w1.matmul(tokens);
    let h1b = Matrix::from_fn(h1.rows(), h1.cols(), |i, j| h1.get(i, j) + mlp.b1.get(i, 0));
    let g = h1b.map(gelu_scalar);
    let h2 = mlp.w2.matmul(&g);
    let h2b = Matrix::from_fn(h2.rows(), h2.cols(), |i, j| h2.get(i, j) + mlp.b2.get(i, 0));
    tokens.add(&h2b)
}

/// Per-column LayerNorm with affine parameters; mirrors the tape version.
pub fn layer_norm_forward(ln: &LnWeights, tokens: &Matrix) -> Matrix {
    let n = tokens.rows() as f64;
    let mut normed = Matrix::zeros(tokens.rows(), tokens.cols());
    for j in 0..tokens.cols() {
        let mut mu = 0.0;
        for i in 0..tokens.rows() {
            mu += tokens.get(i, j);
        }
        mu /= n;
        let mut var = 0.0;
        for i in 0..tokens.rows() {
            let d = tokens.get(i, j) - mu;
            var += d * d;
        }
        var /= n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..tokens.rows() {
            normed.set(i, j, (tokens.get(i, j) - mu) * inv);
        }
    }
    let gained = Matrix::from_fn(normed.rows(), normed.cols(), |i, j| {
        ln.gain.get(i, 0) * normed.get(i, j)
    });
    Matrix::from_fn(gained.rows(), gained.cols(), |i, j| gained.get(i, j) + ln.bias.get(i, 0))
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// negated target slots of the query token after the final layer
    pub prediction: Vec<f64>,
    /// same readout after each layer application
    pub per_layer_predictions: Vec<Vec<f64>>,
    /// final token matrix
    pub tokens: Matrix,
}

/// Full forward pass. Fails with [`Error::Divergence`] if tokens blow up.
pub fn transformer_forward(
    cfg: &ModelConfig,
    params: &ModelParams,
    seq: &TokenSeq,
) -> Result<Forward> {
    cfg.validate()?;
    let (r0, ny) = readout_window(cfg, seq);
    let mut e = match (&params.embed, cfg.embed_dim) {
        (Some(w), Some(_)) => w.matmul(&seq.tokens),
        (None, None) => seq.tokens.clone(),
        _ => return Err(Error::InvalidParam("embed config/params mismatch".into())),
    };
    let readout = |e: &Matrix| -> Vec<f64> {
        (0..ny).map(|i| -e.get(r0 + i, seq.query_index)).collect()
    };
    let mut per_layer = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let layer = &params.layers[cfg.spec_index(l)];
        if let Some(kind) = layer.attn {
            let attn_in = match &layer.ln_attn {
                Some(ln) => layer_norm_forward(ln, &e),
                None => e.clone(),
            };
            let upd = attention_update(kind, &layer.heads, &attn_in, seq.query_index, cfg.use_full_self_attn)?;
            e = e.add(&upd);
        }
        if let Some(mlp) = &layer.mlp {
            let mlp_in = match &layer.ln_mlp {
                Some(ln) => layer_norm_forward(ln, &e),
                None => e.clone(),
            };
            let h1 = mlp.w1.matmul(&mlp_in);
            let h1b = Matrix::from_fn(h1.rows(), h1.cols(), |i, j| h1.get(i, j) + mlp.b1.get(i, 0));
            let g = h1b.map(gelu_scalar);
            let h2 = mlp.w2.matmul(&g);
            let h2b = Matrix::from_fn(h2.rows(), h2.cols(), |i, j| h2.get(i, j) + mlp.b2.get(i, 0));
            e = e.add(&h2b);
        }
        if let Some(c) = cfg.clip_tokens {
            e = e.map(|x| x.clamp(-c, c));
        }
        if !e.all_finite() || e.max_abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { layer: l });
        }
        per_layer.push(readout(&e));
    }
    Ok(Forward {
        prediction: per_layer.last().unwrap().clone(),
        per_layer_predictions: per_layer,
        tokens: e,
    })
}

/// Tape-side mirror of [`ModelParams`]: same structure, `Var` handles.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embed: Option<Var>,
    pub layers: Vec<LayerVars>,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn: Option<AttnKind>,
    pub heads: Vec<HeadVars>,
    pub mlp: Option<MlpVars>,
    pub ln_attn: Option<LnVars>,
    pub ln_mlp: Option<LnVars>,
}

#[derive(Copy, Clone, Debug)]
pub struct HeadVars {
    pub w_k: Var,
    pub w_q: Var,
    pub w_v: Var,
    pub p: Var,
}

#[derive(Copy, Clone, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Copy, Clone, Debug)]
pub struct LnVars {
    pub gain: Var,
    pub bias: Var,
}

impl ParamVars {
    /// Pair a flat `Var` list (from [`ModelParams::flatten`] order) with the
    /// structural template.
    pub fn build(template: &ModelParams, vars: &[Var]) -> Result<ParamVars> {
        let mut it = vars.iter().copied();
        let mut next = |what: &str| -> Result<Var> {
            it.next()
                .ok_or_else(|| Error::InvalidParam(format!("missing var for {what}")))
        };
        let embed = match &template.embed {
            Some(_) => Some(next("embed")?),
            None => None,
        };
        let mut layers = Vec::new();
        for layer in &template.layers {
            let mut heads = Vec::new();
            for _ in &layer.heads {
                heads.push(HeadVars {
                    w_k: next("w_k")?,
                    w_q: next("w_q")?,
                    w_v: next("w_v")?,
                    p: next("p")?,
                });
            }
            let mlp = match &layer.mlp {
                Some(_) => Some(MlpVars {
                    w1: next("w1")?,
                    b1: next("b1")?,
                    w2: next("w2")?,
                    b2: next("b2")?,
                }),
                None => None,
            };
            let ln_attn = match &layer.ln_attn {
                Some(_) => Some(LnVars { gain: next("ln_attn_gain")?, bias: next("ln_attn_bias")? }),
                None => None,
            };
            let ln_mlp = match &layer.ln_mlp {
                Some(_) => Some(LnVars { gain: next("ln_mlp_gain")?, bias: next("ln_mlp_bias")? }),
                None => None,
            };
            layers.push(LayerVars { attn: layer.attn, heads, mlp, ln_attn, ln_mlp });
        }
        if it.next().is_some() {
            return Err(Error::InvalidParam("too many vars for template".into()));
        }
        Ok(ParamVars { embed, layers })
    }
}

fn tape_ln(tape: &mut Tape, ln: &LnVars, x: Var) -> Var {
    let normed = tape.layer_norm_cols(x, LN_EPS);
    let gained = tape.mul_col_broadcast(ln.gain, normed);
    tape.add_col_broadcast(ln.bias, gained)
}

fn tape_attention_update(
    tape: &mut Tape,
    kind: AttnKind,
    heads: &[HeadVars],
    tokens: Var,
    query_index: usize,
    use_full: bool,
) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::InvalidParam("attention_update with no heads".into()));
    }
    let (d, count) = tape.value(tokens).shape();
    let kv = if use_full {
        tokens
    } else {
        if query_index != count - 1 {
            return Err(Error::BadLayout(
                "masked attention expects the query token in last position".into(),
            ));
        }
        tape.slice(tokens, 0, 0, d, count - 1)
    };
    let mut total: Option<Var> = None;
    for head in heads {
        let q = tape.matmul(head.w_q, tokens);
        let k = tape.matmul(head.w_k, kv);
        let kt = tape.transpose(k);
        let scores = tape.matmul(kt, q);
        let attn = match kind {
            AttnKind::Linear => scores,
            AttnKind::Softmax => {
                let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
                tape.softmax_cols(scaled)
            }
        };
        let v = tape.matmul(head.w_v, kv);
        let pv = tape.matmul(head.p, v);
        let upd = tape.matmul(pv, attn);
        total = Some(match total {
            None => upd,
            Some(t) => tape.add(t, upd),
        });
    }
    Ok(total.unwrap())
}

/// Tape forward pass. `tokens` may be an input (for sensitivity analysis)
/// or a constant (for training, where only parameters carry gradients).
/// Returns the prediction as an `ny x 1` node.
pub fn transformer_forward_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pv: &ParamVars,
    tokens: Var,
    seq: &TokenSeq,
) -> Result<Var> {
    cfg.validate()?;
    let (r0, ny) = readout_window(cfg, seq);
    let mut e = match (pv.embed, cfg.embed_dim) {
        (Some(w), Some(_)) => tape.matmul(w, tokens),
        (None, None) => tokens,
        _ => return Err(Error::InvalidParam("embed config/params mismatch".into())),
    };
    for l in 0..cfg.depth {
        let layer = &pv.layers[cfg.spec_index(l)];
        if let Some(kind) = layer.attn {
            let attn_in = match &layer.ln_attn {
                Some(ln) => tape_ln(tape, ln, e),
                None => e,
            };
            let upd = tape_attention_update(
                tape,
                kind,
                &layer.heads,
                attn_in,
                seq.query_index,
                cfg.use_full_self_attn,
            )?;
            e = tape.add(e, upd);
        }
        if let Some(mlp) = &layer.mlp {
            let mlp_in = match &layer.ln_mlp {
                Some(ln) => tape_ln(tape, ln, e),
                None => e,
            };
            let h1 = tape.matmul(mlp.w1, mlp_in);
            let h1b = tape.add_col_broadcast(mlp.b1, h1);
            let g = tape.gelu(h1b);
            let h2 = tape.matmul(mlp.w2, g);
            let h2b = tape.add_col_broadcast(mlp.b2, h2);
            e = tape.add(e, h2b);
        }
        if let Some(c) = cfg.clip_tokens {
            e = tape.clip(e, -c, c);
        }
        let val = tape.value(e);
        if !val.all_finite() || val.max_abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { layer: l });
        }
    }
    let window = tape.slice(e, r0, seq.query_index, ny, 1);
    Ok(tape.neg(window))
}
