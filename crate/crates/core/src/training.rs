//! Meta-training of transformer parameters on the in-context regression
//! objective L(theta) = 1/B sum_tasks ||y_hat - y_query||^2, with Adam,
//! global-norm gradient clipping, fresh or fixed task pools, and the
//! token-copying experiment with its cross-token sensitivity probe.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    transformer_forward, transformer_forward_tape, AttnKind, LayerSpec, ModelConfig, ModelParams,
    ParamVars,
};
use crate::numerics::adam::{adam_step, clip_global_norm, AdamState};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::{Seed, SeedStream};
use crate::numerics::tape::Tape;
use crate::taskgen::{
    build_tokens_alternating, build_tokens_concat, sample_linear_task, sample_sine_task, AltMode,
    Layout, OodSpec, Task, TaskKind, TokenSeq,
};

/// Task distribution plus token layout for a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n: usize,
    pub nx: usize,
    pub ny: usize,
    pub kind: TaskKind,
    pub layout: Layout,
    pub pos_enc_dim: usize,
    pub ood: OodSpec,
}

impl TaskSpec {
    /// The default regression setting: N = N_x = 10, N_y = 1, concat tokens.
    pub fn default_linear() -> Self {
        TaskSpec {
            n: 10,
            nx: 10,
            ny: 1,
            kind: TaskKind::Linear,
            layout: Layout::Concat,
            pos_enc_dim: 0,
            ood: OodSpec::default(),
        }
    }

    pub fn sine(n: usize) -> Self {
        TaskSpec {
            n,
            nx: 1,
            ny: 1,
            kind: TaskKind::Sine,
            layout: Layout::Concat,
            pos_enc_dim: 0,
            ood: OodSpec::default(),
        }
    }

    /// Token dimension produced by [`TaskSpec::tokens`].
    pub fn token_dim(&self) -> usize {
        match self.layout {
            Layout::Concat => self.nx + self.ny,
            Layout::Alternating => self.nx + self.ny + self.pos_enc_dim,
            Layout::AlternatingProp3 => 2 * (2 * self.n + 1),
        }
    }

    pub fn sample(&self, stream: &mut SeedStream) -> Task {
        match self.kind {
            TaskKind::Linear => sample_linear_task(stream, self.n, self.nx, self.ny, &self.ood),
            TaskKind::Sine => sample_sine_task(stream, self.n),
        }
    }

    pub fn tokens(&self, task: &Task) -> Result<TokenSeq> {
        match self.layout {
            Layout::Concat => Ok(build_tokens_concat(task)),
            Layout::Alternating => build_tokens_alternating(task, self.pos_enc_dim, AltMode::Trained),
            Layout::AlternatingProp3 => {
                build_tokens_alternating(task, self.pos_enc_dim, AltMode::Prop3)
            }
        }
    }

    pub fn sample_batch(&self, count: usize, stream: &mut SeedStream) -> Result<Vec<TokenSeq>> {
        (0..count).map(|_| self.tokens(&self.sample(stream))).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub task: TaskSpec,
    /// cycle over a single fixed pool of this many tasks instead of fresh
    /// batches
    pub fixed_pool: Option<usize>,
    pub seed: Seed,
    pub eval_every: usize,
    pub eval_tasks: usize,
    /// record the copy-experiment cross-token sensitivity probe at eval steps
    pub probe_sensitivity: bool,
}

impl TrainConfig {
    /// Paper defaults: batch 2048, clip 10, lr 1e-3 below depth 3 and 5e-4
    /// from depth 3 on.
    pub fn defaults(model: ModelConfig, task: TaskSpec, seed: Seed) -> Self {
        let lr = if model.depth < 3 { 1e-3 } else { 5e-4 };
        TrainConfig {
            model,
            batch_size: 2048,
            steps: 5000,
            lr,
            grad_clip: 10.0,
            task,
            fixed_pool: None,
            seed,
            eval_every: 100,
            eval_tasks: 10_000,
            probe_sensitivity: false,
        }
    }

    /// The two-layer copying setup: softmax attention first, linear
    /// attention second, alternating tokens with positional encodings.
    pub fn copy_experiment(n: usize, nx: usize, seed: Seed) -> Self {
        let task = TaskSpec {
            n,
            nx,
            ny: 1,
            kind: TaskKind::Linear,
            layout: Layout::Alternating,
            pos_enc_dim: 20,
            ood: OodSpec::default(),
        };
        let model = ModelConfig {
            token_dim: task.token_dim(),
            embed_dim: None,
            depth: 2,
            recurrent: false,
            layers: vec![LayerSpec::softmax_attn(1), LayerSpec::linear_attn()],
            clip_tokens: None,
            use_full_self_attn: true,
            init_std_scale: 1.0,
            fan_in_mlp_init: false,
        };
        let mut cfg = TrainConfig::defaults(model, task, seed);
        cfg.probe_sensitivity = true;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParam("steps must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidParam("eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParam(format!("bad lr {}", self.lr)));
        }
        if let Some(b) = self.fixed_pool {
            if b == 0 {
                return Err(Error::InvalidParam("fixed_pool must be >= 1".into()));
            }
        }
        if self.model.token_dim != self.task.token_dim() {
            return Err(Error::InvalidParam(format!(
                "model token_dim {} != layout token dim {}",
                self.model.token_dim,
                self.task.token_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub train_loss: f64,
    /// post-clip global gradient norm
    pub grad_norm: f64,
    pub eval_loss: Option<f64>,
    pub probe_neighbor: Option<f64>,
    pub probe_other: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub diverged: bool,
    /// constant reference lines for the trace CSV, when the caller has them
    pub baseline_gd: Option<f64>,
    pub baseline_gdpp: Option<f64>,
}

impl TrainTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "step,train_loss,grad_norm,eval_loss,baseline_gd,baseline_gdpp,probe_neighbor,probe_other"
        )?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                f,
                "{},{:.17e},{:.17e},{},{},{},{},{}",
                r.step,
                r.train_loss,
                r.grad_norm,
                opt(r.eval_loss),
                opt(self.baseline_gd),
                opt(self.baseline_gdpp),
                opt(r.probe_neighbor),
                opt(r.probe_other),
            )?;
        }
        Ok(())
    }
}

/// Mean squared prediction error of `params` over a token-sequence batch.
/// A divergent forward pass yields `f64::INFINITY`.
pub fn eval_loss(params: &ModelParams, cfg: &ModelConfig, batch: &[TokenSeq]) -> f64 {
    let mut acc = 0.0;
    for seq in batch {
        match transformer_forward(cfg, params, seq) {
            Ok(fwd) => {
                acc += fwd
                    .prediction
                    .iter()
                    .zip(&seq.query_target)
                    .map(|(p, y)| (p - y) * (p - y))
                    .sum::<f64>();
            }
            Err(_) => return f64::INFINITY,
        }
    }
    acc / batch.len() as f64
}

/// One Adam step on a task batch. Returns (train loss, post-clip grad norm).
/// `frozen` flags (aligned with the flattened parameter order) zero the
/// corresponding gradients before clipping.
fn train_step(
    cfg: &TrainConfig,
    params: &mut ModelParams,
    state: &mut AdamState,
    batch: &[TokenSeq],
    frozen: &[bool],
) -> Result<(f64, f64)> {
    let flat = params.flatten();
    let mut tape = Tape::new();
    let vars: Vec<_> = flat.iter().map(|m| tape.input(m.clone())).collect();
    let pv = ParamVars::build(params, &vars)?;
    let mut loss: Option<crate::numerics::tape::Var> = None;
    for seq in batch {
        let tokens = tape.constant(seq.tokens.clone());
        let pred = transformer_forward_tape(&mut tape, &cfg.model, &pv, tokens, seq)?;
        let target = tape.constant(Matrix::col_vec(&seq.query_target));
        let diff = tape.sub(pred, target);
        let sq = tape.square(diff);
        let s = tape.sum_all(sq);
        loss = Some(match loss {
            None => s,
            Some(l) => tape.add(l, s),
        });
    }
    let total = loss.expect("non-empty batch");
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let train_loss = tape.scalar_value(mean);
    if !train_loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = tape.backward(mean)?;
    let mut grad_mats: Vec<Matrix> = vars.iter().map(|v| grads.wrt(*v, &tape)).collect();
    for (g, fz) in grad_mats.iter_mut().zip(frozen) {
        if *fz {
            *g = Matrix::zeros(g.rows(), g.cols());
        }
    }
    clip_global_norm(&mut grad_mats, cfg.grad_clip);
    let norm = crate::numerics::matrix::global_norm(&grad_mats);
    let mut flat = flat;
    adam_step(state, &mut flat, &grad_mats)?;
    *params = params.unflatten_like(&flat)?;
    Ok((train_loss, norm))
}

/// Meta-train a model on the in-context objective. Divergence aborts the
/// run and returns the partial trace with `diverged = true`.
pub fn meta_train(cfg: &TrainConfig) -> Result<(ModelParams, TrainTrace)> {
    meta_train_from(cfg, None, &[])
}

/// [`meta_train`] with an explicit initialization and a set of layer
/// indices whose parameters stay fixed (their gradients are zeroed before
/// clipping). Used for backprop-through-GD controls where an attention
/// layer is pinned to a construction while the rest of the model learns.
pub fn meta_train_from(
    cfg: &TrainConfig,
    init: Option<ModelParams>,
    freeze_layers: &[usize],
) -> Result<(ModelParams, TrainTrace)> {
    cfg.validate()?;
    let mut root = SeedStream::new(cfg.seed);
    let mut param_stream = root.split();
    let mut data_stream = root.split();
    let mut eval_stream = root.split();
    let mut params = match init {
        Some(p) => {
            let template = ModelParams::init(&cfg.model, &mut param_stream)?;
            for (a, b) in template.flatten().iter().zip(p.flatten().iter()) {
                a.check_same_shape(b, "meta_train_from init")?;
            }
            p
        }
        None => ModelParams::init(&cfg.model, &mut param_stream)?,
    };
    let frozen: Vec<bool> = params
        .named()
        .iter()
        .map(|(name, _)| freeze_layers.iter().any(|l| name.starts_with(&format!("layer{l}_"))))
        .collect();
    let mut state = AdamState::new(&params.flatten(), cfg.lr);
    let eval_batch = cfg.task.sample_batch(cfg.eval_tasks, &mut eval_stream)?;
    let pool = match cfg.fixed_pool {
        Some(b) => Some(cfg.task.sample_batch(b, &mut data_stream)?),
        None => None,
    };
    let mut pool_cursor = 0usize;
    let mut trace = TrainTrace::default();
    for step in 0..cfg.steps {
        let batch: Vec<TokenSeq> = match &pool {
            Some(p) => (0..cfg.batch_size)
                .map(|i| p[(pool_cursor + i) % p.len()].clone())
                .collect(),
            None => cfg.task.sample_batch(cfg.batch_size, &mut data_stream)?,
        };
        if pool.is_some() {
            pool_cursor = (pool_cursor + cfg.batch_size) % pool.as_ref().unwrap().len();
        }
        let (train_loss, grad_norm) = match train_step(cfg, &mut params, &mut state, &batch, &frozen)
        {
            Ok(v) => v,
            Err(Error::Divergence { .. }) | Err(Error::NonFinite(_)) => {
                trace.diverged = true;
                return Ok((params, trace));
            }
            Err(e) => return Err(e),
        };
        let at_eval = step % cfg.eval_every == 0 || step + 1 == cfg.steps;
        let mut row = TraceRow {
            step,
            train_loss,
            grad_norm,
            eval_loss: None,
            probe_neighbor: None,
            probe_other: None,
        };
        if at_eval {
            row.eval_loss = Some(eval_loss(&params, &cfg.model, &eval_batch));
            if cfg.probe_sensitivity {
                let (nb, other) = cross_token_sensitivity(&cfg.model, &params, &eval_batch[0])?;
                row.probe_neighbor = Some(nb);
                row.probe_other = Some(other);
            }
        }
        trace.rows.push(row);
    }
    Ok((params, trace))
}

/// Wrapper enforcing the copying-experiment shape (alternating tokens,
/// depth 2, softmax first layer, probes on).
pub fn train_copy_experiment(cfg: &TrainConfig) -> Result<(ModelParams, TrainTrace)> {
    if cfg.task.layout != Layout::Alternating {
        return Err(Error::BadLayout("copy experiment needs alternating tokens".into()));
    }
    if cfg.task.pos_enc_dim == 0 {
        return Err(Error::BadLayout("copy experiment needs positional encodings".into()));
    }
    if cfg.model.depth != 2
        || cfg.model.recurrent
        || cfg.model.layers.first().and_then(|l| l.attn) != Some(AttnKind::Softmax)
    {
        return Err(Error::InvalidParam(
            "copy experiment expects depth 2 with a softmax first layer".into(),
        ));
    }
    let mut cfg = cfg.clone();
    cfg.probe_sensitivity = true;
    meta_train(&cfg)
}

/// Mean Frobenius norm of the first layer's cross-token Jacobian blocks
/// d(out token j)/d(in token k), split into neighbor (k = j+1) and all
/// other k != j blocks. Central finite differences on the plain forward.
pub fn cross_token_sensitivity(
    cfg: &ModelConfig,
    params: &ModelParams,
    seq: &TokenSeq,
) -> Result<(f64, f64)> {
    let first = ModelConfig {
        depth: 1,
        recurrent: false,
        layers: vec![cfg.layers[0].clone()],
        embed_dim: None,
        ..cfg.clone()
    };
    let first_params = ModelParams { embed: None, layers: vec![params.layers[0].clone()] };
    let d = seq.dim();
    let count = seq.count();
    let h = 1e-5;
    // jac[j][k] accumulates the squared Frobenius norm of block (j, k)
    let mut jac = vec![vec![0.0f64; count]; count];
    for k in 0..count {
        for i in 0..d {
            let mut plus = seq.clone();
            plus.tokens.set(i, k, plus.tokens.get(i, k) + h);
            let mut minus = seq.clone();
            minus.tokens.set(i, k, minus.tokens.get(i, k) - h);
            let fp = transformer_forward(&first, &first_params, &plus)?.tokens;
            let fm = transformer_forward(&first, &first_params, &minus)?.tokens;
            for j in 0..count {
                for r in 0..d {
                    let g = (fp.get(r, j) - fm.get(r, j)) / (2.0 * h);
                    jac[j][k] += g * g;
                }
            }
        }
    }
    let mut neighbor = (0.0, 0usize);
    let mut other = (0.0, 0usize);
    for j in 0..count {
        for k in 0..count {
            if k == j {
                continue;
            }
            let norm = jac[j][k].sqrt();
            if k == j + 1 {
                neighbor.0 += norm;
                neighbor.1 += 1;
            } else {
                other.0 += norm;
                other.1 += 1;
            }
        }
    }
    Ok((neighbor.0 / neighbor.1.max(1) as f64, other.0 / other.1.max(1) as f64))
}
