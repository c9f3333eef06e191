//! Synthetic in-context regression tasks and their token layouts.
//!
//! Linear tasks use a noiseless teacher `W ~ N(0, I)` on inputs
//! `x ~ U(-1, 1)^{nx}`; sine tasks follow the few-shot regression setup
//! with amplitude `U(0.1, 5)` and phase `U(0, pi)`. Out-of-distribution
//! variants rescale the input range, the teacher, or swap the input
//! distribution entirely.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::{Dist, SeedStream};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Linear,
    Sine,
}

/// One in-context regression problem: N context pairs plus a query pair.
#[derive(Clone, Debug)]
pub struct Task {
    /// nx x n
    pub inputs: Matrix,
    /// ny x n
    pub targets: Matrix,
    pub query_input: Vec<f64>,
    pub query_target: Vec<f64>,
    pub teacher: Option<Matrix>,
    pub kind: TaskKind,
}

impl Task {
    pub fn n(&self) -> usize {
        self.inputs.cols()
    }

    pub fn nx(&self) -> usize {
        self.inputs.rows()
    }

    pub fn ny(&self) -> usize {
        self.targets.rows()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OodMode {
    /// inputs ~ U(-alpha, alpha)
    InputRange,
    /// teacher scaled by alpha
    TeacherScale,
    /// inputs = alpha * (sample from alt_dist)
    AltDistScale,
}

#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct OodSpec {
    pub alpha: f64,
    pub mode: OodMode,
    pub alt_dist: Option<Dist>,
}

impl Default for OodSpec {
    fn default() -> Self {
        OodSpec {
            alpha: 1.0,
            mode: OodMode::InputRange,
            alt_dist: None,
        }
    }
}

impl OodSpec {
    pub fn input_range(alpha: f64) -> Self {
        OodSpec { alpha, mode: OodMode::InputRange, alt_dist: None }
    }

    pub fn teacher_scale(alpha: f64) -> Self {
        OodSpec { alpha, mode: OodMode::TeacherScale, alt_dist: None }
    }

    pub fn alt_dist(alpha: f64, dist: Dist) -> Self {
        OodSpec { alpha, mode: OodMode::AltDistScale, alt_dist: Some(dist) }
    }
}

/// Linear teacher-student task. Targets are exactly `teacher * inputs`;
/// the query pair is drawn from the same distribution as the context.
pub fn sample_linear_task(
    stream: &mut SeedStream,
    n: usize,
    nx: usize,
    ny: usize,
    ood: &OodSpec,
) -> Task {
    assert!(n >= 1 && nx >= 1 && ny >= 1);
    assert!(ood.alpha >= 0.0, "alpha must be nonnegative");
    let teacher_scale = if ood.mode == OodMode::TeacherScale { ood.alpha } else { 1.0 };
    let teacher = stream.standard_normal(ny, nx).scale(teacher_scale);

    let draw_inputs = |cols: usize, stream: &mut SeedStream| -> Matrix {
        match ood.mode {
            OodMode::InputRange => stream.uniform(-ood.alpha, ood.alpha, nx, cols),
            OodMode::TeacherScale => stream.uniform(-1.0, 1.0, nx, cols),
            OodMode::AltDistScale => {
                let dist = ood.alt_dist.expect("AltDistScale requires alt_dist");
                stream.sample(dist, nx, cols).expect("unit parameters").scale(ood.alpha)
            }
        }
    };

    let inputs = draw_inputs(n, stream);
    let targets = teacher.matmul(&inputs);
    let query = draw_inputs(1, stream);
    let query_target = teacher.matmul(&query);
    Task {
        inputs,
        targets,
        query_input: query.col(0),
        query_target: query_target.col(0),
        teacher: Some(teacher),
        kind: TaskKind::Linear,
    }
}

/// Sine-wave task: amplitude `a ~ U(0.1, 5)`, phase `rho ~ U(0, pi)`,
/// inputs `x ~ U(-5, 5)`, targets `y = a sin(rho + x)`. The query x is
/// drawn from the same range.
pub fn sample_sine_task(stream: &mut SeedStream, n: usize) -> Task {
    assert!(n >= 1);
    let a = stream.uniform_scalar(0.1, 5.0);
    let rho = stream.uniform_scalar(0.0, std::f64::consts::PI);
    let xs: Vec<f64> = (0..n).map(|_| stream.uniform_scalar(-5.0, 5.0)).collect();
    let xq = stream.uniform_scalar(-5.0, 5.0);
    sine_task_with(a, rho, &xs, xq)
}

/// Deterministic sine task for tests and probes.
pub fn sine_task_with(a: f64, rho: f64, xs: &[f64], xq: f64) -> Task {
    let n = xs.len();
    let inputs = Matrix::from_vec(1, n, xs.to_vec());
    let targets = Matrix::from_vec(1, n, xs.iter().map(|x| a * (rho + x).sin()).collect());
    Task {
        inputs,
        targets,
        query_input: vec![xq],
        query_target: vec![a * (rho + xq).sin()],
        teacher: None,
        kind: TaskKind::Sine,
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// tokens e_j = (x_j, y_j), query (x_q, 0); N+1 tokens
    Concat,
    /// alternating (x_j, 0, pe) / (0, y_j, pe); 2N+1 tokens
    Alternating,
    /// the copy-construction layout: padded data plus unit-vector encodings
    AlternatingProp3,
}

/// Ordered token vectors (stored as columns) with query bookkeeping.
#[derive(Clone, Debug)]
pub struct TokenSeq {
    /// dim x count
    pub tokens: Matrix,
    pub query_index: usize,
    pub layout: Layout,
    pub pos_enc_dim: usize,
    pub nx: usize,
    pub ny: usize,
    /// held-out target of the query token (never placed in `tokens`)
    pub query_target: Vec<f64>,
}

impl TokenSeq {
    pub fn dim(&self) -> usize {
        self.tokens.rows()
    }

    pub fn count(&self) -> usize {
        self.tokens.cols()
    }

    /// (offset, len) of the slots the prediction is read from
    /// (negated y-entries of the query token).
    pub fn readout_range(&self) -> (usize, usize) {
        match self.layout {
            Layout::Concat | Layout::Alternating => (self.nx, self.ny),
            Layout::AlternatingProp3 => {
                let m = self.dim() / 2;
                (m + self.nx - self.ny, self.ny)
            }
        }
    }

    pub fn with_tokens(&self, tokens: Matrix) -> TokenSeq {
        TokenSeq { tokens, ..self.clone() }
    }
}

/// Concat layout: token j = (x_j, y_j) for context, (x_q, 0) for the query.
pub fn build_tokens_concat(task: &Task) -> TokenSeq {
    let (n, nx, ny) = (task.n(), task.nx(), task.ny());
    let dim = nx + ny;
    let mut tokens = Matrix::zeros(dim, n + 1);
    for j in 0..n {
        for i in 0..nx {
            tokens.set(i, j, task.inputs.get(i, j));
        }
        for i in 0..ny {
            tokens.set(nx + i, j, task.targets.get(i, j));
        }
    }
    for i in 0..nx {
        tokens.set(i, n, task.query_input[i]);
    }
    TokenSeq {
        tokens,
        query_index: n,
        layout: Layout::Concat,
        pos_enc_dim: 0,
        nx,
        ny,
        query_target: task.query_target.clone(),
    }
}

/// Exact inverse of [`build_tokens_concat`] on its image.
pub fn strip_tokens_concat(seq: &TokenSeq) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if seq.layout != Layout::Concat {
        return Err(Error::BadLayout("strip_tokens_concat needs concat layout".into()));
    }
    let n = seq.count() - 1;
    let inputs = seq.tokens.block(0, 0, seq.nx, n);
    let targets = seq.tokens.block(seq.nx, 0, seq.ny, n);
    let query = (0..seq.nx).map(|i| seq.tokens.get(i, seq.query_index)).collect();
    Ok((inputs, targets, query))
}

fn sinusoidal_encoding(pos: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; dim];
    for i in 0..dim {
        let exponent = 2.0 * (i / 2) as f64 / dim as f64;
        let angle = pos as f64 / 10000f64.powf(exponent);
        pe[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    pe
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AltMode {
    /// training layout: (x-slot, y-slot, sinusoidal encodings)
    Trained,
    /// verification layout of the copy construction: data padded to
    /// dim 2N+1 plus unit-vector positional encodings
    Prop3,
}

/// Alternating layout: 2N+1 tokens, inputs on even positions, targets on
/// odd positions, query input last.
pub fn build_tokens_alternating(task: &Task, pos_enc_dim: usize, mode: AltMode) -> Result<TokenSeq> {
    let (n, nx, ny) = (task.n(), task.nx(), task.ny());
    if nx < ny {
        return Err(Error::BadLayout(format!(
            "alternating layout requires nx >= ny, got nx={nx} ny={ny}"
        )));
    }
    if pos_enc_dim == 0 {
        return Err(Error::BadLayout("positional encodings are required (pos_enc_dim >= 1)".into()));
    }
    let count = 2 * n + 1;
    match mode {
        AltMode::Trained => {
            let dim = nx + ny + pos_enc_dim;
            let mut tokens = Matrix::zeros(dim, count);
            for pos in 0..count {
                let pe = sinusoidal_encoding(pos, pos_enc_dim);
                for (i, v) in pe.iter().enumerate() {
                    tokens.set(nx + ny + i, pos, *v);
                }
            }
            for j in 0..n {
                for i in 0..nx {
                    tokens.set(i, 2 * j, task.inputs.get(i, j));
                }
                for i in 0..ny {
                    tokens.set(nx + i, 2 * j + 1, task.targets.get(i, j));
                }
            }
            for i in 0..nx {
                tokens.set(i, 2 * n, task.query_input[i]);
            }
            Ok(TokenSeq {
                tokens,
                query_index: 2 * n,
                layout: Layout::Alternating,
                pos_enc_dim,
                nx,
                ny,
                query_target: task.query_target.clone(),
            })
        }
        AltMode::Prop3 => {
            // data block padded to m = 2N+1 entries; y sits in the last ny
            // coordinates of the nx-wide data slot, as in the construction
            let m = count;
            let dim = 2 * m;
            let mut tokens = Matrix::zeros(dim, count);
            for j in 0..n {
                for i in 0..nx {
                    tokens.set(i, 2 * j, task.inputs.get(i, j));
                }
                for i in 0..ny {
                    tokens.set(nx - ny + i, 2 * j + 1, task.targets.get(i, j));
                }
            }
            for i in 0..nx {
                tokens.set(i, 2 * n, task.query_input[i]);
            }
            // unit-vector positional encodings
            for pos in 0..count {
                tokens.set(m + pos, pos, 1.0);
            }
            Ok(TokenSeq {
                tokens,
                query_index: 2 * n,
                layout: Layout::AlternatingProp3,
                pos_enc_dim: m,
                nx,
                ny,
                query_target: task.query_target.clone(),
            })
        }
    }
}

/// Exact inverse of the trained alternating layout on its image.
pub fn strip_tokens_alternating(seq: &TokenSeq) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if seq.layout != Layout::Alternating {
        return Err(Error::BadLayout("strip_tokens_alternating needs alternating layout".into()));
    }
    let n = (seq.count() - 1) / 2;
    let mut inputs = Matrix::zeros(seq.nx, n);
    let mut targets = Matrix::zeros(seq.ny, n);
    for j in 0..n {
        for i in 0..seq.nx {
            inputs.set(i, j, seq.tokens.get(i, 2 * j));
        }
        for i in 0..seq.ny {
            targets.set(i, j, seq.tokens.get(seq.nx + i, 2 * j + 1));
        }
    }
    let query = (0..seq.nx).map(|i| seq.tokens.get(i, seq.query_index)).collect();
    Ok((inputs, targets, query))
}

/// CSV export: columns x_1..x_nx, y_1..y_ny, role in {context, query}.
pub fn export_task_csv(task: &Task, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..task.nx() {
        write!(out, "x_{},", i + 1).unwrap();
    }
    for i in 0..task.ny() {
        write!(out, "y_{},", i + 1).unwrap();
    }
    out.push_str("role\n");
    for j in 0..task.n() {
        for i in 0..task.nx() {
            write!(out, "{:.16e},", task.inputs.get(i, j)).unwrap();
        }
        for i in 0..task.ny() {
            write!(out, "{:.16e},", task.targets.get(i, j)).unwrap();
        }
        out.push_str("context\n");
    }
    for v in &task.query_input {
        write!(out, "{v:.16e},").unwrap();
    }
    for v in &task.query_target {
        write!(out, "{v:.16e},").unwrap();
    }
    out.push_str("query\n");
    fs::write(path, out)?;
    Ok(())
}
