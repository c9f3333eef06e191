//! Tape-based reverse-mode differentiation over whole matrices.
//!
//! The op set is closed: a loss function can only be composed of the
//! methods on [`Tape`], so "unregistered operation" failures are ruled out
//! at compile time. Values are computed eagerly as nodes are pushed; a
//! single [`Tape::backward`] pass then yields gradients for every
//! differentiable leaf.
//!
//! The engine deliberately supports first derivatives only, on dense 2-D
//! matrices. That covers everything the models here need: matmul, add,
//! elementwise product, softmax, GELU, LayerNorm, sum, mean, square, plus
//! block slicing/padding for token assembly.

use crate::error::{Error, Result};
use crate::numerics::matrix::{flat_dot, Matrix};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Node {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    /// scalar (1x1) times matrix
    ScaleBy { scalar: usize, mat: usize },
    Hadamard(usize, usize),
    Square(usize),
    SoftmaxCols(usize),
    Gelu(usize),
    LayerNormCols { src: usize, eps: f64 },
    /// per-column gain: out[i][j] = v[i] * m[i][j], v is d x 1
    MulColBroadcast { vec: usize, mat: usize },
    /// per-column bias: out[i][j] = m[i][j] + v[i]
    AddColBroadcast { vec: usize, mat: usize },
    SumAll(usize),
    MeanAll(usize),
    Slice { src: usize, r0: usize, c0: usize },
    Pad { src: usize, r0: usize, c0: usize },
    Clip { src: usize, lo: f64, hi: f64 },
}

pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Matrix>,
    needs_grad: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    fn push(&mut self, node: Node, val: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(node);
        self.vals.push(val);
        self.needs_grad.push(needs_grad);
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Node::Leaf, m, true)
    }

    /// Non-differentiable leaf (data, fixed weights).
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Node::Leaf, m, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.vals[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = &self.vals[v.0];
        assert_eq!(m.shape(), (1, 1), "expected a 1x1 value");
        m.get(0, 0)
    }

    fn ng(&self, a: usize) -> bool {
        self.needs_grad[a]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0].add(&self.vals[b.0]);
        self.push(Node::Add(a.0, b.0), v, self.ng(a.0) || self.ng(b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0].sub(&self.vals[b.0]);
        self.push(Node::Sub(a.0, b.0), v, self.ng(a.0) || self.ng(b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].scale(-1.0);
        self.push(Node::Neg(a.0), v, self.ng(a.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0].matmul(&self.vals[b.0]);
        self.push(Node::MatMul(a.0, b.0), v, self.ng(a.0) || self.ng(b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].transpose();
        self.push(Node::Transpose(a.0), v, self.ng(a.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.vals[a.0].scale(c);
        self.push(Node::Scale(a.0, c), v, self.ng(a.0))
    }

    /// Multiply matrix `mat` by the 1x1 value `scalar`.
    pub fn scale_by(&mut self, scalar: Var, mat: Var) -> Var {
        assert_eq!(self.vals[scalar.0].shape(), (1, 1));
        let s = self.vals[scalar.0].get(0, 0);
        let v = self.vals[mat.0].scale(s);
        self.push(
            Node::ScaleBy { scalar: scalar.0, mat: mat.0 },
            v,
            self.ng(scalar.0) || self.ng(mat.0),
        )
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.0].hadamard(&self.vals[b.0]);
        self.push(Node::Hadamard(a.0, b.0), v, self.ng(a.0) || self.ng(b.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].map(|x| x * x);
        self.push(Node::Square(a.0), v, self.ng(a.0))
    }

    /// Softmax over rows, independently per column (attention over keys).
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let src = &self.vals[a.0];
        let mut out = Matrix::zeros(src.rows(), src.cols());
        for j in 0..src.cols() {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..src.rows() {
                mx = mx.max(src.get(i, j));
            }
            let mut z = 0.0;
            for i in 0..src.rows() {
                let e = (src.get(i, j) - mx).exp();
                out.set(i, j, e);
                z += e;
            }
            for i in 0..src.rows() {
                out.set(i, j, out.get(i, j) / z);
            }
        }
        self.push(Node::SoftmaxCols(a.0), out, self.ng(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].map(gelu_scalar);
        self.push(Node::Gelu(a.0), v, self.ng(a.0))
    }

    /// Per-column zero-mean unit-variance normalization (no affine part;
    /// compose with [`Tape::mul_col_broadcast`] / [`Tape::add_col_broadcast`]).
    pub fn layer_norm_cols(&mut self, a: Var, eps: f64) -> Var {
        let src = &self.vals[a.0];
        let n = src.rows() as f64;
        let mut out = Matrix::zeros(src.rows(), src.cols());
        for j in 0..src.cols() {
            let mut mu = 0.0;
            for i in 0..src.rows() {
                mu += src.get(i, j);
            }
            mu /= n;
            let mut var = 0.0;
            for i in 0..src.rows() {
                let d = src.get(i, j) - mu;
                var += d * d;
            }
            var /= n;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..src.rows() {
                out.set(i, j, (src.get(i, j) - mu) * inv);
            }
        }
        self.push(Node::LayerNormCols { src: a.0, eps }, out, self.ng(a.0))
    }

    pub fn mul_col_broadcast(&mut self, vec: Var, mat: Var) -> Var {
        let v = &self.vals[vec.0];
        let m = &self.vals[mat.0];
        assert_eq!(v.cols(), 1);
        assert_eq!(v.rows(), m.rows());
        let out = Matrix::from_fn(m.rows(), m.cols(), |i, j| v.get(i, 0) * m.get(i, j));
        self.push(
            Node::MulColBroadcast { vec: vec.0, mat: mat.0 },
            out,
            self.ng(vec.0) || self.ng(mat.0),
        )
    }

    pub fn add_col_broadcast(&mut self, vec: Var, mat: Var) -> Var {
        let v = &self.vals[vec.0];
        let m = &self.vals[mat.0];
        assert_eq!(v.cols(), 1);
        assert_eq!(v.rows(), m.rows());
        let out = Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + v.get(i, 0));
        self.push(
            Node::AddColBroadcast { vec: vec.0, mat: mat.0 },
            out,
            self.ng(vec.0) || self.ng(mat.0),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.vals[a.0].sum();
        self.push(Node::SumAll(a.0), Matrix::from_vec(1, 1, vec![s]), self.ng(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.vals[a.0].mean();
        self.push(Node::MeanAll(a.0), Matrix::from_vec(1, 1, vec![m]), self.ng(a.0))
    }

    pub fn slice(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let v = self.vals[a.0].block(r0, c0, rows, cols);
        self.push(Node::Slice { src: a.0, r0, c0 }, v, self.ng(a.0))
    }

    /// Embed `a` as a block at (r0, c0) inside a zero matrix of the given size.
    pub fn pad(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Var {
        let src = &self.vals[a.0];
        assert!(r0 + src.rows() <= rows && c0 + src.cols() <= cols, "pad out of range");
        let mut out = Matrix::zeros(rows, cols);
        out.set_block(r0, c0, src);
        self.push(Node::Pad { src: a.0, r0, c0 }, out, self.ng(a.0))
    }

    /// Elementwise clamp; gradient passes through strictly inside (lo, hi).
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.vals[a.0].map(|x| x.clamp(lo, hi));
        self.push(Node::Clip { src: a.0, lo, hi }, v, self.ng(a.0))
    }

    /// Reverse pass from a 1x1 loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lval = &self.vals[loss.0];
        if lval.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: "1x1 loss".into(),
                got: format!("{}x{}", lval.rows(), lval.cols()),
            });
        }
        if !lval.get(0, 0).is_finite() {
            return Err(Error::NonFinite("loss value in backward pass"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx] {
                Node::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Node::Add(a, b) => {
                    self.accum(&mut grads, *a, &g);
                    self.accum(&mut grads, *b, &g);
                }
                Node::Sub(a, b) => {
                    self.accum(&mut grads, *a, &g);
                    self.accum_scaled(&mut grads, *b, -1.0, &g);
                }
                Node::Neg(a) => self.accum_scaled(&mut grads, *a, -1.0, &g),
                Node::MatMul(a, b) => {
                    if self.needs_grad[*a] {
                        let da = g.matmul(&self.vals[*b].transpose());
                        self.accum(&mut grads, *a, &da);
                    }
                    if self.needs_grad[*b] {
                        let db = self.vals[*a].transpose().matmul(&g);
                        self.accum(&mut grads, *b, &db);
                    }
                }
                Node::Transpose(a) => {
                    let da = g.transpose();
                    self.accum(&mut grads, *a, &da);
                }
                Node::Scale(a, c) => self.accum_scaled(&mut grads, *a, *c, &g),
                Node::ScaleBy { scalar, mat } => {
                    let s = self.vals[*scalar].get(0, 0);
                    if self.needs_grad[*mat] {
                        self.accum_scaled(&mut grads, *mat, s, &g);
                    }
                    if self.needs_grad[*scalar] {
                        let ds = flat_dot(&g, &self.vals[*mat]);
                        self.accum(&mut grads, *scalar, &Matrix::from_vec(1, 1, vec![ds]));
                    }
                }
                Node::Hadamard(a, b) => {
                    if self.needs_grad[*a] {
                        let da = g.hadamard(&self.vals[*b]);
                        self.accum(&mut grads, *a, &da);
                    }
                    if self.needs_grad[*b] {
                        let db = g.hadamard(&self.vals[*a]);
                        self.accum(&mut grads, *b, &db);
                    }
                }
                Node::Square(a) => {
                    let da = g.hadamard(&self.vals[*a].scale(2.0));
                    self.accum(&mut grads, *a, &da);
                }
                Node::SoftmaxCols(a) => {
                    let s = &self.vals[idx];
                    let mut da = Matrix::zeros(s.rows(), s.cols());
                    for j in 0..s.cols() {
                        let mut dot = 0.0;
                        for i in 0..s.rows() {
                            dot += s.get(i, j) * g.get(i, j);
                        }
                        for i in 0..s.rows() {
                            da.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    self.accum(&mut grads, *a, &da);
                }
                Node::Gelu(a) => {
                    let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        g.get(i, j) * gelu_grad_scalar(self.vals[*a].get(i, j))
                    });
                    self.accum(&mut grads, *a, &da);
                }
                Node::LayerNormCols { src, eps } => {
                    let x = &self.vals[*src];
                    let xhat = &self.vals[idx];
                    let n = x.rows() as f64;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for j in 0..x.cols() {
                        let mut mu = 0.0;
                        for i in 0..x.rows() {
                            mu += x.get(i, j);
                        }
                        mu /= n;
                        let mut var = 0.0;
                        for i in 0..x.rows() {
                            let d = x.get(i, j) - mu;
                            var += d * d;
                        }
                        var /= n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut gmean = 0.0;
                        let mut gxhat = 0.0;
                        for i in 0..x.rows() {
                            gmean += g.get(i, j);
                            gxhat += g.get(i, j) * xhat.get(i, j);
                        }
                        gmean /= n;
                        gxhat /= n;
                        for i in 0..x.rows() {
                            let v = inv * (g.get(i, j) - gmean - xhat.get(i, j) * gxhat);
                            da.set(i, j, v);
                        }
                    }
                    self.accum(&mut grads, *src, &da);
                }
                Node::MulColBroadcast { vec, mat } => {
                    let v = &self.vals[*vec];
                    let m = &self.vals[*mat];
                    if self.needs_grad[*mat] {
                        let dm = Matrix::from_fn(m.rows(), m.cols(), |i, j| v.get(i, 0) * g.get(i, j));
                        self.accum(&mut grads, *mat, &dm);
                    }
                    if self.needs_grad[*vec] {
                        let dv = Matrix::from_fn(v.rows(), 1, |i, _| {
                            (0..m.cols()).map(|j| g.get(i, j) * m.get(i, j)).sum()
                        });
                        self.accum(&mut grads, *vec, &dv);
                    }
                }
                Node::AddColBroadcast { vec, mat } => {
                    if self.needs_grad[*mat] {
                        self.accum(&mut grads, *mat, &g);
                    }
                    if self.needs_grad[*vec] {
                        let dv = Matrix::from_fn(self.vals[*vec].rows(), 1, |i, _| {
                            (0..g.cols()).map(|j| g.get(i, j)).sum()
                        });
                        self.accum(&mut grads, *vec, &dv);
                    }
                }
                Node::SumAll(a) => {
                    let s = g.get(0, 0);
                    let src = &self.vals[*a];
                    let da = Matrix::filled(src.rows(), src.cols(), s);
                    self.accum(&mut grads, *a, &da);
                }
                Node::MeanAll(a) => {
                    let src = &self.vals[*a];
                    let s = g.get(0, 0) / (src.rows() * src.cols()) as f64;
                    let da = Matrix::filled(src.rows(), src.cols(), s);
                    self.accum(&mut grads, *a, &da);
                }
                Node::Slice { src, r0, c0 } => {
                    let s = &self.vals[*src];
                    let mut da = Matrix::zeros(s.rows(), s.cols());
                    da.set_block(*r0, *c0, &g);
                    self.accum(&mut grads, *src, &da);
                }
                Node::Pad { src, r0, c0 } => {
                    let s = &self.vals[*src];
                    let da = g.block(*r0, *c0, s.rows(), s.cols());
                    self.accum(&mut grads, *src, &da);
                }
                Node::Clip { src, lo, hi } => {
                    let x = &self.vals[*src];
                    let da = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                        let v = x.get(i, j);
                        if v > *lo && v < *hi {
                            g.get(i, j)
                        } else {
                            0.0
                        }
                    });
                    self.accum(&mut grads, *src, &da);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Matrix>], target: usize, g: &Matrix) {
        if !self.needs_grad[target] {
            return;
        }
        match &mut grads[target] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    fn accum_scaled(&self, grads: &mut [Option<Matrix>], target: usize, c: f64, g: &Matrix) {
        if !self.needs_grad[target] {
            return;
        }
        match &mut grads[target] {
            Some(acc) => acc.add_scaled(c, g),
            slot => *slot = Some(g.scale(c)),
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf; zero matrix if the leaf never influenced the loss.
    pub fn wrt(&self, v: Var, tape: &Tape) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let val = tape.value(v);
                Matrix::zeros(val.rows(), val.cols())
            }
        }
    }
}

/// Evaluate a tape-expressible scalar loss and its gradient w.r.t. `params`.
pub fn value_and_grad<F>(f: F, params: &[Matrix]) -> Result<(f64, Vec<Matrix>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.input(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let lval = tape.scalar_value(loss);
    if !lval.is_finite() {
        return Err(Error::NonFinite("loss in value_and_grad forward pass"));
    }
    let grads = tape.backward(loss)?;
    let out = vars.iter().map(|v| grads.wrt(*v, &tape)).collect();
    Ok((lval, out))
}

/// Evaluate the loss only (no gradients).
pub fn value_only<F>(f: F, params: &[Matrix]) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.scalar_value(loss))
}

/// Central-difference gradient estimate, the verification oracle for
/// [`value_and_grad`]. Evaluates `f` twice per coordinate.
pub fn finite_diff_grad<F>(f: F, params: &[Matrix], step: f64) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut out = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut g = Matrix::zeros(p.rows(), p.cols());
        for idx in 0..p.data().len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[idx] += step;
            let fp = value_only(&f, &plus)?;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[idx] -= step;
            let fm = value_only(&f, &minus)?;
            g.data_mut()[idx] = (fp - fm) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}
