//! Explicit attention-weight constructions: one-step GD, GD++ with input
//! preconditioning, the token-copy layer for alternating sequences, and
//! the kernel block (embedding + MLP feeding a GD layer).
//!
//! All factories are pure and return plain [`HeadWeights`] /
//! [`ModelParams`], so constructed "models" go through the exact same
//! forward code as trained ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    AttnKind, HeadWeights, LayerSpec, LayerWeights, MlpWeights, ModelConfig, ModelParams,
};
use crate::numerics::matrix::Matrix;
use crate::taskgen::{Layout, TokenSeq};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstructionKind {
    Gd,
    Gdpp,
    Copy,
    KernelBlock,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstructionSpec {
    pub eta: f64,
    /// input-transform strength; must be 0 for plain GD
    pub gamma: f64,
    /// initial linear model, ny x nx
    pub w0: Matrix,
    /// context-point count the (eta/N) scaling refers to
    pub n: usize,
    pub kind: ConstructionKind,
}

impl ConstructionSpec {
    pub fn gd(eta: f64, w0: Matrix, n: usize) -> Self {
        ConstructionSpec { eta, gamma: 0.0, w0, n, kind: ConstructionKind::Gd }
    }

    pub fn gdpp(eta: f64, gamma: f64, w0: Matrix, n: usize) -> Self {
        ConstructionSpec { eta, gamma, w0, n, kind: ConstructionKind::Gdpp }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParam("construction needs n >= 1".into()));
        }
        if self.kind == ConstructionKind::Gd && self.gamma != 0.0 {
            return Err(Error::InvalidParam("plain GD requires gamma = 0".into()));
        }
        Ok(())
    }

    fn nx(&self) -> usize {
        self.w0.cols()
    }

    fn ny(&self) -> usize {
        self.w0.rows()
    }
}

/// One-step-GD head for concat tokens (x_j, y_j) of dim nx+ny:
/// W_K = W_Q = [[I,0],[0,0]], W_V = [[0,0],[W_0,-I]], P = (eta/N) I.
/// One application changes token j by (0, -dW x_j) with
/// dW = -(eta/N) sum_i (W_0 x_i - y_i) x_i^T.
pub fn make_gd_weights(spec: &ConstructionSpec) -> Result<HeadWeights> {
    spec.validate()?;
    let (nx, ny) = (spec.nx(), spec.ny());
    let d = nx + ny;
    let mut w_k = Matrix::zeros(d, d);
    w_k.set_block(0, 0, &Matrix::identity(nx));
    let mut w_v = Matrix::zeros(d, d);
    w_v.set_block(nx, 0, &spec.w0);
    w_v.set_block(nx, nx, &Matrix::identity(ny).scale(-1.0));
    let p = Matrix::identity(d).scale(spec.eta / spec.n as f64);
    Ok(HeadWeights { w_q: w_k.clone(), w_k, w_v, p })
}

/// GD++ head: same K/Q, W_V = [[I,0],[W_0,-I]],
/// P = [[-gamma I, 0],[0, (eta/N) I]]. One application updates
/// (x_j, y_j) <- (x_j - gamma XX^T x_j, y_j - dW x_j) simultaneously.
pub fn make_gdpp_weights(spec: &ConstructionSpec) -> Result<HeadWeights> {
    spec.validate()?;
    let (nx, ny) = (spec.nx(), spec.ny());
    let d = nx + ny;
    let mut w_k = Matrix::zeros(d, d);
    w_k.set_block(0, 0, &Matrix::identity(nx));
    let mut w_v = Matrix::zeros(d, d);
    w_v.set_block(0, 0, &Matrix::identity(nx));
    w_v.set_block(nx, 0, &spec.w0);
    w_v.set_block(nx, nx, &Matrix::identity(ny).scale(-1.0));
    let mut p = Matrix::zeros(d, d);
    p.set_block(0, 0, &Matrix::identity(nx).scale(-spec.gamma));
    p.set_block(nx, nx, &Matrix::identity(ny).scale(spec.eta / spec.n as f64));
    Ok(HeadWeights { w_q: w_k.clone(), w_k, w_v, p })
}

/// For W_0 != 0 the query token must carry -W_0 x_q in its target slots
/// so the readout returns (W_0 + dW) x_q.
pub fn prepare_query_for_w0(seq: &mut TokenSeq, w0: &Matrix) -> Result<()> {
    if seq.layout != Layout::Concat {
        return Err(Error::BadLayout("prepare_query_for_w0 expects concat layout".into()));
    }
    let xq = Matrix::col_vec(
        &(0..seq.nx).map(|i| seq.tokens.get(i, seq.query_index)).collect::<Vec<_>>(),
    );
    let y0 = w0.matmul(&xq);
    for i in 0..seq.ny {
        seq.tokens.set(seq.nx + i, seq.query_index, -y0.get(i, 0));
    }
    Ok(())
}

/// Off-diagonal shift with S[i][i+1] = 1, so S e_{j+1} = e_j and
/// S^T e_j = e_{j+1} (zero past the last index).
fn shift_matrix(m: usize) -> Matrix {
    let mut s = Matrix::zeros(m, m);
    for i in 0..m - 1 {
        s.set(i, i + 1, 1.0);
    }
    s
}

/// Copy layer for Prop-3 alternating tokens (dim 2M, M = 2N+1):
/// P = I, W_V = [[0,0],[I, -S]], W_K = [[0,0],[0,I]], W_Q = [[0,0],[0,S^T]].
/// Token j attends exactly to token j+1 and replaces its positional slot
/// with that token's data slot; the last (query) token is left unchanged.
///
/// With `zero_odd_tokens` a second head is added that erases each odd
/// token's own content (value -e_j, selection diag over odd positions), so
/// the copied targets cannot leak into a subsequent GD layer's scores.
pub fn make_copy_weights(n: usize, zero_odd_tokens: bool) -> Vec<HeadWeights> {
    let m = 2 * n + 1;
    let d = 2 * m;
    let s = shift_matrix(m);
    let mut w_k = Matrix::zeros(d, d);
    w_k.set_block(m, m, &Matrix::identity(m));
    let mut w_q = Matrix::zeros(d, d);
    w_q.set_block(m, m, &s.transpose());
    let mut w_v = Matrix::zeros(d, d);
    w_v.set_block(m, 0, &Matrix::identity(m));
    w_v.set_block(m, m, &s.scale(-1.0));
    let mut heads = vec![HeadWeights { w_k: w_k.clone(), w_q, w_v, p: Matrix::identity(d) }];
    if zero_odd_tokens {
        let mut odd = Matrix::zeros(m, m);
        for j in (1..m).step_by(2) {
            odd.set(j, j, 1.0);
        }
        let mut w_q2 = Matrix::zeros(d, d);
        w_q2.set_block(m, m, &odd);
        heads.push(HeadWeights {
            w_k,
            w_q: w_q2,
            w_v: Matrix::identity(d).scale(-1.0),
            p: Matrix::identity(d),
        });
    }
    heads
}

/// GD layer sized for Prop-3 tokens: the full M-dim data slot acts as both
/// x and y block (W_0 = 0), with the (eta/N) scaling counting the N
/// underlying context pairs, not the 2N+1 tokens.
pub fn make_prop3_gd_head(n: usize, eta: f64) -> HeadWeights {
    let m = 2 * n + 1;
    let spec = ConstructionSpec::gd(eta, Matrix::zeros(m, m), n);
    make_gd_weights(&spec).expect("valid prop3 spec")
}

/// Kernel block: token embedding + MLP computing m(x) in the first
/// embed_dim - ny channels (target channels passed through untouched),
/// followed by a theta_GD attention layer in embedding space. Its
/// prediction is the kernel smoother sum_i y_i (eta/N) m(x_i).m(x_test),
/// i.e. one GD step from W_0 = 0 on the features m(x).
pub fn assemble_kernel_block(
    embed: Matrix,
    mlp: MlpWeights,
    spec: &ConstructionSpec,
    token_dim: usize,
    ny: usize,
) -> Result<(ModelConfig, ModelParams)> {
    spec.validate()?;
    if spec.kind != ConstructionKind::KernelBlock {
        return Err(Error::InvalidParam("assemble_kernel_block needs kind=kernel_block".into()));
    }
    let ed = embed.rows();
    if embed.cols() != token_dim || ed <= ny {
        return Err(Error::ShapeMismatch {
            op: "assemble_kernel_block embed",
            expected: format!("(>{ny}) x {token_dim}"),
            got: format!("{} x {}", ed, embed.cols()),
        });
    }
    // the y channels (last ny rows of the embedding space) must be an exact
    // passthrough of the token target slots, and m(x) must not read them
    for i in 0..ny {
        for j in 0..token_dim {
            let expected = if j == token_dim - ny + i { 1.0 } else { 0.0 };
            if embed.get(ed - ny + i, j) != expected {
                return Err(Error::InvalidParam(
                    "embedding must pass target slots through unchanged".into(),
                ));
            }
        }
    }
    for i in 0..ed - ny {
        for j in token_dim - ny..token_dim {
            if embed.get(i, j) != 0.0 {
                return Err(Error::InvalidParam(
                    "embedding feature channels must not read target slots".into(),
                ));
            }
        }
    }
    if mlp.w1.cols() != ed || mlp.w2.rows() != ed {
        return Err(Error::ShapeMismatch {
            op: "assemble_kernel_block mlp",
            expected: format!("hidden x {ed} / {ed} x hidden"),
            got: format!("{}x{} / {}x{}", mlp.w1.rows(), mlp.w1.cols(), mlp.w2.rows(), mlp.w2.cols()),
        });
    }
    for h in 0..mlp.w1.rows() {
        for j in ed - ny..ed {
            if mlp.w1.get(h, j) != 0.0 {
                return Err(Error::InvalidParam("mlp must not read target channels".into()));
            }
        }
    }
    for i in ed - ny..ed {
        for h in 0..mlp.w2.cols() {
            if mlp.w2.get(i, h) != 0.0 || mlp.b2.get(i, 0) != 0.0 {
                return Err(Error::InvalidParam("mlp must not write target channels".into()));
            }
        }
    }
    let nf = ed - ny; // feature channels carrying m(x)
    let mut w_k = Matrix::zeros(ed, ed);
    w_k.set_block(0, 0, &Matrix::identity(nf));
    let mut w_v = Matrix::zeros(ed, ed);
    w_v.set_block(nf, nf, &Matrix::identity(ny).scale(-1.0));
    let p = Matrix::identity(ed).scale(spec.eta / spec.n as f64);
    let gd_head = HeadWeights { w_q: w_k.clone(), w_k, w_v, p };

    let widening = mlp.w1.rows() / ed;
    let cfg = ModelConfig {
        token_dim,
        embed_dim: Some(ed),
        depth: 2,
        recurrent: false,
        layers: vec![
            LayerSpec { attn: None, heads: 0, mlp_widening: Some(widening.max(1)), layer_norm: false },
            LayerSpec::linear_attn(),
        ],
        clip_tokens: None,
        use_full_self_attn: true,
        init_std_scale: 1.0,
        fan_in_mlp_init: false,
    };
    let params = ModelParams {
        embed: Some(embed),
        layers: vec![
            LayerWeights { attn: None, heads: vec![], mlp: Some(mlp), ln_attn: None, ln_mlp: None },
            LayerWeights {
                attn: Some(AttnKind::Linear),
                heads: vec![gd_head],
                mlp: None,
                ln_attn: None,
                ln_mlp: None,
            },
        ],
    };
    Ok((cfg, params))
}

/// Apply the rescaling degeneracy: scale the product P W_V by s and
/// W_K^T W_Q by 1/s without changing the layer's function.
pub fn rescale_head(head: &HeadWeights, s: f64) -> HeadWeights {
    HeadWeights {
        w_k: head.w_k.clone(),
        w_q: head.w_q.scale(1.0 / s),
        w_v: head.w_v.scale(s),
        p: head.p.clone(),
    }
}

/// Full model wrapper around K stacked theta_GD (or GD++) layers.
pub fn gd_model(spec: &ConstructionSpec, layers: usize, use_full: bool) -> Result<(ModelConfig, ModelParams)> {
    let head = match spec.kind {
        ConstructionKind::Gd => make_gd_weights(spec)?,
        ConstructionKind::Gdpp => make_gdpp_weights(spec)?,
        _ => return Err(Error::InvalidParam("gd_model supports gd/gdpp only".into())),
    };
    let d = spec.nx() + spec.ny();
    let cfg = ModelConfig {
        token_dim: d,
        embed_dim: None,
        depth: layers,
        recurrent: true,
        layers: vec![LayerSpec::linear_attn()],
        clip_tokens: None,
        use_full_self_attn: use_full,
        init_std_scale: 1.0,
        fan_in_mlp_init: false,
    };
    let params = ModelParams {
        embed: None,
        layers: vec![LayerWeights {
            attn: Some(AttnKind::Linear),
            heads: vec![head],
            mlp: None,
            ln_attn: None,
            ln_mlp: None,
        }],
    };
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lsa_forward;
    use crate::numerics::rng::{Seed, SeedStream};
    use crate::taskgen::{build_tokens_alternating, build_tokens_concat, sample_linear_task, AltMode, OodSpec};

    #[test]
    fn zero_eta_layer_is_identity() {
        let spec = ConstructionSpec::gd(0.0, Matrix::zeros(1, 3), 5);
        let head = make_gd_weights(&spec).unwrap();
        let mut s = SeedStream::new(Seed(1));
        let t = sample_linear_task(&mut s, 5, 3, 1, &OodSpec::default());
        let seq = build_tokens_concat(&t);
        let out = lsa_forward(&[head], &seq.tokens, seq.query_index, true).unwrap();
        assert_eq!(out, seq.tokens);
    }

    #[test]
    fn gd_requires_zero_gamma() {
        let bad = ConstructionSpec { gamma: 0.1, ..ConstructionSpec::gd(1.0, Matrix::zeros(1, 2), 3) };
        assert!(make_gd_weights(&bad).is_err());
    }

    #[test]
    fn gdpp_gamma_zero_equals_gd_update() {
        // with gamma=0 the two constructions differ only in W_V's inert
        // top-left block (P zeroes the x rows), so the layer output matches
        let gd = ConstructionSpec::gd(0.7, Matrix::zeros(2, 4), 6);
        let pp = ConstructionSpec::gdpp(0.7, 0.0, Matrix::zeros(2, 4), 6);
        let hg = make_gd_weights(&gd).unwrap();
        let hp = make_gdpp_weights(&pp).unwrap();
        let mut s = SeedStream::new(Seed(2));
        let t = sample_linear_task(&mut s, 6, 4, 2, &OodSpec::default());
        let seq = build_tokens_concat(&t);
        let a = lsa_forward(&[hg], &seq.tokens, seq.query_index, true).unwrap();
        let b = lsa_forward(&[hp], &seq.tokens, seq.query_index, true).unwrap();
        assert!(a.sub(&b).max_abs() < 1e-14);
    }

    #[test]
    fn gdpp_input_slots_transform() {
        // after one masked layer, context x-slots equal (I - gamma XX^T) x_j
        let gamma = 0.13;
        let spec = ConstructionSpec::gdpp(0.5, gamma, Matrix::zeros(1, 3), 4);
        let head = make_gdpp_weights(&spec).unwrap();
        let mut s = SeedStream::new(Seed(3));
        let t = sample_linear_task(&mut s, 4, 3, 1, &OodSpec::default());
        let seq = build_tokens_concat(&t);
        let out = lsa_forward(&[head], &seq.tokens, seq.query_index, false).unwrap();
        let xxt = t.inputs.matmul(&t.inputs.transpose());
        let h = Matrix::identity(3).sub(&xxt.scale(gamma));
        let expected = h.matmul(&t.inputs);
        for j in 0..4 {
            for i in 0..3 {
                assert!((out.get(i, j) - expected.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn copy_layer_moves_targets_into_positional_slots() {
        let n = 2;
        let mut s = SeedStream::new(Seed(4));
        let t = sample_linear_task(&mut s, n, 3, 1, &OodSpec::default());
        let seq = build_tokens_alternating(&t, 1, AltMode::Prop3).unwrap();
        let heads = make_copy_weights(n, false);
        let out = lsa_forward(&heads, &seq.tokens, seq.query_index, true).unwrap();
        let m = 2 * n + 1;
        // every token j < 2n now carries x-tilde_{j+1} in its bottom slot
        for j in 0..2 * n {
            for i in 0..m {
                assert!(
                    (out.get(m + i, j) - seq.tokens.get(i, j + 1)).abs() < 1e-14,
                    "token {j} slot {i}"
                );
            }
        }
        // the query keeps its own encoding
        for i in 0..m {
            assert_eq!(out.get(m + i, 2 * n), seq.tokens.get(m + i, 2 * n));
        }
    }

    #[test]
    fn copy_layer_zero_targets_zero_slots() {
        // token 0's positional slot is replaced by token 1's data slot,
        // which is the (zero) target
        let n = 2;
        let mut s = SeedStream::new(Seed(5));
        let t = sample_linear_task(&mut s, n, 3, 1, &OodSpec::teacher_scale(0.0));
        let seq = build_tokens_alternating(&t, 1, AltMode::Prop3).unwrap();
        let heads = make_copy_weights(n, false);
        let out = lsa_forward(&heads, &seq.tokens, seq.query_index, true).unwrap();
        let m = 2 * n + 1;
        for i in 0..m {
            assert!(out.get(m + i, 0).abs() < 1e-14);
        }
    }

    #[test]
    fn zeroing_head_clears_odd_data_slots() {
        let n = 3;
        let mut s = SeedStream::new(Seed(6));
        let t = sample_linear_task(&mut s, n, 4, 1, &OodSpec::default());
        let seq = build_tokens_alternating(&t, 1, AltMode::Prop3).unwrap();
        let heads = make_copy_weights(n, true);
        let out = lsa_forward(&heads, &seq.tokens, seq.query_index, true).unwrap();
        let m = 2 * n + 1;
        for j in (1..2 * n).step_by(2) {
            for i in 0..m {
                assert!(out.get(i, j).abs() < 1e-14, "odd token {j} row {i} not cleared");
            }
        }
        // even tokens keep their data slot
        for j in (0..2 * n).step_by(2) {
            for i in 0..m {
                assert_eq!(out.get(i, j), seq.tokens.get(i, j));
            }
        }
    }

    #[test]
    fn rescale_preserves_function() {
        let spec = ConstructionSpec::gd(0.9, Matrix::zeros(1, 4), 5);
        let head = make_gd_weights(&spec).unwrap();
        let mut s = SeedStream::new(Seed(7));
        let t = sample_linear_task(&mut s, 5, 4, 1, &OodSpec::default());
        let seq = build_tokens_concat(&t);
        let base = lsa_forward(&[head.clone()], &seq.tokens, seq.query_index, true).unwrap();
        for sc in [0.1, 3.0, 10.0] {
            let r = rescale_head(&head, sc);
            let out = lsa_forward(&[r], &seq.tokens, seq.query_index, true).unwrap();
            assert!(base.sub(&out).max_abs() < 1e-12, "scale {sc}");
        }
    }

    #[test]
    fn kernel_block_rejects_target_mixing() {
        let token_dim = 3; // nx=2, ny=1
        let ed = 5;
        let mut embed = Matrix::zeros(ed, token_dim);
        embed.set(0, 0, 1.0);
        embed.set(1, 1, 1.0);
        embed.set(ed - 1, token_dim - 1, 1.0);
        let good_mlp = MlpWeights {
            w1: Matrix::zeros(10, ed),
            b1: Matrix::zeros(10, 1),
            w2: Matrix::zeros(ed, 10),
            b2: Matrix::zeros(ed, 1),
        };
        let spec = ConstructionSpec {
            eta: 1.0,
            gamma: 0.0,
            w0: Matrix::zeros(1, 2),
            n: 4,
            kind: ConstructionKind::KernelBlock,
        };
        assert!(assemble_kernel_block(embed.clone(), good_mlp.clone(), &spec, token_dim, 1).is_ok());
        let mut bad = good_mlp.clone();
        bad.w2.set(ed - 1, 0, 0.5); // writes the target channel
        assert!(assemble_kernel_block(embed.clone(), bad, &spec, token_dim, 1).is_err());
        let mut bad2 = good_mlp;
        bad2.w1.set(0, ed - 1, 0.5); // reads the target channel
        assert!(assemble_kernel_block(embed, bad2, &spec, token_dim, 1).is_err());
    }
}
