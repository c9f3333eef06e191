//! Randomized property suite: autodiff gradient checks, degeneracies of
//! linear self-attention, and determinism of every seeded pipeline.
//! Runs without any training and finishes in well under a minute.

use proptest::prelude::*;

use icl_core::analysis::Predictor;
use icl_core::constructions::rescale_head;
use icl_core::model::{
    lsa_forward, transformer_forward, HeadWeights, ModelConfig, ModelParams,
};
use icl_core::numerics::adam::clip_global_norm;
use icl_core::numerics::matrix::{self, Matrix};
use icl_core::numerics::rng::{Seed, SeedStream};
use icl_core::numerics::tape::{finite_diff_grad, value_and_grad, Tape, Var};
use icl_core::training::TaskSpec;
use icl_core::Result;

fn random_matrix(stream: &mut SeedStream, rows: usize, cols: usize) -> Matrix {
    stream.standard_normal(rows, cols)
}

fn max_rel_err(a: &[Matrix], b: &[Matrix]) -> f64 {
    // floor the denominator at a fraction of the gradient scale so that
    // near-zero entries are judged against finite-difference roundoff
    let scale = a
        .iter()
        .chain(b)
        .map(|m| m.max_abs())
        .fold(1e-6_f64, f64::max);
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.data().iter().zip(y.data()) {
            let denom = u.abs().max(v.abs()).max(1e-4 * scale);
            worst = worst.max((u - v).abs() / denom);
        }
    }
    worst
}

/// Shallow per-operation losses: one finite-difference check per node
/// kind, keeping the truncation error of central differences small.
fn op_losses() -> Vec<(&'static str, fn(&mut Tape, &[Var]) -> Result<Var>)> {
    vec![
        ("matmul", |t, v| {
            let p = t.matmul(v[0], v[1]);
            let s = t.square(p);
            Ok(t.sum_all(s))
        }),
        ("transpose_neg", |t, v| {
            let tr = t.transpose(v[0]);
            let n = t.neg(tr);
            let s = t.square(n);
            Ok(t.mean_all(s))
        }),
        ("add_sub_scale", |t, v| {
            let b = t.transpose(v[1]); // 3x5
            let sl = t.slice(b, 0, 0, 3, 5);
            let a = t.slice(v[0], 1, 0, 3, 5);
            let sum = t.add(a, sl);
            let sc = t.scale(sum, 1.7);
            let d = t.sub(sc, a);
            let s = t.square(d);
            Ok(t.sum_all(s))
        }),
        ("hadamard", |t, v| {
            let h = t.hadamard(v[0], v[0]);
            Ok(t.sum_all(h))
        }),
        ("softmax_cols", |t, v| {
            let sm = t.softmax_cols(v[0]);
            let s = t.square(sm);
            Ok(t.sum_all(s))
        }),
        ("gelu", |t, v| {
            let g = t.gelu(v[0]);
            Ok(t.mean_all(g))
        }),
        ("layer_norm_cols", |t, v| {
            // sum of squares of a normalized column is constant, so read
            // out through gelu to keep the gradient non-degenerate
            let ln = t.layer_norm_cols(v[0], 1e-6);
            let g = t.gelu(ln);
            Ok(t.mean_all(g))
        }),
        ("col_broadcasts", |t, v| {
            let m = t.mul_col_broadcast(v[2], v[0]);
            let a = t.add_col_broadcast(v[2], m);
            let s = t.square(a);
            Ok(t.sum_all(s))
        }),
        ("slice_pad", |t, v| {
            let sl = t.slice(v[0], 1, 1, 2, 3);
            let p = t.pad(sl, 0, 1, 4, 5);
            let s = t.square(p);
            Ok(t.sum_all(s))
        }),
        // bounds wide enough that no input sits near a clip kink
        ("clip_smooth_region", |t, v| {
            let c = t.clip(v[0], -40.0, 40.0);
            let s = t.square(c);
            Ok(t.sum_all(s))
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn gradients_match_finite_differences(seed in 0u64..10_000) {
        let mut s = SeedStream::new(Seed(seed));
        let params = vec![
            random_matrix(&mut s, 4, 5),
            random_matrix(&mut s, 5, 3),
            random_matrix(&mut s, 4, 1),
        ];
        for (name, f) in op_losses() {
            let (_, grads) = value_and_grad(f, &params).unwrap();
            let fd = finite_diff_grad(f, &params, 1e-5).unwrap();
            let err = max_rel_err(&grads, &fd);
            prop_assert!(err < 1e-5, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn rescaling_products_leaves_lsa_output_unchanged(seed in 0u64..10_000) {
        let mut s = SeedStream::new(Seed(seed));
        let d = 6;
        // modest weight scale keeps the absolute 1e-12 bound meaningful
        let head = HeadWeights {
            w_k: random_matrix(&mut s, d, d).scale(0.4),
            w_q: random_matrix(&mut s, d, d).scale(0.4),
            w_v: random_matrix(&mut s, d, d).scale(0.4),
            p: random_matrix(&mut s, d, d).scale(0.4),
        };
        let tokens = random_matrix(&mut s, d, 8);
        let base = lsa_forward(&[head.clone()], &tokens, 7, true).unwrap();
        for scale in [0.1, 3.0, 10.0] {
            let rescaled = rescale_head(&head, scale);
            let out = lsa_forward(&[rescaled], &tokens, 7, true).unwrap();
            let dev = base.sub(&out).max_abs();
            prop_assert!(dev < 1e-12, "s={scale}: deviation {dev}");
        }
    }

    #[test]
    fn context_permutation_leaves_prediction_unchanged(
        seed in 0u64..10_000,
        shuffle_seed in 0u64..10_000,
    ) {
        let spec = TaskSpec::default_linear();
        let cfg = ModelConfig::deep_lsa(spec.token_dim(), 2, false);
        let mut ps = SeedStream::new(Seed(seed));
        let params = ModelParams::init(&cfg, &mut ps).unwrap();
        let mut ts = SeedStream::new(Seed(seed ^ 0x9e37));
        let task = spec.sample(&mut ts);
        let seq = spec.tokens(&task).unwrap();
        let base = transformer_forward(&cfg, &params, &seq).unwrap().prediction;

        let mut perm: Vec<usize> = (0..task.n()).collect();
        let mut shuf = SeedStream::new(Seed(shuffle_seed));
        // Fisher-Yates over context positions; query stays last
        for i in (1..perm.len()).rev() {
            let j = (shuf.uniform_scalar(0.0, (i + 1) as f64).floor() as usize).min(i);
            perm.swap(i, j);
        }
        let mut shuffled = seq.clone();
        for (new_col, &old_col) in perm.iter().enumerate() {
            shuffled.tokens.set_col(new_col, &seq.tokens.col(old_col));
        }
        let out = transformer_forward(&cfg, &params, &shuffled).unwrap().prediction;
        for (a, b) in base.iter().zip(&out) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn linear_sa_sensitivity_is_query_independent(seed in 0u64..10_000) {
        let spec = TaskSpec::default_linear();
        let cfg = ModelConfig::deep_lsa(spec.token_dim(), 2, false);
        let mut ps = SeedStream::new(Seed(seed));
        let params = ModelParams::init(&cfg, &mut ps).unwrap();
        let pred = Predictor::Transformer { cfg: &cfg, params: &params, spec: &spec };
        let mut ts = SeedStream::new(Seed(seed ^ 0xabcd));
        let base_task = spec.sample(&mut ts);
        let reference = pred.sensitivity(&base_task).unwrap();
        for _ in 0..4 {
            let mut t = base_task.clone();
            for v in t.query_input.iter_mut() {
                *v = ts.uniform_scalar(-1.0, 1.0);
            }
            let jac = pred.sensitivity(&t).unwrap();
            let dev = reference.sub(&jac).max_abs();
            prop_assert!(dev < 1e-9, "Jacobian moved by {dev} across queries");
        }
    }

    #[test]
    fn seeded_pipelines_are_bit_deterministic(seed in 0u64..10_000) {
        let spec = TaskSpec::default_linear();
        let run = || -> (Vec<f64>, Vec<f64>) {
            let mut s = SeedStream::new(Seed(seed));
            let task = spec.sample(&mut s);
            let cfg = ModelConfig::single_lsa(spec.token_dim());
            let mut ps = SeedStream::new(Seed(seed));
            let params = ModelParams::init(&cfg, &mut ps).unwrap();
            let seq = spec.tokens(&task).unwrap();
            let pred = transformer_forward(&cfg, &params, &seq).unwrap().prediction;
            let flat: Vec<f64> = params
                .flatten()
                .iter()
                .flat_map(|m| m.data().to_vec())
                .collect();
            (pred, flat)
        };
        let (p1, f1) = run();
        let (p2, f2) = run();
        prop_assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(f1.iter().zip(&f2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn clip_global_norm_is_idempotent(seed in 0u64..10_000, max_norm in 0.5f64..20.0) {
        let mut s = SeedStream::new(Seed(seed));
        let mut grads = vec![random_matrix(&mut s, 5, 5), random_matrix(&mut s, 3, 7)];
        clip_global_norm(&mut grads, max_norm);
        let once: Vec<Vec<f64>> = grads.iter().map(|m| m.data().to_vec()).collect();
        clip_global_norm(&mut grads, max_norm);
        for (m, expect) in grads.iter().zip(&once) {
            prop_assert!(m.data().iter().zip(expect).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        prop_assert!(matrix::global_norm(&grads) <= max_norm * (1.0 + 1e-9));
    }

    #[test]
    fn zero_weight_layer_is_identity_on_sequence(seed in 0u64..10_000) {
        let d = 7;
        let zero = HeadWeights {
            w_k: Matrix::zeros(d, d),
            w_q: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            p: Matrix::zeros(d, d),
        };
        let mut s = SeedStream::new(Seed(seed));
        let tokens = random_matrix(&mut s, d, 5);
        let out = lsa_forward(&[zero], &tokens, 4, true).unwrap();
        prop_assert!(out.sub(&tokens).max_abs() == 0.0);
    }
}

#[test]
fn softmax_attention_also_query_linear_fails_gracefully() {
    // softmax models are not linear in the query; the sensitivity probe
    // still returns a finite Jacobian
    let spec = TaskSpec::default_linear();
    let cfg = ModelConfig {
        layers: vec![icl_core::model::LayerSpec::softmax_attn(1)],
        ..ModelConfig::single_lsa(spec.token_dim())
    };
    let mut ps = SeedStream::new(Seed(5));
    let params = ModelParams::init(&cfg, &mut ps).unwrap();
    let pred = Predictor::Transformer { cfg: &cfg, params: &params, spec: &spec };
    let mut ts = SeedStream::new(Seed(6));
    let task = spec.sample(&mut ts);
    let jac = pred.sensitivity(&task).unwrap();
    assert!(jac.all_finite());
    assert_eq!(jac.shape(), (spec.ny, spec.nx));
}

#[test]
fn matmul_associativity_within_tolerance() {
    let mut s = SeedStream::new(Seed(11));
    for _ in 0..20 {
        let a = s.standard_normal(10, 10);
        let b = s.standard_normal(10, 10);
        let c = s.standard_normal(10, 10);
        let left = a.matmul(&b).matmul(&c);
        let right = a.matmul(&b.matmul(&c));
        let bound = 1e-10 * a.frob_norm() * b.frob_norm() * c.frob_norm();
        assert!(left.sub(&right).frob_norm() < bound);
    }
}
