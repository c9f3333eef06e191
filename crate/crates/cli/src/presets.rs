//! Named experiment configurations. Each preset resolves to a full
//! `TrainConfig`; the README's cookbook maps every preset to the commands
//! that reproduce the corresponding figure or appendix experiment.

use icl_core::model::{LayerSpec, ModelConfig};
use icl_core::numerics::rng::Seed;
use icl_core::training::{TaskSpec, TrainConfig};

pub const PRESET_NAMES: &[&str] = &[
    "fig2-single-lsa",
    "fig3a-recurrent2",
    "fig3b-deep5",
    "fig4-sine",
    "fig5-copy",
    "app-softmax-2head",
    "app-layernorm",
    "app-rollout",
    "app-cycling-128",
    "app-cycling-512",
    "app-cycling-2048",
    "app-cycling-8192",
    "app-grokking",
];

/// Resolve a preset name. Budgets are sized for a single desktop core;
/// every field can still be overridden on the command line.
pub fn resolve(name: &str, seed: Seed) -> Option<TrainConfig> {
    let task = TaskSpec::default_linear();
    let cfg = match name {
        "fig2-single-lsa" | "app-rollout" => {
            // masked attention: single-step behaviour is unchanged, and the
            // rollout only tracks GD when the query stays out of keys/values
            let model = ModelConfig {
                use_full_self_attn: false,
                ..ModelConfig::single_lsa(task.token_dim())
            };
            TrainConfig {
                batch_size: 2048,
                steps: 2000,
                eval_every: 200,
                eval_tasks: 2000,
                ..TrainConfig::defaults(model, task, seed)
            }
        }
        "fig3a-recurrent2" => {
            let model = ModelConfig::deep_lsa(task.token_dim(), 2, true);
            TrainConfig {
                batch_size: 1024,
                steps: 4000,
                eval_every: 200,
                eval_tasks: 2000,
                ..TrainConfig::defaults(model, task, seed)
            }
        }
        "fig3b-deep5" => {
            let model = ModelConfig::deep_lsa(task.token_dim(), 5, false);
            TrainConfig {
                batch_size: 512,
                steps: 6000,
                eval_every: 200,
                eval_tasks: 2000,
                ..TrainConfig::defaults(model, task, seed)
            }
        }
        "fig4-sine" => {
            let task = TaskSpec::sine(10);
            let model = sine_model(task.token_dim());
            TrainConfig {
                batch_size: 512,
                steps: 8000,
                eval_every: 400,
                eval_tasks: 2000,
                ..TrainConfig::defaults(model, task, seed)
            }
        }
        // the copy construction needs the well-conditioned regime (N > N_x)
        // to sit clearly between one- and two-step GD
        "fig5-copy" => TrainConfig {
            batch_size: 256,
            steps: 9000,
            eval_every: 500,
            eval_tasks: 1000,
            ..TrainConfig::copy_experiment(16, 4, seed)
        },
        "app-softmax-2head" => {
            // 10x init scale: the default leaves softmax attention stuck
            // near the uniform-attention saddle
            let model = ModelConfig {
                layers: vec![LayerSpec::softmax_attn(2)],
                init_std_scale: 10.0,
                ..ModelConfig::single_lsa(task.token_dim())
            };
            TrainConfig {
                batch_size: 1024,
                steps: 5000,
                lr: 5e-3,
                eval_every: 200,
                eval_tasks: 2000,
                ..TrainConfig::defaults(model, task, seed)
            }
        }
        "app-layernorm" => {
            let model = ModelConfig {
                layers: vec![LayerSpec { layer_norm: true, ..LayerSpec::linear_attn() }],
                ..ModelConfig::single_lsa(task.token_dim())
            };
            TrainConfig {
                batch_size: 1024,
                steps: 6000,
                eval_every: 200,
                eval_tasks: 2000,
                ..TrainConfig::defaults(model, task, seed)
            }
        }
        name if name.starts_with("app-cycling-") => {
            let b: usize = name.trim_start_matches("app-cycling-").parse().ok()?;
            let model = ModelConfig::single_lsa(task.token_dim());
            TrainConfig {
                batch_size: 512.min(b),
                steps: 4000,
                fixed_pool: Some(b),
                eval_every: 200,
                eval_tasks: 2000,
                ..TrainConfig::defaults(model, task, seed)
            }
        }
        "app-grokking" => {
            // full Transformer block on a fixed pool: slow convergence with a
            // late drop toward the GD loss
            let model = ModelConfig {
                layers: vec![LayerSpec {
                    attn: Some(icl_core::model::AttnKind::Softmax),
                    heads: 2,
                    mlp_widening: Some(4),
                    layer_norm: true,
                }],
                fan_in_mlp_init: true,
                ..ModelConfig::single_lsa(task.token_dim())
            };
            TrainConfig {
                batch_size: 512,
                steps: 20_000,
                fixed_pool: Some(8192),
                eval_every: 500,
                eval_tasks: 2000,
                ..TrainConfig::defaults(model, task, seed)
            }
        }
        _ => return None,
    };
    Some(cfg)
}

/// The sine-task model: embedding, one MLP layer, one LSA layer.
pub fn sine_model(token_dim: usize) -> ModelConfig {
    ModelConfig {
        token_dim,
        embed_dim: Some(40),
        depth: 2,
        recurrent: false,
        layers: vec![
            LayerSpec { attn: None, heads: 0, mlp_widening: Some(4), layer_norm: false },
            LayerSpec::linear_attn(),
        ],
        clip_tokens: None,
        use_full_self_attn: true,
        init_std_scale: 1.0,
        fan_in_mlp_init: true,
    }
}
