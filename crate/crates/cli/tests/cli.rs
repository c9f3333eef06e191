//! End-to-end checks of the `icl` binary: exit codes, run-directory
//! layout, and bit-exact reruns from a resolved config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icl_core::model::ModelConfig;
use icl_core::numerics::rng::Seed;
use icl_core::training::{TaskSpec, TrainConfig};

fn icl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl"))
        .env("ICL_OUTPUT_ROOT", root)
        .args(args)
        .output()
        .expect("spawn icl")
}

/// The run directory echoed on stdout as `outputs: <path>`.
fn run_dir(out: &Output) -> PathBuf {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text
        .lines()
        .find(|l| l.starts_with("outputs: "))
        .unwrap_or_else(|| panic!("no outputs line in {text:?}"));
    PathBuf::from(line.trim_start_matches("outputs: "))
}

fn tiny_config() -> TrainConfig {
    let task = TaskSpec::default_linear();
    let model = ModelConfig::single_lsa(task.token_dim());
    TrainConfig {
        batch_size: 8,
        steps: 5,
        eval_every: 5,
        eval_tasks: 20,
        ..TrainConfig::defaults(model, task, Seed(42))
    }
}

#[test]
fn train_is_deterministic_and_rerunnable_from_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&tiny_config()).unwrap()).unwrap();

    let a = icl(tmp.path(), &["train", "--config", cfg_path.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let dir_a = run_dir(&a);
    assert!(dir_a.join("trace.csv").is_file());
    assert!(dir_a.join("checkpoint/manifest.json").is_file());

    // rerun from the resolved config written by the first run
    let resolved = dir_a.join("resolved-config.json");
    let b = icl(tmp.path(), &["train", "--config", resolved.to_str().unwrap()]);
    assert!(b.status.success());
    let dir_b = run_dir(&b);
    assert_ne!(dir_a, dir_b);
    let trace_a = std::fs::read(dir_a.join("trace.csv")).unwrap();
    let trace_b = std::fs::read(dir_b.join("trace.csv")).unwrap();
    assert_eq!(trace_a, trace_b, "reruns must be bit-exact");
}

#[test]
fn missing_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = icl(tmp.path(), &["train", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = icl(tmp.path(), &["train", "--preset", "no-such-preset"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn construct_gdpp_gamma_zero_predicts_like_gd() {
    let tmp = tempfile::tempdir().unwrap();
    let a = icl(tmp.path(), &["construct", "gd", "--eta", "0.7"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = icl(tmp.path(), &["construct", "gdpp", "--eta", "0.7", "--gamma", "0"]);
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));

    let (cfg_a, p_a, _) =
        icl_core::checkpoint::load_checkpoint(&run_dir(&a).join("checkpoint")).unwrap();
    let (cfg_b, p_b, _) =
        icl_core::checkpoint::load_checkpoint(&run_dir(&b).join("checkpoint")).unwrap();
    let task = TaskSpec::default_linear();
    let mut stream = icl_core::SeedStream::new(Seed(9));
    for _ in 0..20 {
        let t = task.sample(&mut stream);
        let seq = task.tokens(&t).unwrap();
        let fa = icl_core::model::transformer_forward(&cfg_a, &p_a, &seq).unwrap();
        let fb = icl_core::model::transformer_forward(&cfg_b, &p_b, &seq).unwrap();
        for (x, y) in fa.prediction.iter().zip(fb.prediction.iter()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn analyze_spectrum_matches_library_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = icl(
        tmp.path(),
        &["analyze", "spectrum", "--gamma", "0.1", "--n", "25", "--tasks", "200"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir(&out).join("spectrum.json")).unwrap())
            .unwrap();
    let range = &doc["eigen_range"];
    let lo = range["lambda_min"].as_f64().unwrap();
    let hi = range["lambda_max"].as_f64().unwrap();
    let expected = icl_core::baselines::gdpp_spectrum(0.1, &[lo, hi]).unwrap();
    let got = doc["report"]["condition_after_formula"].as_f64().unwrap();
    assert!((got - expected.condition_after_formula).abs() < 1e-12);
}

#[test]
fn analyze_on_constructed_checkpoint_aligns_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let c = icl(tmp.path(), &["construct", "gd", "--eta", "1.0"]);
    assert!(c.status.success());
    let ckpt = run_dir(&c).join("checkpoint");
    let out = icl(
        tmp.path(),
        &[
            "analyze",
            "align",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--eta",
            "1.0",
            "--tasks",
            "50",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir(&out).join("align.json")).unwrap())
            .unwrap();
    assert!(doc["pred_l2"].as_f64().unwrap() < 1e-10);
    assert!(doc["model_cos"].as_f64().unwrap() > 1.0 - 1e-10);
}
