//! Explicit gradient-descent learners: plain GD, GD++ (input
//! preconditioning), multi-step schedules with optional dampening,
//! learning-rate/gamma tuning, kernel smoothing, and the GD++ eigenvalue
//! analysis.
//!
//! Conventions: the in-context loss is L(W) = 1/(2N) sum_i ||W x_i - y_i||^2,
//! so one step is W <- W - (eta/N) sum_i (W x_i - y_i) x_i^T. W_0 = 0
//! everywhere unless a caller overrides it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::matrix::{sym_eigenvalues, Matrix};
use crate::numerics::rng::{Seed, SeedStream};
use crate::taskgen::{sample_linear_task, OodSpec, Task};

pub const EIGEN_FLOOR: f64 = 1e-10;

/// Per-step hyperparameters of a K-step (dampened) GD/GD++ schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GdHyper {
    pub etas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub lambda_damp: f64,
    pub w0: Matrix,
    pub order: GdppOrder,
}

/// Where the input transform sits relative to the weight update inside one
/// GD++ step. `Simultaneous` matches the single-attention-layer
/// construction (both computed from the same state); `TransformFirst`
/// preconditions the data before the step and is what hyperparameter
/// tuning uses.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GdppOrder {
    Simultaneous,
    TransformFirst,
}

impl GdHyper {
    pub fn single(eta: f64, w0: Matrix) -> Self {
        GdHyper {
            etas: vec![eta],
            gammas: vec![0.0],
            lambda_damp: 1.0,
            w0,
            order: GdppOrder::Simultaneous,
        }
    }

    pub fn shared(eta: f64, gamma: f64, steps: usize, w0: Matrix, order: GdppOrder) -> Self {
        GdHyper {
            etas: vec![eta; steps],
            gammas: vec![gamma; steps],
            lambda_damp: 1.0,
            w0,
            order,
        }
    }

    pub fn steps(&self) -> usize {
        self.etas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.etas.is_empty() || self.etas.len() != self.gammas.len() {
            return Err(Error::InvalidParam(format!(
                "need matching non-empty eta/gamma lists, got {}/{}",
                self.etas.len(),
                self.gammas.len()
            )));
        }
        if !(self.lambda_damp > 0.0 && self.lambda_damp <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "lambda_damp must be in (0,1], got {}",
                self.lambda_damp
            )));
        }
        Ok(())
    }
}

/// One GD step on the context points; the query pair is never touched.
pub fn gd_step(w: &Matrix, inputs: &Matrix, targets: &Matrix, eta: f64) -> Matrix {
    let n = inputs.cols() as f64;
    let resid = w.matmul(inputs).sub(targets);
    let grad = resid.matmul(&inputs.transpose());
    let mut out = w.clone();
    out.add_scaled(-eta / n, &grad);
    out
}

/// In-context loss L(W) = 1/(2N) sum ||W x_i - y_i||^2.
pub fn context_loss(w: &Matrix, inputs: &Matrix, targets: &Matrix) -> f64 {
    let resid = w.matmul(inputs).sub(targets);
    resid.data().iter().map(|r| r * r).sum::<f64>() / (2.0 * inputs.cols() as f64)
}

/// The GD++ preconditioner H(X) = I - gamma X X^T.
pub fn input_transform(inputs: &Matrix, gamma: f64) -> Matrix {
    let mut h = Matrix::identity(inputs.rows());
    let xxt = inputs.matmul(&inputs.transpose());
    h.add_scaled(-gamma, &xxt);
    h
}

/// Simultaneous GD++ step: W' from the current (X, Y), X' = H(X) X.
/// The caller transforms the query input with the same H(X).
pub fn gdpp_step(
    w: &Matrix,
    inputs: &Matrix,
    targets: &Matrix,
    eta: f64,
    gamma: f64,
) -> (Matrix, Matrix) {
    let w_next = gd_step(w, inputs, targets, eta);
    let x_next = input_transform(inputs, gamma).matmul(inputs);
    (w_next, x_next)
}

/// Trace of a multi-step run: per-step predictions and query losses.
#[derive(Clone, Debug)]
pub struct GdRun {
    /// prediction after each step (step k uses k+1 updates)
    pub preds: Vec<Vec<f64>>,
    /// squared query error after each step
    pub losses: Vec<f64>,
    pub final_w: Matrix,
    /// true when a step produced non-finite values; trailing entries are
    /// truncated at that point
    pub diverged: bool,
}

/// Run the K-step schedule on one task. The prediction mirrors the token
/// dynamics of stacked attention layers: the readout accumulates
/// lambda * dW_k applied to the (transformed) query input of step k.
pub fn multi_step_gd(hyper: &GdHyper, task: &Task) -> Result<GdRun> {
    hyper.validate()?;
    let mut w = hyper.w0.clone();
    let mut x = task.inputs.clone();
    let mut xq = Matrix::col_vec(&task.query_input);
    let mut pred = hyper.w0.matmul(&xq);
    let mut preds = Vec::new();
    let mut losses = Vec::new();
    for k in 0..hyper.steps() {
        let (eta, gamma) = (hyper.etas[k], hyper.gammas[k]);
        if hyper.order == GdppOrder::TransformFirst && gamma != 0.0 {
            let h = input_transform(&x, gamma);
            x = h.matmul(&x);
            xq = h.matmul(&xq);
        }
        let w_next = gd_step(&w, &x, &task.targets, eta);
        let mut dw = w_next.sub(&w);
        dw = dw.scale(hyper.lambda_damp);
        pred.add_assign(&dw.matmul(&xq));
        w.add_assign(&dw);
        if hyper.order == GdppOrder::Simultaneous && gamma != 0.0 {
            let h = input_transform(&x, gamma);
            x = h.matmul(&x);
            xq = h.matmul(&xq);
        }
        if !pred.all_finite() || !w.all_finite() || !x.all_finite() {
            return Ok(GdRun { preds, losses, final_w: w, diverged: true });
        }
        preds.push(pred.col(0));
        losses.push(
            pred.col(0)
                .iter()
                .zip(&task.query_target)
                .map(|(p, y)| (p - y) * (p - y))
                .sum(),
        );
    }
    Ok(GdRun { preds, losses, final_w: w, diverged: false })
}

/// Mean final-step query loss of a schedule over a task sample.
pub fn mean_loss(hyper: &GdHyper, tasks: &[Task]) -> Result<f64> {
    let mut acc = 0.0;
    for t in tasks {
        let run = multi_step_gd(hyper, t)?;
        if run.diverged {
            return Ok(f64::INFINITY);
        }
        acc += run.losses.last().copied().unwrap_or(f64::INFINITY);
    }
    Ok(acc / tasks.len() as f64)
}

/// Kernel smoothing prediction: y_hat = sum_i y_i (eta/N) m(x_i).m(x_test),
/// with m = identity when absent.
pub fn kernel_smoother_predict(
    task: &Task,
    m: Option<&dyn Fn(&[f64]) -> Vec<f64>>,
    eta: f64,
) -> Vec<f64> {
    let ident = |x: &[f64]| x.to_vec();
    let apply = |x: &[f64]| match m {
        Some(f) => f(x),
        None => ident(x),
    };
    let mq = apply(&task.query_input);
    let n = task.n();
    let mut out = vec![0.0; task.ny()];
    for i in 0..n {
        let mi = apply(&task.inputs.col(i));
        assert_eq!(mi.len(), mq.len(), "feature map must have fixed output size");
        let k: f64 = mi.iter().zip(&mq).map(|(a, b)| a * b).sum();
        for (o, y) in out.iter_mut().zip(task.targets.col(i)) {
            *o += y * (eta / n as f64) * k;
        }
    }
    out
}

/// Golden-section minimization of a unimodal-ish scalar function on [a, b].
pub fn golden_section_min(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, iters: usize) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (a, b);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    if fc < fd && fc < fx {
        (c, fc)
    } else if fd <= fc && fd < fx {
        (d, fd)
    } else {
        (x, fx)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuneMode {
    LineSearchEta,
    MetaTrain,
}

/// Task distribution and schedule description for hyperparameter tuning.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneSpec {
    pub steps: usize,
    pub n: usize,
    pub nx: usize,
    pub ny: usize,
    pub task_sample: usize,
    pub seed: Seed,
    /// tune a shared gamma alongside eta (GD++); otherwise gamma = 0
    pub tune_gamma: bool,
    /// normalize inputs to unit norm (the GD++ spectrum analysis setting)
    pub unit_norm: bool,
    pub ood: OodSpec,
}

impl TuneSpec {
    pub fn plain(steps: usize, n: usize, task_sample: usize, seed: Seed) -> Self {
        TuneSpec {
            steps,
            n,
            nx: 10,
            ny: 1,
            task_sample,
            seed,
            tune_gamma: false,
            unit_norm: false,
            ood: OodSpec::default(),
        }
    }

    pub fn sample_tasks(&self, count: usize, stream: &mut SeedStream) -> Vec<Task> {
        (0..count)
            .map(|_| {
                let mut t = sample_linear_task(stream, self.n, self.nx, self.ny, &self.ood);
                if self.unit_norm {
                    normalize_task_inputs(&mut t);
                }
                t
            })
            .collect()
    }
}

/// Rescale every input column (and the query) to unit L2 norm; targets are
/// recomputed so the teacher relation stays exact.
pub fn normalize_task_inputs(task: &mut Task) {
    let teacher = task.teacher.clone();
    for j in 0..task.n() {
        let norm = task.inputs.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..task.nx() {
                task.inputs.set(i, j, task.inputs.get(i, j) / norm);
            }
        }
    }
    let qn = task.query_input.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn > 0.0 {
        for v in task.query_input.iter_mut() {
            *v /= qn;
        }
    }
    if let Some(w) = teacher {
        task.targets = w.matmul(&task.inputs);
        task.query_target = w.matmul(&Matrix::col_vec(&task.query_input)).col(0);
    }
}

/// Tune a K-step schedule on a fresh task sample.
///
/// `LineSearchEta`: coarse log-grid then golden-section refinement of a
/// shared eta (and, with `tune_gamma`, coordinate descent over a shared
/// gamma, transform-first ordering). `MetaTrain`: Adam on per-step
/// (eta_k, gamma_k) through the unrolled schedule.
pub fn tune_gd_hyperparams(spec: &TuneSpec, mode: TuneMode) -> Result<GdHyper> {
    if spec.task_sample == 0 {
        return Err(Error::InvalidParam("task_sample must be >= 1".into()));
    }
    let mut stream = SeedStream::new(spec.seed);
    let tasks = spec.sample_tasks(spec.task_sample, &mut stream);
    let w0 = Matrix::zeros(spec.ny, spec.nx);
    let order = if spec.tune_gamma { GdppOrder::TransformFirst } else { GdppOrder::Simultaneous };
    match mode {
        TuneMode::LineSearchEta => {
            let eval = |eta: f64, gamma: f64| -> f64 {
                let hyper = GdHyper::shared(eta, gamma, spec.steps, w0.clone(), order);
                mean_loss(&hyper, &tasks).unwrap_or(f64::INFINITY)
            };
            let search_eta = |gamma: f64| -> (f64, f64) {
                // coarse log grid, then golden refinement around the best cell
                let lo = 1e-3f64;
                let hi = 100.0f64;
                let points = 60;
                let mut best = (f64::INFINITY, lo);
                for i in 0..points {
                    let eta = lo * (hi / lo).powf(i as f64 / (points - 1) as f64);
                    let l = eval(eta, gamma);
                    if l < best.0 {
                        best = (l, eta);
                    }
                }
                let ratio = (hi / lo).powf(1.0 / (points - 1) as f64);
                let (a, b) = (best.1 / ratio, best.1 * ratio);
                let (eta, l) = golden_section_min(&mut |e| eval(e, gamma), a, b, 40);
                (eta, l)
            };
            if !spec.tune_gamma {
                let (eta, _) = search_eta(0.0);
                return Ok(GdHyper::shared(eta, 0.0, spec.steps, w0, order));
            }
            let mut gamma = 0.0;
            let mut eta = search_eta(0.0).0;
            for _round in 0..3 {
                // grid over gamma at fixed eta, then refine; then re-tune eta
                let mut best = (eval(eta, gamma), gamma);
                for i in 0..81 {
                    let g = 0.5 * i as f64 / 80.0;
                    let l = eval(eta, g);
                    if l < best.0 {
                        best = (l, g);
                    }
                }
                let g0 = best.1;
                let (g, _) = golden_section_min(
                    &mut |g| eval(eta, g),
                    (g0 - 0.01).max(0.0),
                    g0 + 0.01,
                    30,
                );
                gamma = g;
                eta = search_eta(gamma).0;
            }
            Ok(GdHyper::shared(eta, gamma, spec.steps, w0, order))
        }
        TuneMode::MetaTrain => meta_train_hyper(spec, &tasks, w0, order),
    }
}

/// Adam on per-step (eta_k, gamma_k) through the unrolled schedule, with
/// gradients from central differences (2K scalars, cheap and robust).
fn meta_train_hyper(
    spec: &TuneSpec,
    tasks: &[Task],
    w0: Matrix,
    order: GdppOrder,
) -> Result<GdHyper> {
    use crate::numerics::adam::{adam_step, AdamState};
    let k = spec.steps;
    // warm start from the shared line-search solution
    let shared = tune_gd_hyperparams(
        &TuneSpec { task_sample: (spec.task_sample / 4).max(32), ..spec.clone() },
        TuneMode::LineSearchEta,
    )?;
    let mut params = vec![
        Matrix::from_vec(k, 1, shared.etas.clone()),
        Matrix::from_vec(k, 1, shared.gammas.clone()),
    ];
    let eval = |p: &[Matrix]| -> f64 {
        let hyper = GdHyper {
            etas: p[0].col(0),
            gammas: if spec.tune_gamma { p[1].col(0) } else { vec![0.0; k] },
            lambda_damp: 1.0,
            w0: w0.clone(),
            order,
        };
        mean_loss(&hyper, tasks).unwrap_or(f64::INFINITY)
    };
    let mut state = AdamState::new(&params, 0.01);
    for _ in 0..300 {
        let mut grads = vec![Matrix::zeros(k, 1), Matrix::zeros(k, 1)];
        for (pi, grad) in grads.iter_mut().enumerate() {
            if pi == 1 && !spec.tune_gamma {
                continue;
            }
            for idx in 0..k {
                let step = 1e-4 * params[pi].get(idx, 0).abs().max(1.0);
                let base = params[pi].get(idx, 0);
                let mut plus = params.clone();
                plus[pi].set(idx, 0, base + step);
                let mut minus = params.clone();
                minus[pi].set(idx, 0, base - step);
                grad.set(idx, 0, (eval(&plus) - eval(&minus)) / (2.0 * step));
            }
        }
        adam_step(&mut state, &mut params, &grads)?;
    }
    Ok(GdHyper {
        etas: params[0].col(0),
        gammas: if spec.tune_gamma { params[1].col(0) } else { vec![0.0; k] },
        lambda_damp: 1.0,
        w0,
        order,
    })
}

/// f(lambda, gamma) = lambda - 2 gamma lambda^2 + gamma^2 lambda^3
/// = lambda (1 - gamma lambda)^2: the GD++ eigenvalue map.
pub fn gdpp_eig_map(lambda: f64, gamma: f64) -> f64 {
    lambda * (1.0 - gamma * lambda) * (1.0 - gamma * lambda)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub gamma: f64,
    pub eigenvalues_before: Vec<f64>,
    pub eigenvalues_after: Vec<f64>,
    pub condition_before: f64,
    /// the closed-form rule: lambda_1++ = f(1/(3 gamma)) when that point
    /// lies inside the spectrum range, lambda_n++ = min(f(l_1), f(l_n))
    pub condition_after_formula: f64,
    /// condition number of the actually transformed spectrum
    pub condition_after_true: f64,
    /// f(1/(3 gamma), gamma) = 4/(27 gamma)
    pub f_local_max: f64,
}

/// Condition-number analysis of the GD++ transform on a given spectrum.
/// Eigenvalues below [`EIGEN_FLOOR`] are floored before dividing.
pub fn gdpp_spectrum(gamma: f64, eigenvalues: &[f64]) -> Result<SpectrumReport> {
    if gamma < 0.0 {
        return Err(Error::InvalidParam(format!("gamma must be >= 0, got {gamma}")));
    }
    if eigenvalues.is_empty() {
        return Err(Error::InvalidParam("need at least one eigenvalue".into()));
    }
    for l in eigenvalues {
        if *l < -1e-9 {
            return Err(Error::InvalidParam(format!("negative eigenvalue {l}")));
        }
    }
    let mut before: Vec<f64> = eigenvalues.iter().map(|l| l.max(0.0)).collect();
    before.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let after: Vec<f64> = before.iter().map(|l| gdpp_eig_map(*l, gamma)).collect();
    let (l_n, l_1) = (before[0], *before.last().unwrap());
    let kappa = |max: f64, min: f64| max.max(EIGEN_FLOOR) / min.max(EIGEN_FLOOR);
    let condition_before = kappa(l_1, l_n);
    let f_local_max = if gamma > 0.0 { 4.0 / (27.0 * gamma) } else { f64::INFINITY };
    let peak = if gamma > 0.0 { 1.0 / (3.0 * gamma) } else { f64::INFINITY };
    let l1_pp = if gamma > 0.0 && l_n <= peak && peak <= l_1 {
        f_local_max
    } else {
        gdpp_eig_map(l_1, gamma).max(gdpp_eig_map(l_n, gamma))
    };
    let ln_pp = gdpp_eig_map(l_1, gamma).min(gdpp_eig_map(l_n, gamma));
    let condition_after_formula = kappa(l1_pp, ln_pp);
    let t_min = after.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_max = after.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let condition_after_true = kappa(t_max, t_min);
    Ok(SpectrumReport {
        gamma,
        eigenvalues_before: before,
        eigenvalues_after: after,
        condition_before,
        condition_after_formula,
        condition_after_true,
        f_local_max,
    })
}

/// min-of-min / max-of-max eigenvalues of XX^T over a task ensemble.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenRange {
    pub n: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

pub fn task_eigen_range(
    stream: &mut SeedStream,
    n: usize,
    nx: usize,
    tasks: usize,
    unit_norm: bool,
) -> EigenRange {
    let mut lambda_min = f64::INFINITY;
    let mut lambda_max = f64::NEG_INFINITY;
    for _ in 0..tasks {
        let mut t = sample_linear_task(stream, n, nx, 1, &OodSpec::default());
        if unit_norm {
            normalize_task_inputs(&mut t);
        }
        let gram = t.inputs.matmul(&t.inputs.transpose());
        let eig = sym_eigenvalues(&gram);
        lambda_min = lambda_min.min(eig[0].max(0.0));
        lambda_max = lambda_max.max(*eig.last().unwrap());
    }
    EigenRange { n, lambda_min: lambda_min.max(EIGEN_FLOOR), lambda_max }
}

/// Gamma minimizing the closed-form condition number over (0, 1/lambda_1),
/// the range where the transform keeps the spectrum left of the root 1/gamma.
pub fn kappa_argmin_gamma(lambda_min: f64, lambda_max: f64) -> f64 {
    let hi = 0.999 / lambda_max;
    let mut best = (f64::INFINITY, hi / 2.0);
    let grid = 4000;
    for i in 1..grid {
        let g = hi * i as f64 / grid as f64;
        let r = gdpp_spectrum(g, &[lambda_min, lambda_max]).expect("valid spectrum");
        if r.condition_after_formula < best.0 {
            best = (r.condition_after_formula, g);
        }
    }
    best.1
}
