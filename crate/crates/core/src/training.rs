//! Losses, the margin schedule, mini-batch training and evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{finite_diff_check, GradCheckConfig, GradCheckReport};
use crate::autograd::Tape;
use crate::data::{augment, AugmentConfig, AugmentMode, Dataset};
use crate::error::{Error, Result};
use crate::network::{forward_on_tape, network_forward, InitConfig, LossKind, NetworkSpec, Parameters};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MARGIN_PLUS: f64 = 0.9;
pub const MARGIN_MINUS: f64 = 0.1;
pub const MARGIN_LAMBDA: f64 = 0.5;

static ACTIVE_WORKERS: AtomicUsize = AtomicUsize::new(0);

/// Training worker threads currently running in this process.
pub fn active_workers() -> usize {
    ACTIVE_WORKERS.load(Ordering::SeqCst)
}

struct WorkerGuard;

impl WorkerGuard {
    fn enter() -> Self {
        ACTIVE_WORKERS.fetch_add(1, Ordering::SeqCst);
        WorkerGuard
    }
}

impl Drop for WorkerGuard {
    fn drop(&mut self) {
        ACTIVE_WORKERS.fetch_sub(1, Ordering::SeqCst);
    }
}

fn scalar_loss<T: Scalar>(
    activations: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, crate::autograd::Var) -> Result<crate::autograd::Var>,
) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(activations.clone());
    let l = f(&mut tape, a)?;
    Ok(tape.value(l).data()[0])
}

/// `Σ_{i≠t} max(0, m − (a_t − a_i))²`
pub fn spread_loss<T: Scalar>(activations: &Tensor<T>, target: usize, margin: T) -> Result<T> {
    scalar_loss(activations, |tape, a| tape.spread_loss(a, target, margin))
}

/// `max(0, m⁺ − a_t)² + λ·Σ_{i≠t} max(0, a_i − m⁻)²` with `m⁺ = 0.9`, `m⁻ = 0.1`, `λ = 0.5`.
pub fn margin_loss<T: Scalar>(activations: &Tensor<T>, target: usize) -> Result<T> {
    scalar_loss(activations, |tape, a| {
        tape.margin_loss(a, target, T::c(MARGIN_PLUS), T::c(MARGIN_MINUS), T::c(MARGIN_LAMBDA))
    })
}

/// Linear margin ramp over fractional epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSchedule {
    pub start: f64,
    pub end: f64,
    pub ramp_epochs: f64,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        MarginSchedule {
            start: 0.2,
            end: 0.9,
            ramp_epochs: 5.0,
        }
    }
}

/// Margin at fractional `epoch`: linear from `start` to `end` over the ramp, then `end`.
pub fn margin_schedule(epoch: f64, cfg: &MarginSchedule) -> f64 {
    if cfg.ramp_epochs <= 0.0 || epoch >= cfg.ramp_epochs {
        return cfg.end;
    }
    let t = epoch.max(0.0) / cfg.ramp_epochs;
    cfg.start + (cfg.end - cfg.start) * t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub margin: MarginSchedule,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Momentum of SGD; the first-moment decay of Adam.
    pub momentum: f64,
    /// Derived from the configuration's root seed; not part of the file format.
    #[serde(skip)]
    pub seed: u64,
    pub init: InitConfig,
    /// Worker threads for per-example gradients; 1 keeps runs bitwise reproducible.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 50,
            loss: LossKind::Spread,
            margin: MarginSchedule::default(),
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            init: InitConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        let m = &self.margin;
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(m.start > 0.0 && m.start < 1.0 && m.end > 0.0 && m.end < 1.0) {
            return bad("margins must lie in (0, 1)");
        }
        if !(m.ramp_epochs >= 0.0 && m.ramp_epochs <= self.epochs as f64) {
            return bad("margin ramp must fit within the training epochs");
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rate must be >= 0 and momentum in [0, 1)");
        }
        if self.threads == 0 {
            return bad("threads must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global step index.
    pub step: usize,
    pub loss: f64,
    pub margin: f64,
    /// Test error, recorded on the last step of an epoch when a test split is given.
    pub test_error: Option<f64>,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Routing windows that fell back to secondary weights.
    pub degenerate: usize,
}

impl TrainReport {
    pub fn final_test_error(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_error)
    }

    /// One row per step: `epoch,step,loss,margin,test_error,ms_per_step`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,margin,test_error,ms_per_step\n");
        for s in &self.steps {
            let err = s.test_error.map(|e| format!("{e:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.8},{:.6},{},{:.3}",
                s.epoch, s.step, s.loss, s.margin, err, s.ms_per_step
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean wall-clock milliseconds per step.
    pub fn mean_ms_per_step(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.ms_per_step).sum::<f64>() / self.steps.len() as f64
    }
}

/// Per-example loss recorded on `tape`.
fn example_loss<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &NetworkSpec,
    vars: &[crate::autograd::Var],
    image: &Tensor<T>,
    label: usize,
    loss: LossKind,
    margin: f64,
) -> Result<crate::autograd::Var> {
    let x = tape.constant(image.clone());
    let a = forward_on_tape(tape, spec, vars, x)?;
    match loss {
        LossKind::Spread => tape.spread_loss(a, label, T::c(margin)),
        LossKind::Margin => tape.margin_loss(a, label, T::c(MARGIN_PLUS), T::c(MARGIN_MINUS), T::c(MARGIN_LAMBDA)),
    }
}

/// Summed loss and gradients over `examples`, accumulated in order.
fn accumulate<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    examples: &[(Tensor<T>, usize)],
    loss: LossKind,
    margin: f64,
) -> Result<(f64, Vec<Tensor<T>>, usize)> {
    let mut total = 0.0;
    let mut grads: Vec<Tensor<T>> = params
        .tensors()
        .map(|t| Tensor::zeros(t.dims().to_vec()).expect("parameter extents are valid"))
        .collect();
    let mut degenerate = 0;
    for (image, label) in examples {
        let mut tape = Tape::new();
        let vars = params.to_tape(&mut tape);
        let l = example_loss(&mut tape, spec, &vars, image, *label, loss, margin)?;
        total += tape.value(l).data()[0].to_f64_lossy();
        let g = tape.backward(l)?;
        for (acc, v) in grads.iter_mut().zip(&vars) {
            for (a, &d) in acc.data_mut().iter_mut().zip(g.wrt(*v).data()) {
                *a = *a + d;
            }
        }
        degenerate += tape.degenerate();
    }
    Ok((total, grads, degenerate))
}

/// Mean loss and its gradient over a batch. With `threads > 1` the batch is split
/// into contiguous chunks whose partial sums are combined in chunk order.
pub fn batch_gradient<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    examples: &[(Tensor<T>, usize)],
    loss: LossKind,
    margin: f64,
    threads: usize,
) -> Result<(f64, Vec<Tensor<T>>, usize)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let threads = threads.clamp(1, examples.len());
    let (total, mut grads, degenerate) = if threads == 1 {
        accumulate(spec, params, examples, loss, margin)?
    } else {
        let chunk = examples.len().div_ceil(threads);
        let parts: Vec<Result<(f64, Vec<Tensor<T>>, usize)>> = std::thread::scope(|s| {
            let handles: Vec<_> = examples
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        let _guard = WorkerGuard::enter();
                        accumulate(spec, params, part, loss, margin)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut parts = parts.into_iter();
        let mut acc = parts.next().expect("at least one chunk")?;
        for part in parts {
            let (l, g, d) = part?;
            acc.0 += l;
            acc.2 += d;
            for (a, b) in acc.1.iter_mut().zip(&g) {
                for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x = *x + y;
                }
            }
        }
        acc
    };
    let n = T::from_usize(examples.len()).expect("batch size fits");
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x = *x / n);
    }
    Ok((total / examples.len() as f64, grads, degenerate))
}

/// SGD with momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

fn zeros_like<T: Scalar>(params: &Parameters<T>) -> Vec<Tensor<T>> {
    params
        .tensors()
        .map(|t| Tensor::zeros(t.dims().to_vec()).expect("parameter extents are valid"))
        .collect()
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &Parameters<T>, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate: T::c(learning_rate),
            momentum: T::c(momentum),
            velocity: zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &[Tensor<T>]) {
        for ((p, v), g) in params.tensors_mut().zip(&mut self.velocity).zip(grads) {
            for ((x, vel), &d) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + d;
                *x = *x - self.learning_rate * *vel;
            }
        }
    }
}

/// Adam with bias-corrected moments. Every coordinate moves by at most about `lr`
/// per step whatever its gradient scale.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &Parameters<T>, learning_rate: f64, beta1: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            first: zeros_like(params),
            second: zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &[Tensor<T>]) {
        self.t += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let c1 = T::c(1.0 - self.beta1.powi(self.t));
        let c2 = T::c(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::c(self.learning_rate), T::c(self.epsilon));
        let one = T::c(1.0);
        for (((p, m), v), g) in params.tensors_mut().zip(&mut self.first).zip(&mut self.second).zip(grads) {
            let state = m.data_mut().iter_mut().zip(v.data_mut());
            for ((x, (m, v)), &d) in p.data_mut().iter_mut().zip(state).zip(g.data()) {
                *m = b1 * *m + (one - b1) * d;
                *v = b2 * *v + (one - b2) * d * d;
                *x = *x - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// The optimizer selected by a [`TrainConfig`].
#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(params: &Parameters<T>, cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(params, cfg.learning_rate, cfg.momentum)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params, cfg.learning_rate, cfg.momentum)),
        }
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &[Tensor<T>]) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }
}

fn example<T: Scalar>(spec: &NetworkSpec, data: &Dataset, i: usize) -> Result<Tensor<T>> {
    let image = data.image(i);
    let [h, w, c] = data.image_dims();
    let s = spec.input_size;
    if c != spec.input_channels || h < s || w < s {
        return Err(Error::ShapeMismatch {
            op: "training example",
            detail: format!("image {h}x{w}x{c} for a {s}x{s}x{} network", spec.input_channels),
        });
    }
    let image = if h == s && w == s {
        image
    } else {
        augment(&image, &AugmentConfig::crop_only(s), AugmentMode::Eval)?
    };
    Ok(image.cast())
}

/// Trains `spec` from a fresh initialization on `data`. When `test` is given, the
/// test error is measured after every epoch.
pub fn train<T: Scalar>(
    spec: &NetworkSpec,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Parameters<T>, TrainReport)> {
    let mut init_rng = rng::stream(cfg.seed, "init");
    let params = Parameters::init(spec, &cfg.init, &mut init_rng)?;
    train_from(spec, params, data, test, cfg)
}

/// Trains starting from `params`.
pub fn train_from<T: Scalar>(
    spec: &NetworkSpec,
    mut params: Parameters<T>,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Parameters<T>, TrainReport)> {
    cfg.validate()?;
    spec.layout()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if data.classes > spec.classes {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes, network {}",
            data.classes, spec.classes
        )));
    }
    let images: Vec<Tensor<T>> = (0..data.len()).map(|i| example(spec, data, i)).collect::<Result<_>>()?;
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut opt = Optimizer::new(&params, cfg);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for (k, batch) in order.chunks(cfg.batch_size).enumerate() {
            let margin = margin_schedule(epoch as f64 + k as f64 / steps_per_epoch as f64, &cfg.margin);
            let examples: Vec<(Tensor<T>, usize)> = batch.iter().map(|&i| (images[i].clone(), data.labels[i])).collect();
            let started = Instant::now();
            let (loss, grads, degenerate) = match batch_gradient(spec, &params, &examples, cfg.loss, margin, cfg.threads) {
                Err(Error::NanGradient { node, op }) => {
                    log::error!("NaN gradient at node {node} ({op}), epoch {epoch}, step {step}, margin {margin:.4}");
                    return Err(Error::NanLoss { epoch, step });
                }
                other => other?,
            };
            if !loss.is_finite() {
                log::error!(
                    "loss {loss} at epoch {epoch}, step {step}, margin {margin:.4}; last finite loss {:?}",
                    report.steps.last().map(|s| s.loss)
                );
                return Err(Error::NanLoss { epoch, step });
            }
            opt.step(&mut params, &grads);
            report.degenerate += degenerate;
            epoch_loss += loss;
            report.steps.push(StepRecord {
                epoch,
                step,
                loss,
                margin,
                test_error: None,
                ms_per_step: started.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        let test_error = test.map(|t| evaluate(spec, &params, t)).transpose()?;
        if let Some(last) = report.steps.last_mut() {
            last.test_error = test_error;
        }
        let mean_loss = epoch_loss / steps_per_epoch as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.5}, test error {test_error:?}");
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            test_error,
        });
    }
    Ok((params, report))
}

/// Predicted class: the first index of the largest activation.
pub fn predict<T: Scalar>(spec: &NetworkSpec, params: &Parameters<T>, image: &Tensor<T>) -> Result<usize> {
    let a = network_forward(spec, params, image)?;
    let mut best = 0;
    for (i, &x) in a.data().iter().enumerate() {
        if x > a.data()[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Top-1 error rate over `data`, center-cropping images larger than the input.
pub fn evaluate<T: Scalar>(spec: &NetworkSpec, params: &Parameters<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut wrong = 0;
    for i in 0..data.len() {
        if predict(spec, params, &example(spec, data, i)?)? != data.labels[i] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Finite-difference check of one example's loss against every parameter tensor.
/// Report entries follow the parameter order of `params`.
pub fn network_gradcheck(
    spec: &NetworkSpec,
    params: &Parameters<f64>,
    image: &Tensor<f64>,
    label: usize,
    loss: LossKind,
    margin: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let tensors: Vec<Tensor<f64>> = params.tensors().cloned().collect();
    finite_diff_check(
        |tape, vars| example_loss(tape, spec, vars, image, label, loss, margin),
        &tensors,
        cfg,
    )
}
