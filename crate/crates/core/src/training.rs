//! Classifier around the ODE block, Adam, and the train/eval loops.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Value, Var};
use crate::data::Dataset;
use crate::layers::{augment_state, bind_params, LayerError, OdeFunction, OdeFunctionConfig};
use crate::odeint::{adjoint_backward, integrate, integrate_taped, AdjointField, OdeError, SolverConfig};
use crate::tensor::{init_param, ParamStore, Prng, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("solver failure: {0}")]
    Solver(#[from] OdeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: expected length {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("sample shape {got:?} does not match the model input {want:?}")]
    InputShape { got: Vec<usize>, want: Vec<usize> },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradMode {
    /// Backward integration of the adjoint system.
    #[default]
    Adjoint,
    /// Backpropagation through the recorded solver steps.
    Discrete,
}

impl GradMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ADJOINT" => Some(GradMode::Adjoint),
            "DISCRETE" => Some(GradMode::Discrete),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GradMode::Adjoint => "ADJOINT",
            GradMode::Discrete => "DISCRETE",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<(), TrainError> {
    for (what, got) in [("gradient", grads.len()), ("first moment", state.m.len()), ("second moment", state.v.len())] {
        if got != params.len() {
            return Err(TrainError::Length { what, expected: params.len(), got });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub grad_mode: GradMode,
    /// Write measured wall time into the metrics; otherwise the column is 0
    /// so that metrics files are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 64,
            epochs: 3,
            seed: 0,
            solver: SolverConfig::default(),
            grad_mode: GradMode::Adjoint,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        self.solver.validate()?;
        Ok(())
    }
}

/// ODE block followed by a flatten + affine head.
#[derive(Clone, Debug)]
pub struct Model {
    pub ode: OdeFunction,
    pub store: ParamStore,
    pub classes: usize,
    head_w: usize,
    head_b: usize,
}

/// Loss, gradient and bookkeeping for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrad {
    pub loss: f64,
    /// Flattened in store order.
    pub grad: Vec<f64>,
    pub nfe_forward: usize,
    pub nfe_backward: usize,
    pub correct: bool,
}

/// Tape with the model parameters bound once; each evaluation records on
/// top and is rewound afterwards.
struct BoundField<'a> {
    model: &'a Model,
    tape: Tape,
    params: Vec<Var>,
    base: usize,
}

impl<'a> BoundField<'a> {
    fn new(model: &'a Model, requires_grad: bool, fault: bool) -> Self {
        let mut tape = Tape::new();
        if fault {
            tape.inject_vjp_fault();
        }
        let params = bind_params(&mut tape, &model.store, requires_grad);
        let base = tape.len();
        Self { model, tape, params, base }
    }

    fn eval(&mut self, h: &Tensor, t: f64) -> Result<Tensor, OdeError> {
        self.tape.truncate(self.base);
        let hv = self.tape.leaf(h.clone(), false);
        let y = self.model.ode.eval(&mut self.tape, &self.params, hv, t)?;
        Ok(self.tape.real(y).clone())
    }

    fn vjp(&mut self, h: &Tensor, t: f64, a: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>), OdeError> {
        let m = self.model;
        self.tape.truncate(self.base);
        let hv = self.tape.leaf(h.clone(), true);
        let y = m.ode.eval(&mut self.tape, &self.params, hv, t)?;
        let mut grads = self.tape.backward(y, Some(Value::Real(a.clone())))?;
        let dh = grads.take_real(hv).unwrap_or_else(|| Tensor::zeros(h.shape()));
        let mut dtheta = Vec::with_capacity(m.ode.num_params(&m.store));
        for i in m.ode.slots() {
            match grads.take_real(self.params[i]) {
                Some(g) => dtheta.extend_from_slice(g.data()),
                None => dtheta.resize(dtheta.len() + m.store.tensor(i).len(), 0.0),
            }
        }
        Ok((self.tape.real(y).clone(), dh, dtheta))
    }
}

struct OdeAdjoint<'a> {
    field: RefCell<BoundField<'a>>,
}

impl AdjointField for OdeAdjoint<'_> {
    fn num_params(&self) -> usize {
        let f = self.field.borrow();
        f.model.ode.num_params(&f.model.store)
    }

    fn vjp(&self, h: &Tensor, t: f64, a: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>), OdeError> {
        self.field.borrow_mut().vjp(h, t, a)
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn init(cfg: OdeFunctionConfig, classes: usize, seed: u64) -> Result<Self, TrainError> {
        if classes < 2 {
            return Err(TrainError::Config(format!("need at least two classes, got {classes}")));
        }
        let mut rng = Prng::new(seed);
        let mut store = ParamStore::new();
        let ode = OdeFunction::init(cfg, &mut store, "", &mut rng)?;
        let c = ode.config();
        let d = c.state_channels() * c.height * c.width;
        let head_w = store.insert("head.w", init_param(&[classes, d], d, &mut rng)?)?;
        let head_b = store.insert("head.b", Tensor::zeros(&[classes]))?;
        Ok(Self { ode, store, classes, head_w, head_b })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Shape of a raw sample, `[in_channels, height, width]`.
    pub fn input_shape(&self) -> Vec<usize> {
        let c = self.ode.config();
        vec![c.in_channels, c.height, c.width]
    }

    fn initial_state(&self, x: &Tensor) -> Result<Tensor, TrainError> {
        let want = self.input_shape();
        if x.shape() != want.as_slice() {
            return Err(TrainError::InputShape { got: x.shape().to_vec(), want });
        }
        Ok(augment_state(x, self.ode.config().augment))
    }

    fn head(&self, tape: &mut Tape, params: &[Var], h1: Var) -> Result<Var, TrainError> {
        Ok(tape.affine(params[self.head_w], params[self.head_b], h1)?)
    }

    /// Class logits of one sample and the forward evaluation count.
    pub fn logits(&self, x: &Tensor, solver: &SolverConfig) -> Result<(Tensor, usize), TrainError> {
        let h0 = self.initial_state(x)?;
        let mut field = BoundField::new(self, false, false);
        let run = integrate(|h, t| field.eval(h, t), &h0, solver)?;
        let BoundField { mut tape, params, base, .. } = field;
        tape.truncate(base);
        let h1 = tape.leaf(run.h1, false);
        let z = self.head(&mut tape, &params, h1)?;
        Ok((tape.real(z).clone(), run.nfe_forward))
    }

    /// Loss and full parameter gradient of one labelled sample.
    pub fn sample_grad(&self, x: &Tensor, label: usize, solver: &SolverConfig, mode: GradMode) -> Result<SampleGrad, TrainError> {
        self.sample_grad_with(x, label, solver, mode, false)
    }

    /// [`sample_grad`](Self::sample_grad) with the tape fault hook
    /// optionally armed.
    pub fn sample_grad_with(&self, x: &Tensor, label: usize, solver: &SolverConfig, mode: GradMode, fault: bool) -> Result<SampleGrad, TrainError> {
        let h0 = self.initial_state(x)?;
        match mode {
            GradMode::Discrete => {
                let mut tape = Tape::new();
                if fault {
                    tape.inject_vjp_fault();
                }
                let params = bind_params(&mut tape, &self.store, true);
                let hv = tape.leaf(h0, false);
                let (h1, nfe) = integrate_taped(&mut tape, |tp, h, t| Ok(self.ode.eval(tp, &params, h, t)?), hv, solver)?;
                let z = self.head(&mut tape, &params, h1)?;
                let correct = argmax(tape.real(z).data()) == label;
                let loss = tape.cross_entropy(z, label)?;
                let mut grads = tape.backward(loss, None)?;
                let mut grad = Vec::with_capacity(self.num_params());
                for (i, &p) in params.iter().enumerate() {
                    match grads.take_real(p) {
                        Some(g) => grad.extend_from_slice(g.data()),
                        None => grad.resize(grad.len() + self.store.tensor(i).len(), 0.0),
                    }
                }
                Ok(SampleGrad { loss: tape.real(loss).data()[0], grad, nfe_forward: nfe, nfe_backward: 0, correct })
            }
            GradMode::Adjoint => {
                let mut field = BoundField::new(self, true, fault);
                let run = integrate(|h, t| field.eval(h, t), &h0, solver)?;
                let (loss_value, correct, dh1, head_grad) = {
                    let BoundField { tape, params, base, .. } = &mut field;
                    tape.truncate(*base);
                    let h1 = tape.leaf(run.h1.clone(), true);
                    let z = self.head(tape, params, h1)?;
                    let correct = argmax(tape.real(z).data()) == label;
                    let loss = tape.cross_entropy(z, label)?;
                    let mut grads = tape.backward(loss, None)?;
                    let dh1 = grads.take_real(h1).expect("head reads the state");
                    let mut head_grad = Vec::new();
                    for i in self.ode.slots().end..self.store.len() {
                        match grads.take_real(params[i]) {
                            Some(g) => head_grad.extend_from_slice(g.data()),
                            None => head_grad.resize(head_grad.len() + self.store.tensor(i).len(), 0.0),
                        }
                    }
                    (tape.real(loss).data()[0], correct, dh1, head_grad)
                };
                let adj = adjoint_backward(&OdeAdjoint { field: RefCell::new(field) }, &run, solver, &dh1)?;
                let mut grad = adj.dtheta;
                grad.extend_from_slice(&head_grad);
                Ok(SampleGrad {
                    loss: loss_value,
                    grad,
                    nfe_forward: run.nfe_forward,
                    nfe_backward: adj.nfe_backward,
                    correct,
                })
            }
        }
    }

    /// Mean loss of a labelled batch as a function of the flattened
    /// parameters (for finite differences).
    pub fn loss_at(&self, theta: &[f64], samples: &[(Tensor, usize)], solver: &SolverConfig) -> Result<f64, TrainError> {
        let mut probe = self.clone();
        probe.store.unflatten(theta)?;
        let mut total = 0.0;
        for (x, y) in samples {
            let (z, _) = probe.logits(x, solver)?;
            total += crate::autodiff::log_sum_exp(z.data()) - z.data()[*y];
        }
        Ok(total / samples.len() as f64)
    }
}

#[cfg(feature = "parallel")]
fn map_samples<T: Send>(n: usize, f: impl Fn(usize) -> Result<T, TrainError> + Sync + Send) -> Result<Vec<T>, TrainError> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_samples<T: Send>(n: usize, f: impl Fn(usize) -> Result<T, TrainError> + Sync + Send) -> Result<Vec<T>, TrainError> {
    (0..n).map(f).collect()
}

/// Mean loss and gradient over a batch. Per-sample work runs in parallel
/// when the `parallel` feature is on; the reduction is always sequential in
/// sample order, so the result does not depend on scheduling.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub nfe_forward: usize,
    pub nfe_backward: usize,
    pub correct: usize,
}

pub fn batch_grad(model: &Model, data: &Dataset, indices: &[usize], solver: &SolverConfig, mode: GradMode) -> Result<BatchGrad, TrainError> {
    let per = map_samples(indices.len(), |k| {
        let i = indices[k];
        model.sample_grad(&data.image(i), data.labels[i], solver, mode)
    })?;
    Ok(reduce_batch(model.num_params(), &per))
}

/// [`batch_grad`] on the calling thread only, whatever the feature set.
pub fn batch_grad_sequential(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    solver: &SolverConfig,
    mode: GradMode,
) -> Result<BatchGrad, TrainError> {
    let per = indices
        .iter()
        .map(|&i| model.sample_grad(&data.image(i), data.labels[i], solver, mode))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(reduce_batch(model.num_params(), &per))
}

fn reduce_batch(num_params: usize, per: &[SampleGrad]) -> BatchGrad {
    let n = per.len().max(1) as f64;
    let mut out = BatchGrad { loss: 0.0, grad: vec![0.0; num_params], nfe_forward: 0, nfe_backward: 0, correct: 0 };
    for s in per {
        out.loss += s.loss;
        out.grad.iter_mut().zip(&s.grad).for_each(|(a, b)| *a += b);
        out.nfe_forward += s.nfe_forward;
        out.nfe_backward += s.nfe_backward;
        out.correct += usize::from(s.correct);
    }
    out.loss /= n;
    out.grad.iter_mut().for_each(|g| *g /= n);
    out
}

/// Fraction of correctly classified samples. Parameters are untouched.
pub fn evaluate(model: &Model, data: &Dataset, solver: &SolverConfig) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits = map_samples(data.len(), |i| {
        let (z, _) = model.logits(&data.image(i), solver)?;
        Ok(argmax(z.data()) == data.labels[i])
    })?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub nfe_fwd: f64,
    pub nfe_bwd: f64,
    pub wall_s: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,test_acc,nfe_fwd,nfe_bwd,wall_s";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.test_acc, self.nfe_fwd, self.nfe_bwd, self.wall_s
        )
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numeric fields")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn metrics_jsonl(rows: &[MetricsRow]) -> String {
    rows.iter().map(|r| r.json_line() + "\n").collect()
}

/// Statistics of one pass over the training set.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub nfe_fwd: f64,
    pub nfe_bwd: f64,
}

/// Trainer state carried across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: AdamState,
    order: Vec<usize>,
    rng: Prng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &Model, train_len: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let rng = Prng::new(cfg.seed ^ 0xd1b5_4a32_d192_ed03);
        Ok(Self { adam: AdamState::new(model.num_params()), order: (0..train_len).collect(), rng, cfg })
    }

    /// One shuffled pass of minibatch Adam updates.
    pub fn train_epoch(&mut self, model: &mut Model, train: &Dataset) -> Result<EpochStats, TrainError> {
        if self.order.len() != train.len() {
            return Err(TrainError::Length { what: "training set", expected: self.order.len(), got: train.len() });
        }
        self.rng.shuffle(&mut self.order);
        let (mut loss, mut correct, mut fwd, mut bwd) = (0.0, 0usize, 0usize, 0usize);
        let mut theta = model.store.flatten()?.into_data();
        for batch in self.order.chunks(self.cfg.batch_size) {
            let g = batch_grad(model, train, batch, &self.cfg.solver, self.cfg.grad_mode)?;
            adam_step(&mut theta, &g.grad, &mut self.adam, &self.cfg.adam)?;
            model.store.unflatten(&theta)?;
            loss += g.loss * batch.len() as f64;
            correct += g.correct;
            fwd += g.nfe_forward;
            bwd += g.nfe_backward;
        }
        let n = train.len().max(1) as f64;
        Ok(EpochStats {
            train_loss: loss / n,
            train_acc: correct as f64 / n,
            nfe_fwd: fwd as f64 / n,
            nfe_bwd: bwd as f64 / n,
        })
    }
}

/// Full run: per epoch, train then evaluate on `test`. `on_epoch` sees each
/// row as soon as it is ready.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>, TrainError> {
    let mut trainer = Trainer::new(cfg.clone(), model, train_set.len())?;
    let mut rows = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let stats = trainer.train_epoch(model, train_set)?;
        let test_acc = evaluate(model, test_set, &cfg.solver)?;
        let wall = start.elapsed().as_secs_f64();
        let row = MetricsRow {
            epoch,
            train_loss: stats.train_loss,
            test_acc,
            nfe_fwd: stats.nfe_fwd,
            nfe_bwd: stats.nfe_bwd,
            wall_s: if cfg.record_wall_time { wall } else { 0.0 },
        };
        on_epoch(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, log_sum_exp, Activation};
    use crate::data::{gen_synthetic, Split, SyntheticKind};
    use crate::layers::Variant;
    use crate::odeint::Method;

    fn small_model(variant: Variant, seed: u64) -> Model {
        let cfg = OdeFunctionConfig { layers: 2, branches: 2, dim_g: 8, height: 8, width: 8, variant, ..Default::default() };
        Model::init(cfg, 4, seed).unwrap()
    }

    fn rk4(n: usize) -> SolverConfig {
        SolverConfig { method: Method::Rk4, fixed_steps: n, ..Default::default() }
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &AdamConfig::default()).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-8);
        assert_eq!(s.step, 1);

        let mut p = vec![0.3, -1.2];
        let mut s = AdamState::new(2);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2]);
        assert!(adam_step(&mut p, &[0.0], &mut s, &AdamConfig::default()).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = Prng::new(8);
            let mut p: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let mut s = AdamState::new(5);
            for _ in 0..100 {
                let g: Vec<f64> = p.iter().map(|v| 2.0 * v + rng.normal() * 0.1).collect();
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn head_oracles() {
        let mut m = small_model(Variant::Bfno, 0);
        let d = 64;
        let hw = m.store.get_mut("head.w").unwrap();
        hw.data_mut().iter_mut().for_each(|v| *v = 0.0);
        // row k selects pixel 3k
        for k in 0..4 {
            hw.data_mut()[k * d + 3 * k] = 1.0;
        }
        let mut tape = Tape::new();
        let params = bind_params(&mut tape, &m.store, false);
        let x = Tensor::new(vec![1, 8, 8], (0..64).map(|v| v as f64 * 0.5).collect()).unwrap();
        let xv = tape.leaf(x.clone(), false);
        let z = m.head(&mut tape, &params, xv).unwrap();
        assert_eq!(tape.real(z).data(), &[0.0, 1.5, 3.0, 4.5]);

        m.store.get_mut("head.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let params = bind_params(&mut tape, &m.store, false);
        let z = m.head(&mut tape, &params, xv).unwrap();
        assert_eq!(tape.real(z).data(), &[0.0; 4]);
    }

    #[test]
    fn cross_entropy_matches_naive_softmax() {
        let mut rng = Prng::new(4);
        for _ in 0..20 {
            let z: Vec<f64> = (0..10).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let label = rng.below(10);
            let mut tape = Tape::new();
            let zv = tape.leaf(Tensor::from_vec(z.clone()), false);
            let l = tape.cross_entropy(zv, label).unwrap();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let naive = -(z[label].exp() / denom).ln();
            assert!((tape.real(l).data()[0] - naive).abs() < 1e-12);
            assert!((log_sum_exp(&z) - denom.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_gradient_matches_finite_differences() {
        // smooth activation: difference quotients straddling a ReLU kink
        // do not approximate the derivative
        let cfg = OdeFunctionConfig { dim_g: 8, height: 8, width: 8, activation: Activation::Softplus, ..Default::default() };
        let m = Model::init(cfg, 4, 1).unwrap();
        let data = gen_synthetic(SyntheticKind::Gaussians, 4, 2, Split::Train).unwrap();
        let solver = rk4(2);
        let g = m.sample_grad(&data.image(0), data.labels[0], &solver, GradMode::Discrete).unwrap();
        let theta = m.store.flatten().unwrap().into_data();
        let sample = vec![(data.image(0), data.labels[0])];
        let mut rng = Prng::new(3);
        let coords: Vec<usize> = (0..200).map(|_| rng.below(theta.len())).collect();
        let rep = finite_diff_check(|t| m.loss_at(t, &sample, &solver).unwrap(), &theta, &g.grad, 1e-2, Some(&coords));
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
        let loss = m.loss_at(&theta, &sample, &solver).unwrap();
        assert!((loss - g.loss).abs() < 1e-12);
    }

    #[test]
    fn adjoint_agrees_with_discrete() {
        for variant in [Variant::Bfno, Variant::Fno, Variant::Conv] {
            let m = small_model(variant, 5);
            let data = gen_synthetic(SyntheticKind::Gaussians, 4, 6, Split::Train).unwrap();
            let solver = rk4(20);
            let a = m.sample_grad(&data.image(1), data.labels[1], &solver, GradMode::Adjoint).unwrap();
            let d = m.sample_grad(&data.image(1), data.labels[1], &solver, GradMode::Discrete).unwrap();
            let diff: f64 = a.grad.iter().zip(&d.grad).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = d.grad.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(diff / norm < 1e-3, "{variant:?}: {}", diff / norm);
            assert!((a.loss - d.loss).abs() < 1e-12);
            assert_eq!(a.nfe_forward, 80);
            assert_eq!(a.nfe_backward, 80);
        }
    }

    #[test]
    fn one_step_adjoint_and_discrete_updates_agree() {
        let data = gen_synthetic(SyntheticKind::Gaussians, 8, 7, Split::Train).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let solver = rk4(20);
        let step = |mode| {
            let mut m = small_model(Variant::Bfno, 9);
            let before = m.store.flatten().unwrap().into_data();
            let g = batch_grad(&m, &data, &idx, &solver, mode).unwrap();
            let mut theta = before.clone();
            adam_step(&mut theta, &g.grad, &mut AdamState::new(before.len()), &AdamConfig::default()).unwrap();
            m.store.unflatten(&theta).unwrap();
            theta.iter().zip(&before).map(|(a, b)| a - b).collect::<Vec<f64>>()
        };
        let (a, d) = (step(GradMode::Adjoint), step(GradMode::Discrete));
        let diff: f64 = a.iter().zip(&d).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-3, "{}", diff / norm);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        // two features on a 1x2 grid, separable by the sign of x0 - x1
        let mut rng = Prng::new(10);
        let n = 64;
        let mut px = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let a = rng.uniform(0.0, 1.0);
            let b = (a + 0.2 + rng.uniform(0.0, 0.6)) % 1.0;
            let (a, b) = if (a - b).abs() < 0.2 { (a, (a + 0.5) % 1.0) } else { (a, b) };
            let l = i % 2;
            let (a, b) = if (a > b) == (l == 1) { (a, b) } else { (b, a) };
            px.extend([a, b]);
            labels.push(l);
        }
        let data = Dataset::new(Tensor::new(vec![n, 1, 1, 2], px).unwrap(), labels, 2, "toy", Split::Train).unwrap();
        let cfg = OdeFunctionConfig { layers: 1, branches: 1, dim_g: 2, height: 1, width: 2, ..Default::default() };
        let mut m = Model::init(cfg, 2, 11).unwrap();
        // constant-zero field: the ODE block is the identity
        for i in m.ode.slots() {
            m.store.tensor_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tc = TrainConfig {
            adam: AdamConfig { lr: 0.05, ..Default::default() },
            batch_size: 16,
            solver: SolverConfig { method: Method::Euler, fixed_steps: 1, ..Default::default() },
            ..Default::default()
        };
        let mut trainer = Trainer::new(tc.clone(), &m, n).unwrap();
        let mut acc = 0.0;
        for _ in 0..100 {
            trainer.train_epoch(&mut m, &data).unwrap();
            acc = evaluate(&m, &data, &tc.solver).unwrap();
            if acc == 1.0 {
                break;
            }
        }
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn euler_nfe_mean_is_exact() {
        let mut m = small_model(Variant::Bfno, 12);
        let data = gen_synthetic(SyntheticKind::Gaussians, 8, 13, Split::Train).unwrap();
        let cfg = TrainConfig { batch_size: 3, solver: SolverConfig { method: Method::Euler, fixed_steps: 5, ..Default::default() }, ..Default::default() };
        let mut trainer = Trainer::new(cfg, &m, data.len()).unwrap();
        let stats = trainer.train_epoch(&mut m, &data).unwrap();
        assert_eq!(stats.nfe_fwd, 5.0);
        assert_eq!(stats.nfe_bwd, 5.0);
    }

    #[test]
    fn sequential_batch_matches_default_path_bitwise() {
        let m = small_model(Variant::Bfno, 17);
        let data = gen_synthetic(SyntheticKind::Gaussians, 12, 18, Split::Train).unwrap();
        let idx: Vec<usize> = (0..12).rev().collect();
        for mode in [GradMode::Adjoint, GradMode::Discrete] {
            let a = batch_grad(&m, &data, &idx, &rk4(2), mode).unwrap();
            let b = batch_grad_sequential(&m, &data, &idx, &rk4(2), mode).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn evaluation_is_pure_and_chance_level_when_untrained() {
        let cfg = OdeFunctionConfig { layers: 1, branches: 1, dim_g: 4, height: 8, width: 8, ..Default::default() };
        let data = gen_synthetic(SyntheticKind::Gaussians, 400, 14, Split::Test).unwrap();
        let m = Model::init(cfg, 4, 15).unwrap();
        let before = m.store.flatten().unwrap();
        let solver = SolverConfig { method: Method::Euler, fixed_steps: 1, ..Default::default() };
        let a = evaluate(&m, &data, &solver).unwrap();
        let b = evaluate(&m, &data, &solver).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, m.store.flatten().unwrap());
        assert!((a - 0.25).abs() < 0.15, "{a}");
    }

    #[test]
    fn training_run_is_reproducible() {
        let data = gen_synthetic(SyntheticKind::Gaussians, 24, 16, Split::Train).unwrap();
        let test = gen_synthetic(SyntheticKind::Gaussians, 8, 16, Split::Test).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 3, solver: rk4(2), ..Default::default() };
        let run = || {
            let mut m = small_model(Variant::Bfno, 3);
            let rows = train(&mut m, &data, &test, &cfg, |_| {}).unwrap();
            (metrics_csv(&rows), m.store.flatten().unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.0.starts_with("epoch,train_loss,test_acc,nfe_fwd,nfe_bwd,wall_s\n"));
        assert_eq!(a.0.lines().count(), 3);
    }

    #[test]
    fn metrics_lines() {
        let r = MetricsRow { epoch: 1, train_loss: 0.5, test_acc: 0.75, nfe_fwd: 16.0, nfe_bwd: 16.0, wall_s: 0.0 };
        assert_eq!(r.csv_line(), "1,0.5,0.75,16,16,0");
        let v: serde_json::Value = serde_json::from_str(&r.json_line()).unwrap();
        assert_eq!(v["test_acc"], 0.75);
        assert_eq!(metrics_jsonl(&[r.clone(), r]).lines().count(), 2);
    }

    #[test]
    fn input_shape_is_checked() {
        let m = small_model(Variant::Bfno, 0);
        let bad = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(m.logits(&bad, &rk4(1)), Err(TrainError::InputShape { .. })));
    }
}
