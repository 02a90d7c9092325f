//! Explicit Runge–Kutta integration (Euler, RK4, Dormand–Prince 5(4)) with
//! exact evaluation counting, a taped variant for backpropagating through
//! the solver, and adjoint-method gradients.
//!
//! One generic engine drives both plain tensors and tape variables, so the
//! discrete-gradient oracle uses exactly the arithmetic of the forward
//! solve.

use std::fmt::Write as _;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::layers::LayerError;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("step limit {steps} exceeded at t = {t}")]
    MaxSteps { steps: usize, t: f64 },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("ODE function failed: {0}")]
    Layer(#[from] LayerError),
    #[error("ODE function failed: {0}")]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    Euler,
    #[default]
    Rk4,
    Dopri5,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EULER" => Some(Method::Euler),
            "RK4" => Some(Method::Rk4),
            "DOPRI5" => Some(Method::Dopri5),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "EULER",
            Method::Rk4 => "RK4",
            Method::Dopri5 => "DOPRI5",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub t0: f64,
    pub t1: f64,
    /// Step count for the fixed-step methods.
    pub fixed_steps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// First trial step of DOPRI5; `None` means `(t1 - t0) / 100`.
    pub h_init: Option<f64>,
    /// Cap on attempted steps.
    pub max_steps: usize,
    /// Keep the state after every accepted step in the log.
    pub record_states: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            t0: 0.0,
            t1: 1.0,
            fixed_steps: 4,
            rtol: 1e-3,
            atol: 1e-3,
            h_init: None,
            max_steps: 10_000,
            record_states: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), OdeError> {
        let bad = |m: &str| Err(OdeError::Config(m.to_string()));
        if !(self.t1 > self.t0) || !self.t0.is_finite() || !self.t1.is_finite() {
            return bad("t1 must exceed t0");
        }
        match self.method {
            Method::Euler | Method::Rk4 if self.fixed_steps == 0 => bad("fixed_steps must be positive"),
            Method::Dopri5 if !(self.rtol > 0.0 && self.atol > 0.0) => bad("rtol and atol must be positive"),
            Method::Dopri5 if self.h_init.is_some_and(|h| !(h > 0.0)) => bad("h_init must be positive"),
            _ if self.max_steps == 0 => bad("max_steps must be positive"),
            _ => Ok(()),
        }
    }

    fn initial_step(&self) -> f64 {
        self.h_init.unwrap_or((self.t1 - self.t0) / 100.0)
    }

    fn uniform_grid(&self) -> Vec<f64> {
        let n = self.fixed_steps;
        let dt = (self.t1 - self.t0) / n as f64;
        (0..=n).map(|k| if k == n { self.t1 } else { self.t0 + k as f64 * dt }).collect()
    }
}

/// One attempted step: start time, step size, outcome and the scaled
/// error norm (0 for fixed-step methods).
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub dt: f64,
    pub accepted: bool,
    pub error_norm: f64,
    /// State at `t + dt` when states are recorded and the step was accepted.
    pub h: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverRun {
    pub h1: Tensor,
    pub nfe_forward: usize,
    pub nfe_backward: usize,
    pub steps: Vec<StepRecord>,
    /// Accepted time points, `t0` first and `t1` last.
    pub grid: Vec<f64>,
}

impl SolverRun {
    pub fn accepted(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }

    pub fn rejected(&self) -> usize {
        self.steps.len() - self.accepted()
    }

    /// Step log as CSV with columns `t,accepted,dt,error_norm`.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("t,accepted,dt,error_norm\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{},{}", s.t, u8::from(s.accepted), s.dt, s.error_norm);
        }
        out
    }
}

struct Tableau {
    c: &'static [f64],
    a: &'static [&'static [f64]],
    b: &'static [f64],
}

const EULER: Tableau = Tableau { c: &[0.0], a: &[&[]], b: &[1.0] };

const RK4: Tableau = Tableau {
    c: &[0.0, 0.5, 0.5, 1.0],
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
};

/// Dormand–Prince 5(4). The seventh stage sits at the fifth-order
/// solution, which is what makes first-same-as-last reuse possible.
const DOPRI5: Tableau = Tableau {
    c: &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
    a: &[
        &[],
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
        &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ],
    b: &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0],
};

/// Fourth-order weights of the embedded pair.
const DOPRI5_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Arithmetic the engine needs from a state representation.
trait Backend {
    type S: Clone;
    fn eval(&mut self, y: &Self::S, t: f64) -> Result<Self::S, OdeError>;
    /// `y + sum c_i k_i`.
    fn comb(&mut self, y: &Self::S, terms: &[(&Self::S, f64)]) -> Result<Self::S, OdeError>;
    fn value<'a>(&'a self, y: &'a Self::S) -> &'a Tensor;
}

struct TensorBackend<F>(F);

impl<F: FnMut(&Tensor, f64) -> Result<Tensor, OdeError>> Backend for TensorBackend<F> {
    type S = Tensor;

    fn eval(&mut self, y: &Tensor, t: f64) -> Result<Tensor, OdeError> {
        (self.0)(y, t)
    }

    fn comb(&mut self, y: &Tensor, terms: &[(&Tensor, f64)]) -> Result<Tensor, OdeError> {
        let mut out = y.clone();
        for &(k, c) in terms {
            out.axpy(c, k);
        }
        Ok(out)
    }

    fn value<'a>(&'a self, y: &'a Tensor) -> &'a Tensor {
        y
    }
}

struct TapeBackend<'t, F> {
    tape: &'t mut Tape,
    f: F,
}

impl<F: FnMut(&mut Tape, Var, f64) -> Result<Var, OdeError>> Backend for TapeBackend<'_, F> {
    type S = Var;

    fn eval(&mut self, y: &Var, t: f64) -> Result<Var, OdeError> {
        (self.f)(self.tape, *y, t)
    }

    fn comb(&mut self, y: &Var, terms: &[(&Var, f64)]) -> Result<Var, OdeError> {
        let mut all = vec![(*y, 1.0)];
        all.extend(terms.iter().map(|&(k, c)| (*k, c)));
        Ok(self.tape.lin_comb(&all)?)
    }

    fn value<'a>(&'a self, y: &'a Var) -> &'a Tensor {
        self.tape.real(*y)
    }
}

struct Engine<B: Backend> {
    backend: B,
    nfe: usize,
}

impl<B: Backend> Engine<B> {
    fn eval(&mut self, y: &B::S, t: f64) -> Result<B::S, OdeError> {
        self.nfe += 1;
        self.backend.eval(y, t)
    }

    /// Stages of one step. `k1` may be supplied (FSAL); stages beyond
    /// `stages` are not evaluated.
    fn stages(&mut self, tab: &Tableau, y: &B::S, t: f64, dt: f64, k1: Option<B::S>, stages: usize) -> Result<Vec<B::S>, OdeError> {
        let mut ks: Vec<B::S> = Vec::with_capacity(stages);
        ks.push(match k1 {
            Some(k) => k,
            None => self.eval(y, t)?,
        });
        for i in 1..stages {
            let terms: Vec<(&B::S, f64)> = tab.a[i]
                .iter()
                .enumerate()
                .filter(|(_, &a)| a != 0.0)
                .map(|(j, &a)| (&ks[j], dt * a))
                .collect();
            let yi = self.backend.comb(y, &terms)?;
            let k = self.eval(&yi, t + tab.c[i] * dt)?;
            ks.push(k);
        }
        Ok(ks)
    }

    fn combine(&mut self, y: &B::S, ks: &[B::S], weights: &[f64], dt: f64) -> Result<B::S, OdeError> {
        let terms: Vec<(&B::S, f64)> = ks
            .iter()
            .zip(weights)
            .filter(|(_, &b)| b != 0.0)
            .map(|(k, &b)| (k, dt * b))
            .collect();
        self.backend.comb(y, &terms)
    }

    fn check(&self, y: &B::S, t: f64) -> Result<(), OdeError> {
        if self.backend.value(y).all_finite() {
            Ok(())
        } else {
            Err(OdeError::NonFinite { t })
        }
    }

    /// Steps through consecutive points of `grid` (either direction) with
    /// the tableau's propagating weights.
    fn run_grid(&mut self, tab: &Tableau, y0: B::S, grid: &[f64], record: bool) -> Result<(B::S, Vec<StepRecord>), OdeError> {
        let stages = tab.b.iter().rposition(|&b| b != 0.0).map_or(0, |i| i + 1);
        let mut y = y0;
        let mut log = Vec::with_capacity(grid.len().saturating_sub(1));
        for pair in grid.windows(2) {
            let (t, dt) = (pair[0], pair[1] - pair[0]);
            let ks = self.stages(tab, &y, t, dt, None, stages)?;
            y = self.combine(&y, &ks, tab.b, dt)?;
            self.check(&y, pair[1])?;
            let h = record.then(|| self.backend.value(&y).clone());
            log.push(StepRecord { t, dt, accepted: true, error_norm: 0.0, h });
        }
        Ok((y, log))
    }

    fn run_dopri5(&mut self, y0: B::S, cfg: &SolverConfig) -> Result<(B::S, Vec<StepRecord>, Vec<f64>), OdeError> {
        let mut t = cfg.t0;
        let mut h = cfg.initial_step();
        let mut y = y0;
        let mut k1 = self.eval(&y, t)?;
        let mut log = Vec::new();
        let mut grid = vec![t];
        let err_w: Vec<f64> = DOPRI5.b.iter().zip(&DOPRI5_B4).map(|(a, b)| a - b).collect();
        while t < cfg.t1 {
            if log.len() >= cfg.max_steps {
                return Err(OdeError::MaxSteps { steps: cfg.max_steps, t });
            }
            let last = t + h >= cfg.t1;
            let dt = if last { cfg.t1 - t } else { h };
            let mut ks = self.stages(&DOPRI5, &y, t, dt, Some(k1.clone()), 6)?;
            let y5 = self.combine(&y, &ks, DOPRI5.b, dt)?;
            self.check(&y5, t + dt)?;
            let k7 = self.eval(&y5, t + dt)?;
            ks.push(k7);
            let norm = {
                let (y0v, y5v) = (self.backend.value(&y), self.backend.value(&y5));
                let mut sum = 0.0;
                for i in 0..y0v.len() {
                    let e: f64 = ks.iter().zip(&err_w).map(|(k, w)| w * self.backend.value(k).data()[i]).sum::<f64>() * dt;
                    let scale = cfg.atol + cfg.rtol * y0v.data()[i].abs().max(y5v.data()[i].abs());
                    sum += (e / scale).powi(2);
                }
                (sum / y0v.len().max(1) as f64).sqrt()
            };
            if !norm.is_finite() {
                return Err(OdeError::NonFinite { t });
            }
            let accepted = norm <= 1.0;
            let factor = if norm == 0.0 { 5.0 } else { (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0) };
            let rec_h = (accepted && cfg.record_states).then(|| self.backend.value(&y5).clone());
            log.push(StepRecord { t, dt, accepted, error_norm: norm, h: rec_h });
            if accepted {
                t = if last { cfg.t1 } else { t + dt };
                y = y5;
                k1 = ks.pop().expect("seven stages");
                grid.push(t);
            }
            h = dt * factor;
        }
        Ok((y, log, grid))
    }
}

fn tableau(method: Method) -> &'static Tableau {
    match method {
        Method::Euler => &EULER,
        Method::Rk4 => &RK4,
        Method::Dopri5 => &DOPRI5,
    }
}

/// `h + dt f(h, t)`.
pub fn euler_step(mut f: impl FnMut(&Tensor, f64) -> Tensor, h: &Tensor, t: f64, dt: f64) -> Tensor {
    let mut out = h.clone();
    out.axpy(dt, &f(h, t));
    out
}

/// Classical four-stage Runge–Kutta step.
pub fn rk4_step(f: impl FnMut(&Tensor, f64) -> Tensor, h: &Tensor, t: f64, dt: f64) -> Tensor {
    let mut f = f;
    let mut e = Engine { backend: TensorBackend(|y: &Tensor, t: f64| Ok(f(y, t))), nfe: 0 };
    let ks = e.stages(&RK4, h, t, dt, None, 4).expect("infallible field");
    e.combine(h, &ks, RK4.b, dt).expect("infallible field")
}

/// Solves `dh/dt = f(h, t)` from `t0` to `t1`.
pub fn integrate(f: impl FnMut(&Tensor, f64) -> Result<Tensor, OdeError>, h0: &Tensor, cfg: &SolverConfig) -> Result<SolverRun, OdeError> {
    cfg.validate()?;
    let mut e = Engine { backend: TensorBackend(f), nfe: 0 };
    let (h1, steps, grid) = match cfg.method {
        Method::Dopri5 => e.run_dopri5(h0.clone(), cfg)?,
        m => {
            let grid = cfg.uniform_grid();
            let (h1, steps) = e.run_grid(tableau(m), h0.clone(), &grid, cfg.record_states)?;
            (h1, steps, grid)
        }
    };
    Ok(SolverRun { h1, nfe_forward: e.nfe, nfe_backward: 0, steps, grid })
}

/// [`integrate`] recorded on a tape, for backpropagating through the
/// solver. Returns the terminal state and the forward evaluation count.
/// DOPRI5 step-size control reads values off the tape but is not itself
/// differentiated.
pub fn integrate_taped(
    tape: &mut Tape,
    f: impl FnMut(&mut Tape, Var, f64) -> Result<Var, OdeError>,
    h0: Var,
    cfg: &SolverConfig,
) -> Result<(Var, usize), OdeError> {
    cfg.validate()?;
    let mut e = Engine { backend: TapeBackend { tape, f }, nfe: 0 };
    let h1 = match cfg.method {
        Method::Dopri5 => e.run_dopri5(h0, cfg)?.0,
        m => e.run_grid(tableau(m), h0, &cfg.uniform_grid(), false)?.0,
    };
    Ok((h1, e.nfe))
}

/// A vector field that can also supply vector–Jacobian products.
pub trait AdjointField {
    fn num_params(&self) -> usize;

    /// Returns `(f(h, t), a^T df/dh, a^T df/dθ)`.
    fn vjp(&self, h: &Tensor, t: f64, a: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>), OdeError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointResult {
    pub dh0: Tensor,
    pub dtheta: Vec<f64>,
    pub nfe_backward: usize,
}

/// Integrates the augmented system `[h, a, g]` from `t1` back to `t0`:
/// `dh/dt = f`, `da/dt = -a^T df/dh`, `dg/dt = -a^T df/dθ`. Fixed-step
/// runs are reversed step for step; DOPRI5 reuses the accepted grid of
/// the forward run with its fifth-order weights.
pub fn adjoint_backward(field: &impl AdjointField, run: &SolverRun, cfg: &SolverConfig, dc_dh1: &Tensor) -> Result<AdjointResult, OdeError> {
    let shape = run.h1.shape().to_vec();
    if dc_dh1.shape() != shape.as_slice() {
        return Err(OdeError::Config(format!(
            "cotangent shape {:?} does not match state {:?}",
            dc_dh1.shape(),
            shape
        )));
    }
    let n = run.h1.len();
    let p = field.num_params();
    let mut z = Vec::with_capacity(2 * n + p);
    z.extend_from_slice(run.h1.data());
    z.extend_from_slice(dc_dh1.data());
    z.resize(2 * n + p, 0.0);
    let z = Tensor::from_vec(z);
    let aug = |zt: &Tensor, t: f64| -> Result<Tensor, OdeError> {
        let d = zt.data();
        let h = Tensor::new(shape.clone(), d[..n].to_vec()).expect("state size");
        let a = Tensor::new(shape.clone(), d[n..2 * n].to_vec()).expect("state size");
        let (fv, ah, ath) = field.vjp(&h, t, &a)?;
        let mut out = fv.into_data();
        out.extend(ah.data().iter().map(|v| -v));
        out.extend(ath.iter().map(|v| -v));
        Ok(Tensor::from_vec(out))
    };
    let mut e = Engine { backend: TensorBackend(aug), nfe: 0 };
    let grid: Vec<f64> = run.grid.iter().rev().copied().collect();
    let (zf, _) = e.run_grid(tableau(cfg.method), z, &grid, false)?;
    let d = zf.data();
    Ok(AdjointResult {
        dh0: Tensor::new(shape.clone(), d[n..2 * n].to_vec()).expect("state size"),
        dtheta: d[2 * n..].to_vec(),
        nfe_backward: e.nfe,
    })
}
