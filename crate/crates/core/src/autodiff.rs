//! Eager reverse-mode differentiation over a closed set of tensor
//! primitives.
//!
//! Every `record_*` call computes its value immediately and appends a node;
//! nodes only reference earlier nodes, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Spectra travel through the tape as [`SpectrumTensor`]s (separate real and
//! imaginary planes); all leaves are real.

use thiserror::Error;

use crate::spectral::{self, SpectralError, SpectrumTensor};
use crate::tensor::{dot, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: expected a {expected} input")]
    Kind { op: &'static str, expected: &'static str },
    #[error("seed cotangent shape {got:?} does not match output shape {want:?}")]
    SeedShape { got: Vec<usize>, want: Vec<usize> },
    #[error("backward without a seed needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape { op, detail: detail.into() }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Real(Tensor),
    Spec(SpectrumTensor),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(t) => t.shape(),
            Value::Spec(s) => s.shape(),
        }
    }

    fn add_assign(&mut self, other: &Value) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => a.axpy(1.0, b),
            (Value::Spec(a), Value::Spec(b)) => a.axpy(1.0, b),
            _ => panic!("gradient kind mismatch during accumulation"),
        }
    }

}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// Derivative given the input `x` and output `y`. ReLU'(0) = 0.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "none" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "softplus" => Some(Activation::Softplus),
            _ => None,
        }
    }
}

/// Rows `k1` of an `h`-row spectrum within `m` modes of DC (both signs).
pub fn kept_rows(h: usize, m: usize) -> Vec<usize> {
    (0..h).filter(|&k| k.min(h - k) < m).collect()
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LinComb(Vec<(Var, f64)>),
    Sum(Var),
    Act(Var, Activation),
    ChannelMap { w: Var, b: Option<Var>, x: Var },
    PadTime { x: Var },
    Crop { x: Var },
    Rfft2 { x: Var },
    Irfft2 { s: Var },
    HermitianProject { s: Var },
    SpecMul { s: Var, kre: Var, kim: Var },
    BranchAgg { branches: Vec<Var>, w: Var },
    ModeMul { s: Var, kre: Var, kim: Var, m: usize },
    Conv3x3 { x: Var, w: Var, b: Var },
    Affine { w: Var, b: Var, x: Var },
    CrossEntropy { logits: Var, label: usize },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Value,
    needs_grad: bool,
}

/// Append-only record of primitive evaluations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    vjp_fault: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Value> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Real gradient of a leaf; zeros of the right shape are not
    /// materialized, so an untouched leaf yields `None`.
    pub fn real(&self, var: Var) -> Option<&Tensor> {
        match self.get(var) {
            Some(Value::Real(t)) => Some(t),
            _ => None,
        }
    }

    pub fn take_real(&mut self, var: Var) -> Option<Tensor> {
        match self.grads.get_mut(var.0).and_then(Option::take) {
            Some(Value::Real(t)) => Some(t),
            _ => None,
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: perturbs the weight VJP of every channel map by 1%, so
    /// gradient checks have something to catch.
    pub fn inject_vjp_fault(&mut self) {
        self.vjp_fault = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; variables created
    /// since then become invalid. Lets a tape with bound parameters be
    /// reused across evaluations.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn real(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Real(t) => t,
            Value::Spec(_) => panic!("node {} holds a spectrum", v.0),
        }
    }

    pub fn spec(&self, v: Var) -> &SpectrumTensor {
        match &self.nodes[v.0].value {
            Value::Spec(s) => s,
            Value::Real(_) => panic!("node {} holds a real tensor", v.0),
        }
    }

    fn try_real(&self, v: Var, op: &'static str) -> Result<&Tensor, AutodiffError> {
        match &self.nodes[v.0].value {
            Value::Real(t) => Ok(t),
            Value::Spec(_) => Err(AutodiffError::Kind { op, expected: "real" }),
        }
    }

    fn try_spec(&self, v: Var, op: &'static str) -> Result<&SpectrumTensor, AutodiffError> {
        match &self.nodes[v.0].value {
            Value::Spec(s) => Ok(s),
            Value::Real(_) => Err(AutodiffError::Kind { op, expected: "spectrum" }),
        }
    }

    fn push(&mut self, op: Op, value: Value, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Real(value),
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(&Tensor, &Tensor), AutodiffError> {
        let (x, y) = (self.try_real(a, op)?, self.try_real(b, op)?);
        if x.shape() != y.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok((x, y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = self.same_shape("add", a, b)?;
        let mut out = x.clone();
        out.axpy(1.0, y);
        Ok(self.push(Op::Add(a, b), Value::Real(out), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = self.same_shape("sub", a, b)?;
        let mut out = x.clone();
        out.axpy(-1.0, y);
        Ok(self.push(Op::Sub(a, b), Value::Real(out), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (x, y) = self.same_shape("mul", a, b)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        Ok(self.push(Op::Mul(a, b), Value::Real(out), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let out = self.try_real(a, "scale")?.scale(factor);
        Ok(self.push(Op::Scale(a, factor), Value::Real(out), &[a]))
    }

    /// `sum_i c_i * x_i` over same-shaped real inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var, AutodiffError> {
        let &(first, _) = terms
            .first()
            .ok_or_else(|| shape_err("lin_comb", "no terms"))?;
        let shape = self.try_real(first, "lin_comb")?.shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, c) in terms {
            let t = self.try_real(v, "lin_comb")?;
            if t.shape() != shape.as_slice() {
                return Err(shape_err("lin_comb", format!("{:?} vs {:?}", t.shape(), shape)));
            }
            if c != 0.0 {
                out.axpy(c, t);
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Op::LinComb(terms.to_vec()), Value::Real(out), &inputs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.try_real(a, "sum")?.sum();
        Ok(self.push(Op::Sum(a), Value::Real(Tensor::scalar(s)), &[a]))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var, AutodiffError> {
        let out = self.try_real(a, "activation")?.map(|x| act.apply(x));
        Ok(self.push(Op::Act(a, act), Value::Real(out), &[a]))
    }

    /// Pointwise channel map: `y[o, p] = sum_i w[o, i] x[i, p] + b[o]` for
    /// `x` of shape `[c_in, ...]` and `w` of shape `[c_out, c_in]`.
    pub fn channel_map(&mut self, w: Var, b: Option<Var>, x: Var) -> Result<Var, AutodiffError> {
        const OP: &str = "channel_map";
        let wt = self.try_real(w, OP)?;
        let xt = self.try_real(x, OP)?;
        if wt.shape().len() != 2 || xt.shape().is_empty() || wt.shape()[1] != xt.shape()[0] {
            return Err(shape_err(OP, format!("weight {:?} vs input {:?}", wt.shape(), xt.shape())));
        }
        let (cout, cin) = (wt.shape()[0], wt.shape()[1]);
        let pixels = xt.len() / cin;
        let bias = match b {
            Some(b) => {
                let bt = self.try_real(b, OP)?;
                if bt.len() != cout {
                    return Err(shape_err(OP, format!("bias {:?} for {cout} outputs", bt.shape())));
                }
                Some(bt.data())
            }
            None => None,
        };
        let mut out = vec![0.0; cout * pixels];
        let (wd, xd) = (wt.data(), xt.data());
        for o in 0..cout {
            let row = &mut out[o * pixels..(o + 1) * pixels];
            if let Some(bd) = bias {
                row.iter_mut().for_each(|v| *v = bd[o]);
            }
            for i in 0..cin {
                let wv = wd[o * cin + i];
                if wv == 0.0 {
                    continue;
                }
                for (r, &xv) in row.iter_mut().zip(&xd[i * pixels..(i + 1) * pixels]) {
                    *r += wv * xv;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        shape[0] = cout;
        let out = Tensor::new(shape, out).expect("shape computed");
        let mut inputs = vec![w, x];
        inputs.extend(b);
        Ok(self.push(Op::ChannelMap { w, b, x }, Value::Real(out), &inputs))
    }

    /// Appends a channel holding `t` and zero-pads `[c, h, w]` to
    /// `[c + 1, ph, pw]`. The time channel is `t` on the original extent and
    /// zero in the padding.
    pub fn pad_with_time(&mut self, x: Var, t: f64, ph: usize, pw: usize) -> Result<Var, AutodiffError> {
        const OP: &str = "pad_with_time";
        let xt = self.try_real(x, OP)?;
        let &[c, h, w] = xt.shape() else {
            return Err(shape_err(OP, format!("expected [c, h, w], got {:?}", xt.shape())));
        };
        if ph < h || pw < w {
            return Err(shape_err(OP, format!("cannot pad {h}x{w} down to {ph}x{pw}")));
        }
        let mut out = vec![0.0; (c + 1) * ph * pw];
        let xd = xt.data();
        for ch in 0..=c {
            for i in 0..h {
                let dst = &mut out[(ch * ph + i) * pw..(ch * ph + i) * pw + w];
                if ch < c {
                    dst.copy_from_slice(&xd[(ch * h + i) * w..(ch * h + i + 1) * w]);
                } else {
                    dst.iter_mut().for_each(|v| *v = t);
                }
            }
        }
        let out = Tensor::new(vec![c + 1, ph, pw], out).expect("shape computed");
        Ok(self.push(Op::PadTime { x }, Value::Real(out), &[x]))
    }

    /// Keeps the top-left `h x w` window of every channel.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let xt = self.try_real(x, "crop")?;
        let &[c, ph, pw] = xt.shape() else {
            return Err(shape_err("crop", format!("expected [c, h, w], got {:?}", xt.shape())));
        };
        if h > ph || w > pw {
            return Err(shape_err("crop", format!("window {h}x{w} exceeds {ph}x{pw}")));
        }
        let xd = xt.data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for i in 0..h {
                let start = (ch * ph + i) * pw;
                out.extend_from_slice(&xd[start..start + w]);
            }
        }
        let out = Tensor::new(vec![c, h, w], out).expect("shape computed");
        Ok(self.push(Op::Crop { x }, Value::Real(out), &[x]))
    }

    /// Per-channel 2-D real FFT over the trailing two axes.
    pub fn rfft2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = spectral::rfft_2d(self.try_real(x, "rfft2")?)?;
        Ok(self.push(Op::Rfft2 { x }, Value::Spec(s), &[x]))
    }

    /// Inverse of [`rfft2`](Self::rfft2) back to `h x w`.
    pub fn irfft2(&mut self, s: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let y = spectral::irfft_2d(self.try_spec(s, "irfft2")?, h, w)?;
        Ok(self.push(Op::Irfft2 { s }, Value::Real(y), &[s]))
    }

    pub fn hermitian_project(&mut self, s: Var, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let spec = self.try_spec(s, "hermitian_project")?;
        let sh = spec.shape();
        if sh.len() < 2 || sh[sh.len() - 2] != h || sh[sh.len() - 1] != w / 2 + 1 {
            return Err(shape_err("hermitian_project", format!("{sh:?} is not a {h}x{w} half spectrum")));
        }
        let mut out = spec.clone();
        spectral::hermitian_project(&mut out, h, w);
        Ok(self.push(Op::HermitianProject { s }, Value::Spec(out), &[s]))
    }

    /// Complex elementwise product with a kernel given as real and imaginary
    /// planes. A kernel with one plane fewer leading extent than the spectrum
    /// (`[h, wh]` against `[c, h, wh]`) is shared across channels.
    pub fn spectral_mul(&mut self, s: Var, kre: Var, kim: Var) -> Result<Var, AutodiffError> {
        const OP: &str = "spectral_mul";
        let spec = self.try_spec(s, OP)?;
        let (kr, ki) = (self.try_real(kre, OP)?, self.try_real(kim, OP)?);
        if kr.shape() != ki.shape() {
            return Err(shape_err(OP, "kernel planes differ in shape"));
        }
        let n = spec.len();
        let kn = kr.len();
        if kn == 0 || n % kn != 0 || !spec.shape().ends_with(kr.shape()) {
            return Err(shape_err(OP, format!("kernel {:?} vs spectrum {:?}", kr.shape(), spec.shape())));
        }
        let mut out = SpectrumTensor::zeros(spec.shape());
        let (krd, kid) = (kr.data(), ki.data());
        for i in 0..n {
            let k = i % kn;
            let (a, b) = (spec.re[i], spec.im[i]);
            out.re[i] = krd[k] * a - kid[k] * b;
            out.im[i] = krd[k] * b + kid[k] * a;
        }
        Ok(self.push(Op::SpecMul { s, kre, kim }, Value::Spec(out), &[s, kre, kim]))
    }

    /// `out[c] = sum_i w[c, i] * branch_i[c]` over spectra of shape
    /// `[c, ...]`, applied alike to real and imaginary planes.
    pub fn branch_aggregate(&mut self, branches: &[Var], w: Var) -> Result<Var, AutodiffError> {
        const OP: &str = "branch_aggregate";
        let wt = self.try_real(w, OP)?;
        let l = branches.len();
        if l == 0 || wt.shape().len() != 2 || wt.shape()[1] != l {
            return Err(shape_err(OP, format!("{l} branches vs aggregator {:?}", wt.shape())));
        }
        let c = wt.shape()[0];
        let shape = self.try_spec(branches[0], OP)?.shape().to_vec();
        if shape.first() != Some(&c) {
            return Err(shape_err(OP, format!("aggregator rows {c} vs spectrum {shape:?}")));
        }
        let per = shape.iter().product::<usize>() / c;
        let mut out = SpectrumTensor::zeros(&shape);
        let wd = wt.data();
        for (i, &bv) in branches.iter().enumerate() {
            let b = self.try_spec(bv, OP)?;
            if b.shape() != shape.as_slice() {
                return Err(shape_err(OP, format!("branch {i} shape {:?} vs {shape:?}", b.shape())));
            }
            for ch in 0..c {
                let f = wd[ch * l + i];
                let r = ch * per..(ch + 1) * per;
                for (o, v) in out.re[r.clone()].iter_mut().zip(&b.re[r.clone()]) {
                    *o += f * v;
                }
                for (o, v) in out.im[r.clone()].iter_mut().zip(&b.im[r]) {
                    *o += f * v;
                }
            }
        }
        let mut inputs = branches.to_vec();
        inputs.push(w);
        Ok(self.push(Op::BranchAgg { branches: branches.to_vec(), w }, Value::Spec(out), &inputs))
    }

    /// Truncated spectral product: keeps rows within `m` modes of DC
    /// (see [`kept_rows`]) and the first `m` columns, multiplies them by a
    /// kernel of shape `[c, rows, m]`, and zeroes every other bin.
    pub fn mode_mul(&mut self, s: Var, kre: Var, kim: Var, m: usize) -> Result<Var, AutodiffError> {
        const OP: &str = "mode_mul";
        let spec = self.try_spec(s, OP)?;
        let &[c, h, wh] = spec.shape() else {
            return Err(shape_err(OP, format!("expected [c, h, wh], got {:?}", spec.shape())));
        };
        if m == 0 || m > wh || m > h / 2 + 1 {
            return Err(shape_err(OP, format!("{m} modes exceed the {h}x{wh} half spectrum")));
        }
        let rows = kept_rows(h, m);
        let (kr, ki) = (self.try_real(kre, OP)?, self.try_real(kim, OP)?);
        let want = [c, rows.len(), m];
        if kr.shape() != want || ki.shape() != want {
            return Err(shape_err(OP, format!("kernel {:?}, expected {want:?}", kr.shape())));
        }
        let mut out = SpectrumTensor::zeros(spec.shape());
        for ch in 0..c {
            for (r, &k1) in rows.iter().enumerate() {
                for k2 in 0..m {
                    let i = (ch * h + k1) * wh + k2;
                    let k = (ch * rows.len() + r) * m + k2;
                    let (a, b) = (spec.re[i], spec.im[i]);
                    let (p, q) = (kr.data()[k], ki.data()[k]);
                    out.re[i] = p * a - q * b;
                    out.im[i] = p * b + q * a;
                }
            }
        }
        Ok(self.push(Op::ModeMul { s, kre, kim, m }, Value::Spec(out), &[s, kre, kim]))
    }

    /// 3x3 convolution with zero "same" padding: `x [cin, h, w]`,
    /// `w [cout, cin, 3, 3]`, `b [cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        const OP: &str = "conv3x3";
        let xt = self.try_real(x, OP)?;
        let wt = self.try_real(w, OP)?;
        let bt = self.try_real(b, OP)?;
        let &[cin, h, wd] = xt.shape() else {
            return Err(shape_err(OP, format!("input {:?}", xt.shape())));
        };
        let &[cout, wcin, 3, 3] = wt.shape() else {
            return Err(shape_err(OP, format!("weight {:?}", wt.shape())));
        };
        if wcin != cin || bt.len() != cout {
            return Err(shape_err(OP, format!("weight {:?} / bias {:?} vs input {:?}", wt.shape(), bt.shape(), xt.shape())));
        }
        let mut out = vec![0.0; cout * h * wd];
        let (xd, wdat, bd) = (xt.data(), wt.data(), bt.data());
        for o in 0..cout {
            let plane = &mut out[o * h * wd..(o + 1) * h * wd];
            plane.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..cin {
                let src = &xd[c * h * wd..(c + 1) * h * wd];
                for di in 0..3 {
                    for dj in 0..3 {
                        let k = wdat[((o * cin + c) * 3 + di) * 3 + dj];
                        if k == 0.0 {
                            continue;
                        }
                        let ((lo, hi), (ilo, ihi)) = (tap_span(dj, wd), tap_span(di, h));
                        for i in ilo..ihi {
                            let srow = &src[(i + di - 1) * wd..(i + di) * wd];
                            let drow = &mut plane[i * wd + lo..i * wd + hi];
                            for (d, s) in drow.iter_mut().zip(&srow[lo + dj - 1..hi + dj - 1]) {
                                *d += k * s;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, h, wd], out).expect("shape computed");
        Ok(self.push(Op::Conv3x3 { x, w, b }, Value::Real(out), &[x, w, b]))
    }

    /// `y = w * flatten(x) + b` with `w [k, d]`, `b [k]`.
    pub fn affine(&mut self, w: Var, b: Var, x: Var) -> Result<Var, AutodiffError> {
        const OP: &str = "affine";
        let (wt, bt, xt) = (self.try_real(w, OP)?, self.try_real(b, OP)?, self.try_real(x, OP)?);
        let &[k, d] = wt.shape() else {
            return Err(shape_err(OP, format!("weight {:?}", wt.shape())));
        };
        if xt.len() != d || bt.len() != k {
            return Err(shape_err(OP, format!("weight {:?}, bias {:?}, input {:?}", wt.shape(), bt.shape(), xt.shape())));
        }
        let xd = xt.data();
        let out: Vec<f64> = (0..k)
            .map(|r| bt.data()[r] + dot(&wt.data()[r * d..(r + 1) * d], xd))
            .collect();
        Ok(self.push(Op::Affine { w, b, x }, Value::Real(Tensor::from_vec(out)), &[w, b, x]))
    }

    /// `-log softmax(logits)[label]` with max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, AutodiffError> {
        let z = self.try_real(logits, "cross_entropy")?;
        if label >= z.len() {
            return Err(AutodiffError::Label { label, classes: z.len() });
        }
        let loss = log_sum_exp(z.data()) - z.data()[label];
        Ok(self.push(Op::CrossEntropy { logits, label }, Value::Real(Tensor::scalar(loss)), &[logits]))
    }

    /// Reverse sweep from `output`. Without a seed the output must be a
    /// scalar and is seeded with 1.
    pub fn backward(&self, output: Var, seed: Option<Value>) -> Result<Gradients, AutodiffError> {
        let out_value = &self.nodes[output.0].value;
        let seed = match seed {
            Some(s) => {
                let kinds_match = matches!(
                    (&s, out_value),
                    (Value::Real(_), Value::Real(_)) | (Value::Spec(_), Value::Spec(_))
                );
                if !kinds_match || s.shape() != out_value.shape() {
                    return Err(AutodiffError::SeedShape {
                        got: s.shape().to_vec(),
                        want: out_value.shape().to_vec(),
                    });
                }
                s
            }
            None => match out_value {
                Value::Real(t) if t.len() == 1 => Value::Real(Tensor::full(t.shape(), 1.0)),
                other => return Err(AutodiffError::NotScalar(other.shape().to_vec())),
            },
        };
        let mut grads: Vec<Option<Value>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Value>], v: Var, contribution: Value) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Value, grads: &mut [Option<Value>]) -> Result<(), AutodiffError> {
        let real_g = || match g {
            Value::Real(t) => t,
            Value::Spec(_) => panic!("real node received a spectral gradient"),
        };
        let spec_g = || match g {
            Value::Spec(s) => s,
            Value::Real(_) => panic!("spectral node received a real gradient"),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, Value::Real(real_g().scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                let gt = real_g();
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(this) {
                        let o = self.real(other);
                        let data = gt.data().iter().zip(o.data()).map(|(p, q)| p * q).collect();
                        self.accumulate(grads, this, Value::Real(Tensor::new(gt.shape().to_vec(), data).unwrap()));
                    }
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, Value::Real(real_g().scale(*f)));
            }
            Op::LinComb(terms) => {
                let gt = real_g();
                for &(v, c) in terms {
                    if self.wants(v) && c != 0.0 {
                        self.accumulate(grads, v, Value::Real(gt.scale(c)));
                    }
                }
            }
            Op::Sum(a) => {
                let s = real_g().data()[0];
                let shape = self.real(*a).shape().to_vec();
                self.accumulate(grads, *a, Value::Real(Tensor::full(&shape, s)));
            }
            Op::Act(a, act) => {
                let x = self.real(*a);
                let Value::Real(y) = &node.value else { unreachable!() };
                let gt = real_g();
                let data = gt
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *a, Value::Real(Tensor::new(x.shape().to_vec(), data).unwrap()));
            }
            Op::ChannelMap { w, b, x } => self.vjp_channel_map(*w, *b, *x, real_g(), grads),
            Op::PadTime { x } => {
                let xs = self.real(*x).shape().to_vec();
                let gt = real_g();
                let &[_, ph, pw] = gt.shape() else { unreachable!() };
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    for i in 0..h {
                        let start = (ch * ph + i) * pw;
                        dx.extend_from_slice(&gt.data()[start..start + w]);
                    }
                }
                self.accumulate(grads, *x, Value::Real(Tensor::new(xs, dx).unwrap()));
            }
            Op::Crop { x } => {
                let xs = self.real(*x).shape().to_vec();
                let gt = real_g();
                let (c, ph, pw) = (xs[0], xs[1], xs[2]);
                let (h, w) = (gt.shape()[1], gt.shape()[2]);
                let mut dx = vec![0.0; c * ph * pw];
                for ch in 0..c {
                    for i in 0..h {
                        let start = (ch * ph + i) * pw;
                        dx[start..start + w].copy_from_slice(&gt.data()[(ch * h + i) * w..(ch * h + i + 1) * w]);
                    }
                }
                self.accumulate(grads, *x, Value::Real(Tensor::new(xs, dx).unwrap()));
            }
            Op::Rfft2 { x } => {
                let xs = self.real(*x).shape();
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let dx = spectral::vjp_rfft_2d(spec_g(), h, w)?;
                self.accumulate(grads, *x, Value::Real(dx));
            }
            Op::Irfft2 { s } => {
                let gt = real_g();
                let gs = gt.shape();
                let (h, w) = (gs[gs.len() - 2], gs[gs.len() - 1]);
                let ds = spectral::vjp_irfft_2d(gt, h, w)?;
                self.accumulate(grads, *s, Value::Spec(ds));
            }
            Op::HermitianProject { s } => {
                let mut ds = spec_g().clone();
                let sh = ds.shape().to_vec();
                let h = sh[sh.len() - 2];
                // the full width is not recoverable from the bin count alone
                // when it is odd; only power-of-two widths reach this op
                let w = 2 * (sh[sh.len() - 1] - 1);
                spectral::hermitian_project(&mut ds, h, w.max(1));
                self.accumulate(grads, *s, Value::Spec(ds));
            }
            Op::SpecMul { s, kre, kim } => self.vjp_spec_mul(*s, *kre, *kim, spec_g(), grads),
            Op::BranchAgg { branches, w } => self.vjp_branch_agg(branches, *w, spec_g(), grads),
            Op::ModeMul { s, kre, kim, m } => self.vjp_mode_mul(*s, *kre, *kim, *m, spec_g(), grads),
            Op::Conv3x3 { x, w, b } => self.vjp_conv3x3(*x, *w, *b, real_g(), grads),
            Op::Affine { w, b, x } => {
                let gt = real_g();
                let (wt, xt) = (self.real(*w), self.real(*x));
                let (k, d) = (wt.shape()[0], wt.shape()[1]);
                if self.wants(*x) {
                    let mut dx = vec![0.0; d];
                    for r in 0..k {
                        let gr = gt.data()[r];
                        for (o, wv) in dx.iter_mut().zip(&wt.data()[r * d..(r + 1) * d]) {
                            *o += gr * wv;
                        }
                    }
                    self.accumulate(grads, *x, Value::Real(Tensor::new(xt.shape().to_vec(), dx).unwrap()));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * d];
                    for r in 0..k {
                        let gr = gt.data()[r];
                        for (o, xv) in dw[r * d..(r + 1) * d].iter_mut().zip(xt.data()) {
                            *o = gr * xv;
                        }
                    }
                    self.accumulate(grads, *w, Value::Real(Tensor::new(vec![k, d], dw).unwrap()));
                }
                self.accumulate(grads, *b, Value::Real(gt.clone()));
            }
            Op::CrossEntropy { logits, label } => {
                let z = self.real(*logits);
                let scale = real_g().data()[0];
                let lse = log_sum_exp(z.data());
                let mut dz: Vec<f64> = z.data().iter().map(|&v| scale * (v - lse).exp()).collect();
                dz[*label] -= scale;
                self.accumulate(grads, *logits, Value::Real(Tensor::new(z.shape().to_vec(), dz).unwrap()));
            }
        }
        Ok(())
    }

    fn vjp_channel_map(&self, w: Var, b: Option<Var>, x: Var, g: &Tensor, grads: &mut [Option<Value>]) {
        let (wt, xt) = (self.real(w), self.real(x));
        let (cout, cin) = (wt.shape()[0], wt.shape()[1]);
        let pixels = xt.len() / cin;
        let (wd, xd, gd) = (wt.data(), xt.data(), g.data());
        if self.wants(x) {
            let mut dx = vec![0.0; cin * pixels];
            for o in 0..cout {
                let grow = &gd[o * pixels..(o + 1) * pixels];
                for i in 0..cin {
                    let wv = wd[o * cin + i];
                    if wv == 0.0 {
                        continue;
                    }
                    for (d, &gv) in dx[i * pixels..(i + 1) * pixels].iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            }
            self.accumulate(grads, x, Value::Real(Tensor::new(xt.shape().to_vec(), dx).unwrap()));
        }
        if self.wants(w) {
            let fault = if self.vjp_fault { 1.01 } else { 1.0 };
            let mut dw = vec![0.0; cout * cin];
            for o in 0..cout {
                let grow = &gd[o * pixels..(o + 1) * pixels];
                for i in 0..cin {
                    let xrow = &xd[i * pixels..(i + 1) * pixels];
                    dw[o * cin + i] = fault * dot(grow, xrow);
                }
            }
            self.accumulate(grads, w, Value::Real(Tensor::new(vec![cout, cin], dw).unwrap()));
        }
        if let Some(b) = b {
            if self.wants(b) {
                let db = (0..cout).map(|o| gd[o * pixels..(o + 1) * pixels].iter().sum()).collect();
                self.accumulate(grads, b, Value::Real(Tensor::from_vec(db)));
            }
        }
    }

    fn vjp_spec_mul(&self, s: Var, kre: Var, kim: Var, g: &SpectrumTensor, grads: &mut [Option<Value>]) {
        let spec = self.spec(s);
        let (kr, ki) = (self.real(kre), self.real(kim));
        let kn = kr.len();
        let n = spec.len();
        if self.wants(s) {
            // g * conj(k)
            let mut ds = SpectrumTensor::zeros(spec.shape());
            for i in 0..n {
                let k = i % kn;
                let (p, q) = (kr.data()[k], ki.data()[k]);
                ds.re[i] = g.re[i] * p + g.im[i] * q;
                ds.im[i] = g.im[i] * p - g.re[i] * q;
            }
            self.accumulate(grads, s, Value::Spec(ds));
        }
        if self.wants(kre) || self.wants(kim) {
            // g * conj(s), summed over channels when the kernel is shared
            let mut dr = vec![0.0; kn];
            let mut di = vec![0.0; kn];
            for i in 0..n {
                let k = i % kn;
                dr[k] += g.re[i] * spec.re[i] + g.im[i] * spec.im[i];
                di[k] += g.im[i] * spec.re[i] - g.re[i] * spec.im[i];
            }
            self.accumulate(grads, kre, Value::Real(Tensor::new(kr.shape().to_vec(), dr).unwrap()));
            self.accumulate(grads, kim, Value::Real(Tensor::new(ki.shape().to_vec(), di).unwrap()));
        }
    }

    fn vjp_branch_agg(&self, branches: &[Var], w: Var, g: &SpectrumTensor, grads: &mut [Option<Value>]) {
        let wt = self.real(w);
        let (c, l) = (wt.shape()[0], wt.shape()[1]);
        let per = g.len() / c;
        let mut dw = vec![0.0; c * l];
        for (i, &bv) in branches.iter().enumerate() {
            let b = self.spec(bv);
            if self.wants(bv) {
                let mut db = SpectrumTensor::zeros(b.shape());
                for ch in 0..c {
                    let f = wt.data()[ch * l + i];
                    for j in ch * per..(ch + 1) * per {
                        db.re[j] = f * g.re[j];
                        db.im[j] = f * g.im[j];
                    }
                }
                self.accumulate(grads, bv, Value::Spec(db));
            }
            for ch in 0..c {
                let r = ch * per..(ch + 1) * per;
                let dot: f64 = dot(&g.re[r.clone()], &b.re[r.clone()]) + dot(&g.im[r.clone()], &b.im[r]);
                dw[ch * l + i] = dot;
            }
        }
        self.accumulate(grads, w, Value::Real(Tensor::new(vec![c, l], dw).unwrap()));
    }

    fn vjp_mode_mul(&self, s: Var, kre: Var, kim: Var, m: usize, g: &SpectrumTensor, grads: &mut [Option<Value>]) {
        let spec = self.spec(s);
        let (c, h, wh) = (spec.shape()[0], spec.shape()[1], spec.shape()[2]);
        let rows = kept_rows(h, m);
        let (kr, ki) = (self.real(kre), self.real(kim));
        let mut ds = SpectrumTensor::zeros(spec.shape());
        let mut dr = vec![0.0; kr.len()];
        let mut di = vec![0.0; ki.len()];
        for ch in 0..c {
            for (r, &k1) in rows.iter().enumerate() {
                for k2 in 0..m {
                    let i = (ch * h + k1) * wh + k2;
                    let k = (ch * rows.len() + r) * m + k2;
                    let (p, q) = (kr.data()[k], ki.data()[k]);
                    ds.re[i] = g.re[i] * p + g.im[i] * q;
                    ds.im[i] = g.im[i] * p - g.re[i] * q;
                    dr[k] = g.re[i] * spec.re[i] + g.im[i] * spec.im[i];
                    di[k] = g.im[i] * spec.re[i] - g.re[i] * spec.im[i];
                }
            }
        }
        self.accumulate(grads, s, Value::Spec(ds));
        self.accumulate(grads, kre, Value::Real(Tensor::new(kr.shape().to_vec(), dr).unwrap()));
        self.accumulate(grads, kim, Value::Real(Tensor::new(ki.shape().to_vec(), di).unwrap()));
    }

    fn vjp_conv3x3(&self, x: Var, w: Var, b: Var, g: &Tensor, grads: &mut [Option<Value>]) {
        let (xt, wt) = (self.real(x), self.real(w));
        let (cin, h, wd) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let cout = wt.shape()[0];
        let (xd, wdat, gd) = (xt.data(), wt.data(), g.data());
        let mut dx = vec![0.0; xt.len()];
        let mut dw = vec![0.0; wt.len()];
        for o in 0..cout {
            let gplane = &gd[o * h * wd..(o + 1) * h * wd];
            for c in 0..cin {
                let src = &xd[c * h * wd..(c + 1) * h * wd];
                let dsrc = &mut dx[c * h * wd..(c + 1) * h * wd];
                for di in 0..3 {
                    for dj in 0..3 {
                        let widx = ((o * cin + c) * 3 + di) * 3 + dj;
                        let k = wdat[widx];
                        let mut acc = 0.0;
                        let ((lo, hi), (ilo, ihi)) = (tap_span(dj, wd), tap_span(di, h));
                        for i in ilo..ihi {
                            let grow = &gplane[i * wd + lo..i * wd + hi];
                            let at = (i + di - 1) * wd + lo + dj - 1;
                            acc += dot(grow, &src[at..at + hi - lo]);
                            for (d, gv) in dsrc[at..at + hi - lo].iter_mut().zip(grow) {
                                *d += k * gv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
        let db = (0..cout).map(|o| gd[o * h * wd..(o + 1) * h * wd].iter().sum()).collect();
        self.accumulate(grads, x, Value::Real(Tensor::new(xt.shape().to_vec(), dx).unwrap()));
        self.accumulate(grads, w, Value::Real(Tensor::new(wt.shape().to_vec(), dw).unwrap()));
        self.accumulate(grads, b, Value::Real(Tensor::from_vec(db)));
    }
}

/// Output positions `lo..hi` along an axis of length `n` whose input
/// neighbour at offset `d - 1` (d in 0..3) lies inside the axis.
fn tap_span(d: usize, n: usize) -> (usize, usize) {
    (1usize.saturating_sub(d), (n + 1 - d).min(n))
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Flat coordinate where the maximum occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Denominator floor of the relative error: gradients smaller than this are
/// compared in absolute terms, since finite differences in double precision
/// cannot resolve them.
pub const FD_FLOOR: f64 = 1e-8;

/// Fourth-order central differences
/// `(-f(θ+2ε) + 8f(θ+ε) - 8f(θ-ε) + f(θ-2ε)) / 12ε` against an analytic
/// gradient over the coordinates in `coords` (all when `None`). Relative
/// error per coordinate is `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    grad: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
) -> FdReport {
    assert_eq!(theta.len(), grad.len(), "gradient length does not match parameters");
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut probe = theta.to_vec();
    let mut report = FdReport { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for &i in coords {
        let orig = probe[i];
        let mut at = |d: f64| {
            probe[i] = orig + d;
            f(&probe)
        };
        let numeric = (-at(2.0 * eps) + 8.0 * at(eps) - 8.0 * at(-eps) + at(-2.0 * eps)) / (12.0 * eps);
        probe[i] = orig;
        let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(FD_FLOOR);
        if rel > report.max_rel_err || !rel.is_finite() {
            report = FdReport { max_rel_err: rel, worst_index: i, analytic: grad[i], numeric };
        }
    }
    report
}
