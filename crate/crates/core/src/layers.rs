//! ODE-function bodies: time-augmented encoder, branched spectral layers,
//! decoder, and the FNO / convolutional baselines.
//!
//! Parameters live in a [`ParamStore`]; an [`OdeFunction`] only remembers
//! which store slots it owns. Evaluation records onto a [`Tape`] with the
//! store bound as leaves (see [`bind_params`]).

use thiserror::Error;

use crate::autodiff::{kept_rows, Activation, AutodiffError, Tape, Var};
use crate::spectral::next_power_of_two;
use crate::tensor::{init_param, ParamStore, Prng, Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum LayerError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Bfno,
    Fno,
    Conv,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BFNO" => Some(Variant::Bfno),
            "FNO" => Some(Variant::Fno),
            "CONV" => Some(Variant::Conv),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bfno => "BFNO",
            Variant::Fno => "FNO",
            Variant::Conv => "CONV",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KernelSharing {
    /// One complex kernel per channel and frequency.
    #[default]
    PerChannel,
    /// One complex kernel per frequency, broadcast over channels.
    Shared,
}

impl KernelSharing {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per-channel" => Some(KernelSharing::PerChannel),
            "shared-across-channels" | "shared" => Some(KernelSharing::Shared),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelSharing::PerChannel => "per-channel",
            KernelSharing::Shared => "shared-across-channels",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeFunctionConfig {
    /// Number of spectral layers (N).
    pub layers: usize,
    /// Branches per BFNO layer (L).
    pub branches: usize,
    pub dim_g: usize,
    /// Channels of the data the state is built from.
    pub in_channels: usize,
    /// Extra zero channels appended to the initial state.
    pub augment: usize,
    pub activation: Activation,
    /// Apply the activation after the last spectral layer too. Off by
    /// default: the last layer feeds the linear decoder directly.
    pub activate_last: bool,
    pub variant: Variant,
    pub kernel_sharing: KernelSharing,
    /// Retained modes per axis for the FNO variant; `None` keeps all.
    pub fno_modes: Option<usize>,
    /// Hidden width of the convolutional baseline; `None` uses `dim_g`.
    pub conv_width: Option<usize>,
    pub height: usize,
    pub width: usize,
}

impl Default for OdeFunctionConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            branches: 2,
            dim_g: 16,
            in_channels: 1,
            augment: 0,
            activation: Activation::Relu,
            activate_last: false,
            variant: Variant::Bfno,
            kernel_sharing: KernelSharing::PerChannel,
            fno_modes: None,
            conv_width: None,
            height: 28,
            width: 28,
        }
    }
}

impl OdeFunctionConfig {
    /// Channels of the ODE state (data plus augmentation).
    pub fn state_channels(&self) -> usize {
        self.in_channels + self.augment
    }

    pub fn padded(&self) -> (usize, usize) {
        (next_power_of_two(self.height), next_power_of_two(self.width))
    }

    /// Largest admissible FNO mode count for the padded grid.
    pub fn max_fno_modes(&self) -> usize {
        let (ph, pw) = self.padded();
        (pw / 2 + 1).min(ph / 2 + 1)
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        let bad = |m: String| Err(LayerError::Config(m));
        if self.branches == 0 {
            return bad("L must be at least 1".into());
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return bad("input extents must be positive".into());
        }
        if self.dim_g < self.state_channels() {
            return bad(format!(
                "dim_g = {} is smaller than the state width {}",
                self.dim_g,
                self.state_channels()
            ));
        }
        if let Some(m) = self.fno_modes {
            if m == 0 || m > self.max_fno_modes() {
                return bad(format!("fno.modes = {m} outside 1..={}", self.max_fno_modes()));
            }
        }
        if self.conv_width == Some(0) {
            return bad("conv.width must be positive".into());
        }
        Ok(())
    }
}

/// Leaves for every store entry, in store order.
pub fn bind_params(tape: &mut Tape, store: &ParamStore, requires_grad: bool) -> Vec<Var> {
    store.tensors().iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
}

/// Appends `extra` zero channels to a `[c, h, w]` tensor.
pub fn augment_state(x: &Tensor, extra: usize) -> Tensor {
    if extra == 0 {
        return x.clone();
    }
    let mut shape = x.shape().to_vec();
    let per = x.len() / shape[0];
    shape[0] += extra;
    let mut data = x.data().to_vec();
    data.resize(data.len() + extra * per, 0.0);
    Tensor::new(shape, data).expect("extended consistently")
}

/// Kernel initialization: N(0, 0.02) real and imaginary parts, DC bin 1+0i.
fn init_kernel(shape: &[usize], dc_stride: usize, rng: &mut Prng) -> (Tensor, Tensor) {
    let n: usize = shape.iter().product();
    let mut re: Vec<f64> = (0..n).map(|_| 0.02 * rng.normal()).collect();
    let mut im: Vec<f64> = (0..n).map(|_| 0.02 * rng.normal()).collect();
    for i in (0..n).step_by(dc_stride) {
        re[i] = 1.0;
        im[i] = 0.0;
    }
    (
        Tensor::new(shape.to_vec(), re).expect("shape product"),
        Tensor::new(shape.to_vec(), im).expect("shape product"),
    )
}

/// Tape variables of one BFNO layer.
#[derive(Clone, Debug)]
pub struct BfnoLayerVars {
    /// `(re, im)` per branch.
    pub kernels: Vec<(Var, Var)>,
    /// `[C, L]` branch aggregator.
    pub agg: Var,
    /// `[C, C]` pointwise transform.
    pub w: Var,
}

/// Tape variables of one FNO layer.
#[derive(Clone, Debug)]
pub struct FnoLayerVars {
    pub kre: Var,
    pub kim: Var,
    pub modes: usize,
    pub w: Var,
}

/// Appends the time channel, zero-pads to `ph x pw`, and maps
/// `C_h + 1 -> dim_g` pointwise.
pub fn encode(tape: &mut Tape, h: Var, t: f64, w: Var, b: Var, ph: usize, pw: usize) -> Result<Var, LayerError> {
    let x = tape.pad_with_time(h, t, ph, pw)?;
    Ok(tape.channel_map(w, Some(b), x)?)
}

/// Per-branch complex products with the spectrum, mixed per channel by the
/// real aggregator.
pub fn dynamic_global_conv(tape: &mut Tape, spec: Var, kernels: &[(Var, Var)], agg: Var) -> Result<Var, LayerError> {
    let cols = tape.real(agg).shape().get(1).copied().unwrap_or(0);
    if kernels.len() != cols {
        return Err(LayerError::Config(format!(
            "{} kernels for an aggregator with {cols} branches",
            kernels.len()
        )));
    }
    let mut branches = Vec::with_capacity(kernels.len());
    for &(re, im) in kernels {
        branches.push(tape.spectral_mul(spec, re, im)?);
    }
    Ok(tape.branch_aggregate(&branches, agg)?)
}

pub fn bfno_layer(tape: &mut Tape, g: Var, p: &BfnoLayerVars, act: Activation) -> Result<Var, LayerError> {
    let shape = tape.real(g).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let spec = tape.rfft2(g)?;
    let mixed = dynamic_global_conv(tape, spec, &p.kernels, p.agg)?;
    let mixed = tape.hermitian_project(mixed, h, w)?;
    let spatial = tape.irfft2(mixed, h, w)?;
    let local = tape.channel_map(p.w, None, g)?;
    let sum = tape.add(spatial, local)?;
    Ok(tape.activation(sum, act)?)
}

pub fn fno_layer(tape: &mut Tape, g: Var, p: &FnoLayerVars, act: Activation) -> Result<Var, LayerError> {
    let shape = tape.real(g).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let spec = tape.rfft2(g)?;
    let kept = tape.mode_mul(spec, p.kre, p.kim, p.modes)?;
    let kept = tape.hermitian_project(kept, h, w)?;
    let spatial = tape.irfft2(kept, h, w)?;
    let local = tape.channel_map(p.w, None, g)?;
    let sum = tape.add(spatial, local)?;
    Ok(tape.activation(sum, act)?)
}

/// Pointwise `dim_g -> C_h` map followed by cropping to `h x w`.
pub fn decode(tape: &mut Tape, g: Var, w: Var, b: Var, h: usize, wd: usize) -> Result<Var, LayerError> {
    let y = tape.channel_map(w, Some(b), g)?;
    Ok(tape.crop(y, h, wd)?)
}

/// Three 3x3 convolutions, each fed the time channel; the activation
/// follows the first two.
pub fn conv_odefunc(tape: &mut Tape, h: Var, t: f64, convs: &[(Var, Var); 3], act: Activation) -> Result<Var, LayerError> {
    let shape = tape.real(h).shape().to_vec();
    let (hh, ww) = (shape[1], shape[2]);
    let mut x = h;
    for (i, &(w, b)) in convs.iter().enumerate() {
        let xt = tape.pad_with_time(x, t, hh, ww)?;
        x = tape.conv3x3(xt, w, b)?;
        if i < 2 {
            x = tape.activation(x, act)?;
        }
    }
    Ok(x)
}

#[derive(Clone, Debug)]
struct BfnoSlots {
    kernels: Vec<(usize, usize)>,
    agg: usize,
    w: usize,
}

#[derive(Clone, Debug)]
struct FnoSlots {
    kre: usize,
    kim: usize,
    w: usize,
}

#[derive(Clone, Debug)]
enum Body {
    Bfno(Vec<BfnoSlots>),
    Fno { modes: usize, layers: Vec<FnoSlots> },
    Conv([(usize, usize); 3]),
}

/// An ODE function `(h, t) -> dh/dt` whose parameters are registered in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OdeFunction {
    cfg: OdeFunctionConfig,
    enc: Option<(usize, usize)>,
    dec: Option<(usize, usize)>,
    body: Body,
    first_slot: usize,
    last_slot: usize,
}

impl OdeFunction {
    /// Registers freshly initialized parameters under `prefix` and returns
    /// the function bound to those slots.
    pub fn init(cfg: OdeFunctionConfig, store: &mut ParamStore, prefix: &str, rng: &mut Prng) -> Result<Self, LayerError> {
        cfg.validate()?;
        let first_slot = store.len();
        let (ph, pw) = cfg.padded();
        let wh = pw / 2 + 1;
        let c = cfg.dim_g;
        let ch = cfg.state_channels();
        let name = |s: &str| format!("{prefix}{s}");
        let mut enc = None;
        let mut dec = None;
        let body = if cfg.variant == Variant::Conv {
            let width = cfg.conv_width.unwrap_or(cfg.dim_g);
            let dims = [(ch + 1, width), (width + 1, width), (width + 1, ch)];
            let mut slots = [(0, 0); 3];
            for (i, &(cin, cout)) in dims.iter().enumerate() {
                let w = init_param(&[cout, cin, 3, 3], cin * 9, rng)?;
                let wi = store.insert(name(&format!("conv{i}.w")), w)?;
                let bi = store.insert(name(&format!("conv{i}.b")), Tensor::zeros(&[cout]))?;
                slots[i] = (wi, bi);
            }
            Body::Conv(slots)
        } else {
            let ew = store.insert(name("enc.w"), init_param(&[c, ch + 1], ch + 1, rng)?)?;
            let eb = store.insert(name("enc.b"), Tensor::zeros(&[c]))?;
            enc = Some((ew, eb));
            let body = match cfg.variant {
                Variant::Bfno => {
                    let (kshape, dc_stride) = match cfg.kernel_sharing {
                        KernelSharing::PerChannel => (vec![c, ph, wh], ph * wh),
                        KernelSharing::Shared => (vec![ph, wh], ph * wh),
                    };
                    let mut layers = Vec::with_capacity(cfg.layers);
                    for k in 0..cfg.layers {
                        let mut kernels = Vec::with_capacity(cfg.branches);
                        for i in 0..cfg.branches {
                            let (re, im) = init_kernel(&kshape, dc_stride, rng);
                            let ri = store.insert(name(&format!("layer{k}.kernel_re.{i}")), re)?;
                            let ii = store.insert(name(&format!("layer{k}.kernel_im.{i}")), im)?;
                            kernels.push((ri, ii));
                        }
                        let agg = init_param(&[c, cfg.branches], cfg.branches, rng)?;
                        let agg = store.insert(name(&format!("layer{k}.agg")), agg)?;
                        let w = store.insert(name(&format!("layer{k}.w")), init_param(&[c, c], c, rng)?)?;
                        layers.push(BfnoSlots { kernels, agg, w });
                    }
                    Body::Bfno(layers)
                }
                Variant::Fno => {
                    let modes = cfg.fno_modes.unwrap_or_else(|| cfg.max_fno_modes());
                    let rows = kept_rows(ph, modes).len();
                    let mut layers = Vec::with_capacity(cfg.layers);
                    for k in 0..cfg.layers {
                        let (re, im) = init_kernel(&[c, rows, modes], rows * modes, rng);
                        let kre = store.insert(name(&format!("layer{k}.kernel_re")), re)?;
                        let kim = store.insert(name(&format!("layer{k}.kernel_im")), im)?;
                        let w = store.insert(name(&format!("layer{k}.w")), init_param(&[c, c], c, rng)?)?;
                        layers.push(FnoSlots { kre, kim, w });
                    }
                    Body::Fno { modes, layers }
                }
                Variant::Conv => unreachable!(),
            };
            let dw = store.insert(name("dec.w"), init_param(&[ch, c], c, rng)?)?;
            let db = store.insert(name("dec.b"), Tensor::zeros(&[ch]))?;
            dec = Some((dw, db));
            body
        };
        Ok(Self { cfg, enc, dec, body, first_slot, last_slot: store.len() })
    }

    pub fn config(&self) -> &OdeFunctionConfig {
        &self.cfg
    }

    /// Store slots owned by this function, as a contiguous range.
    pub fn slots(&self) -> std::ops::Range<usize> {
        self.first_slot..self.last_slot
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.slots().map(|i| store.tensor(i).len()).sum()
    }

    fn layer_act(&self, k: usize) -> Activation {
        if k + 1 == self.cfg.layers && !self.cfg.activate_last {
            Activation::Identity
        } else {
            self.cfg.activation
        }
    }

    /// Records `dh/dt = f(h, t)` for a state of shape
    /// `[state_channels, height, width]`. `params` are the store leaves from
    /// [`bind_params`].
    pub fn eval(&self, tape: &mut Tape, params: &[Var], h: Var, t: f64) -> Result<Var, LayerError> {
        let p = |i: usize| params[i];
        let (ph, pw) = self.cfg.padded();
        match &self.body {
            Body::Conv(slots) => {
                let convs = slots.map(|(w, b)| (p(w), p(b)));
                conv_odefunc(tape, h, t, &convs, self.cfg.activation)
            }
            body => {
                let (ew, eb) = self.enc.expect("spectral bodies have an encoder");
                let mut g = encode(tape, h, t, p(ew), p(eb), ph, pw)?;
                match body {
                    Body::Bfno(layers) => {
                        for (k, l) in layers.iter().enumerate() {
                            let vars = BfnoLayerVars {
                                kernels: l.kernels.iter().map(|&(r, i)| (p(r), p(i))).collect(),
                                agg: p(l.agg),
                                w: p(l.w),
                            };
                            g = bfno_layer(tape, g, &vars, self.layer_act(k))?;
                        }
                    }
                    Body::Fno { modes, layers } => {
                        for (k, l) in layers.iter().enumerate() {
                            let vars = FnoLayerVars { kre: p(l.kre), kim: p(l.kim), modes: *modes, w: p(l.w) };
                            g = fno_layer(tape, g, &vars, self.layer_act(k))?;
                        }
                    }
                    Body::Conv(_) => unreachable!(),
                }
                let (dw, db) = self.dec.expect("spectral bodies have a decoder");
                decode(tape, g, p(dw), p(db), self.cfg.height, self.cfg.width)
            }
        }
    }

    /// Untaped convenience evaluation.
    pub fn eval_tensor(&self, store: &ParamStore, h: &Tensor, t: f64) -> Result<Tensor, LayerError> {
        let mut tape = Tape::new();
        let params = bind_params(&mut tape, store, false);
        let hv = tape.leaf(h.clone(), false);
        let out = self.eval(&mut tape, &params, hv, t)?;
        Ok(tape.real(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{
        circular_convolve_2d, hermitian_extend, idft2_naive, irfft_2d, rfft_2d, SpectrumTensor,
    };

    fn rand(shape: &[usize], rng: &mut Prng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn matmul_channels(w: &Tensor, x: &Tensor) -> Tensor {
        let (co, ci) = (w.shape()[0], w.shape()[1]);
        let p = x.len() / ci;
        let mut out = vec![0.0; co * p];
        for o in 0..co {
            for i in 0..ci {
                for j in 0..p {
                    out[o * p + j] += w.data()[o * ci + i] * x.data()[i * p + j];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = co;
        Tensor::new(shape, out).unwrap()
    }

    fn small_cfg() -> OdeFunctionConfig {
        OdeFunctionConfig { layers: 2, branches: 2, dim_g: 8, height: 8, width: 8, ..Default::default() }
    }

    /// Reference BFNO layer from the spectral module and plain loops.
    fn reference_bfno(g: &Tensor, kernels: &[(Tensor, Tensor)], agg: &Tensor, w: &Tensor, act: Activation) -> Tensor {
        let (c, h, wd) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let s = rfft_2d(g).unwrap();
        let l = kernels.len();
        let mut mixed = SpectrumTensor::zeros(s.shape());
        let per = s.len() / c;
        for (i, (kr, ki)) in kernels.iter().enumerate() {
            for j in 0..s.len() {
                let k = j % kr.len();
                let f = agg.data()[(j / per) * l + i];
                let re = kr.data()[k] * s.re[j] - ki.data()[k] * s.im[j];
                let im = kr.data()[k] * s.im[j] + ki.data()[k] * s.re[j];
                mixed.re[j] += f * re;
                mixed.im[j] += f * im;
            }
        }
        // the inverse of a half spectrum reads only the Hermitian part
        let spatial = irfft_2d(&mixed, h, wd).unwrap();
        let mut sum = matmul_channels(w, g);
        sum.axpy(1.0, &spatial);
        sum.map(|v| act.apply(v))
    }

    #[test]
    fn encode_appends_time_channel() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::full(&[1, 4, 4], 3.0), false);
        let eye = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let zb = tape.leaf(Tensor::zeros(&[2]), false);
        let g = encode(&mut tape, h, 0.5, eye, zb, 4, 4).unwrap();
        let out = tape.real(g);
        assert_eq!(out.shape(), &[2, 4, 4]);
        assert!(out.data()[..16].iter().all(|&v| v == 3.0));
        assert!(out.data()[16..].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn encode_pads_to_power_of_two_and_decode_crops_back() {
        let cfg = OdeFunctionConfig { dim_g: 47, layers: 3, ..Default::default() };
        let mut store = ParamStore::new();
        let f = OdeFunction::init(cfg, &mut store, "", &mut Prng::new(0)).unwrap();
        let mut tape = Tape::new();
        let params = bind_params(&mut tape, &store, false);
        let (ew, eb) = f.enc.unwrap();
        let h = tape.leaf(Tensor::zeros(&[1, 28, 28]), false);
        let g = encode(&mut tape, h, 0.1, params[ew], params[eb], 32, 32).unwrap();
        assert_eq!(tape.real(g).shape(), &[47, 32, 32]);
        let (dw, db) = f.dec.unwrap();
        let y = decode(&mut tape, g, params[dw], params[db], 28, 28).unwrap();
        assert_eq!(tape.real(y).shape(), &[1, 28, 28]);
    }

    #[test]
    fn identity_encoder_at_t0_reproduces_h() {
        let mut rng = Prng::new(1);
        let h0 = rand(&[1, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let h = tape.leaf(h0.clone(), false);
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let g = encode(&mut tape, h, 0.0, w, b, 4, 4).unwrap();
        assert_eq!(&tape.real(g).data()[..16], h0.data());
        assert!(tape.real(g).data()[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dynamic_global_conv_identity_and_zero() {
        let mut rng = Prng::new(2);
        let x = rand(&[3, 4, 8], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let s = tape.rfft2(xv).unwrap();
        let one = tape.leaf(Tensor::full(&[3, 4, 5], 1.0), false);
        let zero = tape.leaf(Tensor::zeros(&[3, 4, 5]), false);
        let agg = tape.leaf(Tensor::full(&[3, 1], 1.0), false);
        let out = dynamic_global_conv(&mut tape, s, &[(one, zero)], agg).unwrap();
        assert!(tape.spec(out).max_abs_diff(tape.spec(s)) < 1e-15);
        let out = dynamic_global_conv(&mut tape, s, &[(zero, zero)], agg).unwrap();
        assert!(tape.spec(out).re.iter().chain(&tape.spec(out).im).all(|&v| v == 0.0));
        assert!(matches!(
            dynamic_global_conv(&mut tape, s, &[(one, zero), (one, zero)], agg),
            Err(LayerError::Config(_))
        ));
    }

    #[test]
    fn single_branch_is_circular_convolution() {
        let mut rng = Prng::new(3);
        for _ in 0..20 {
            let (h, w) = (8, 8);
            let x = rand(&[1, h, w], &mut rng);
            let kspatial = rand(&[1, h, w], &mut rng);
            let ks = rfft_2d(&kspatial).unwrap();
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), false);
            let s = tape.rfft2(xv).unwrap();
            let kr = tape.leaf(Tensor::new(ks.shape().to_vec(), ks.re.clone()).unwrap(), false);
            let ki = tape.leaf(Tensor::new(ks.shape().to_vec(), ks.im.clone()).unwrap(), false);
            let agg = tape.leaf(Tensor::full(&[1, 1], 1.0), false);
            let out = dynamic_global_conv(&mut tape, s, &[(kr, ki)], agg).unwrap();
            let y = tape.irfft2(out, h, w).unwrap();
            let direct = circular_convolve_2d(x.data(), kspatial.data(), h, w);
            let err = tape.real(y).data().iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn bfno_layer_trivial_cases() {
        let mut rng = Prng::new(4);
        let g0 = rand(&[3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let g = tape.leaf(g0.clone(), false);
        let zk = tape.leaf(Tensor::zeros(&[3, 4, 3]), false);
        let zagg = tape.leaf(Tensor::zeros(&[3, 1]), false);
        let zw = tape.leaf(Tensor::zeros(&[3, 3]), false);
        let p = BfnoLayerVars { kernels: vec![(zk, zk)], agg: zagg, w: zw };
        let y = bfno_layer(&mut tape, g, &p, Activation::Relu).unwrap();
        assert!(tape.real(y).data().iter().all(|&v| v == 0.0));

        let mut eye = Tensor::zeros(&[3, 3]);
        (0..3).for_each(|i| eye.set(&[i, i], 1.0));
        let eye = tape.leaf(eye, false);
        let p = BfnoLayerVars { kernels: vec![(zk, zk)], agg: zagg, w: eye };
        let y = bfno_layer(&mut tape, g, &p, Activation::Identity).unwrap();
        assert!(tape.real(y).max_abs_diff(&g0) < 1e-15);
    }

    #[test]
    fn bfno_layer_matches_reference_pipeline() {
        let mut rng = Prng::new(5);
        for sharing in [KernelSharing::PerChannel, KernelSharing::Shared] {
            for _ in 0..5 {
                let (c, h, w, l) = (4, 8, 16, 3);
                let g0 = rand(&[c, h, w], &mut rng);
                let kshape: Vec<usize> = match sharing {
                    KernelSharing::PerChannel => vec![c, h, w / 2 + 1],
                    KernelSharing::Shared => vec![h, w / 2 + 1],
                };
                let kernels: Vec<(Tensor, Tensor)> = (0..l).map(|_| (rand(&kshape, &mut rng), rand(&kshape, &mut rng))).collect();
                let agg = rand(&[c, l], &mut rng);
                let wt = rand(&[c, c], &mut rng);
                let mut tape = Tape::new();
                let g = tape.leaf(g0.clone(), false);
                let kv = kernels.iter().map(|(r, i)| (tape.leaf(r.clone(), false), tape.leaf(i.clone(), false))).collect();
                let p = BfnoLayerVars { kernels: kv, agg: tape.leaf(agg.clone(), false), w: tape.leaf(wt.clone(), false) };
                let y = bfno_layer(&mut tape, g, &p, Activation::Tanh).unwrap();
                let r = reference_bfno(&g0, &kernels, &agg, &wt, Activation::Tanh);
                assert!(tape.real(y).max_abs_diff(&r) < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_path_is_real() {
        let mut rng = Prng::new(6);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (c, h, w) = (2, 8, 8);
            let g0 = rand(&[c, h, w], &mut rng);
            let mut tape = Tape::new();
            let g = tape.leaf(g0, false);
            let kernels: Vec<(Var, Var)> = (0..2)
                .map(|_| {
                    let (a, b) = (rand(&[c, h, 5], &mut rng), rand(&[c, h, 5], &mut rng));
                    (tape.leaf(a, false), tape.leaf(b, false))
                })
                .collect();
            let agg = tape.leaf(rand(&[c, 2], &mut rng), false);
            let s = tape.rfft2(g).unwrap();
            let mixed = dynamic_global_conv(&mut tape, s, &kernels, agg).unwrap();
            let mixed = tape.hermitian_project(mixed, h, w).unwrap();
            let spec = tape.spec(mixed);
            for ch in 0..c {
                let r = ch * h * 5..(ch + 1) * h * 5;
                let full = hermitian_extend(&spec.re[r.clone()], &spec.im[r], h, w);
                let x = idft2_naive(&full, h, w);
                worst = worst.max(x.iter().map(|z| z.im.abs()).fold(0.0, f64::max));
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn spectral_path_commutes_with_circular_shift() {
        let mut rng = Prng::new(7);
        let (c, h, w) = (2, 8, 8);
        let g0 = rand(&[c, h, w], &mut rng);
        let kr = rand(&[c, h, 5], &mut rng);
        let ki = rand(&[c, h, 5], &mut rng);
        let agg = rand(&[c, 1], &mut rng);
        let shift = |x: &Tensor, di: usize, dj: usize| {
            let mut out = Tensor::zeros(x.shape());
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out.set(&[ch, (i + di) % h, (j + dj) % w], x.get(&[ch, i, j]));
                    }
                }
            }
            out
        };
        let path = |x: &Tensor| {
            let mut tape = Tape::new();
            let g = tape.leaf(x.clone(), false);
            let kv = (tape.leaf(kr.clone(), false), tape.leaf(ki.clone(), false));
            let a = tape.leaf(agg.clone(), false);
            let s = tape.rfft2(g).unwrap();
            let m = dynamic_global_conv(&mut tape, s, &[kv], a).unwrap();
            let m = tape.hermitian_project(m, h, w).unwrap();
            let y = tape.irfft2(m, h, w).unwrap();
            tape.real(y).clone()
        };
        let a = path(&shift(&g0, 3, 5));
        let b = shift(&path(&g0), 3, 5);
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn full_mode_fno_equals_single_branch_bfno() {
        let mut rng = Prng::new(8);
        let (c, h, w) = (3, 8, 8);
        let g0 = rand(&[c, h, w], &mut rng);
        let kr = rand(&[c, h, 5], &mut rng);
        let ki = rand(&[c, h, 5], &mut rng);
        let wt = rand(&[c, c], &mut rng);
        let mut tape = Tape::new();
        let g = tape.leaf(g0, false);
        let (r, i, wv) = (tape.leaf(kr, false), tape.leaf(ki, false), tape.leaf(wt, false));
        let one = tape.leaf(Tensor::full(&[c, 1], 1.0), false);
        let a = bfno_layer(&mut tape, g, &BfnoLayerVars { kernels: vec![(r, i)], agg: one, w: wv }, Activation::Relu).unwrap();
        let b = fno_layer(&mut tape, g, &FnoLayerVars { kre: r, kim: i, modes: 5, w: wv }, Activation::Relu).unwrap();
        assert!(tape.real(a).max_abs_diff(tape.real(b)) < 1e-12);
    }

    #[test]
    fn fno_layer_dc_only_is_spatially_constant() {
        let mut rng = Prng::new(9);
        let (c, h, w) = (2, 8, 8);
        let mut tape = Tape::new();
        let g = tape.leaf(rand(&[c, h, w], &mut rng), false);
        let kr = tape.leaf(rand(&[c, 1, 1], &mut rng), false);
        let ki = tape.leaf(rand(&[c, 1, 1], &mut rng), false);
        let zw = tape.leaf(Tensor::zeros(&[c, c]), false);
        let y = fno_layer(&mut tape, g, &FnoLayerVars { kre: kr, kim: ki, modes: 1, w: zw }, Activation::Identity).unwrap();
        for ch in 0..c {
            let plane = &tape.real(y).data()[ch * h * w..(ch + 1) * h * w];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
        let bad = FnoLayerVars { kre: kr, kim: ki, modes: 6, w: zw };
        assert!(fno_layer(&mut tape, g, &bad, Activation::Identity).is_err());
    }

    #[test]
    fn fno_layer_matches_reference_pipeline() {
        let mut rng = Prng::new(10);
        let (c, h, w, m) = (2, 8, 8, 3);
        let rows = kept_rows(h, m);
        let g0 = rand(&[c, h, w], &mut rng);
        let kr = rand(&[c, rows.len(), m], &mut rng);
        let ki = rand(&[c, rows.len(), m], &mut rng);
        let wt = rand(&[c, c], &mut rng);
        let mut tape = Tape::new();
        let g = tape.leaf(g0.clone(), false);
        let p = FnoLayerVars { kre: tape.leaf(kr.clone(), false), kim: tape.leaf(ki.clone(), false), modes: m, w: tape.leaf(wt.clone(), false) };
        let y = fno_layer(&mut tape, g, &p, Activation::Relu).unwrap();
        // embed the truncated kernel in a full half-spectrum kernel
        let mut fr = Tensor::zeros(&[c, h, 5]);
        let mut fi = Tensor::zeros(&[c, h, 5]);
        for ch in 0..c {
            for (r, &k1) in rows.iter().enumerate() {
                for k2 in 0..m {
                    fr.set(&[ch, k1, k2], kr.get(&[ch, r, k2]));
                    fi.set(&[ch, k1, k2], ki.get(&[ch, r, k2]));
                }
            }
        }
        let r = reference_bfno(&g0, &[(fr, fi)], &Tensor::full(&[c, 1], 1.0), &wt, Activation::Relu);
        assert!(tape.real(y).max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = Prng::new(11);
        let (cin, cout, h, w) = (3, 2, 5, 6);
        let x = rand(&[cin, h, w], &mut rng);
        let k = rand(&[cout, cin, 3, 3], &mut rng);
        let b = rand(&[cout], &mut rng);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.leaf(x.clone(), false), tape.leaf(k.clone(), false), tape.leaf(b.clone(), false));
        let y = tape.conv3x3(xv, kv, bv).unwrap();
        let mut direct = Tensor::zeros(&[cout, h, w]);
        for o in 0..cout {
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let mut acc = b.data()[o];
                    for c in 0..cin {
                        for di in -1..=1i64 {
                            for dj in -1..=1i64 {
                                let (si, sj) = (i + di, j + dj);
                                if si >= 0 && si < h as i64 && sj >= 0 && sj < w as i64 {
                                    acc += k.get(&[o, c, (di + 1) as usize, (dj + 1) as usize]) * x.get(&[c, si as usize, sj as usize]);
                                }
                            }
                        }
                    }
                    direct.set(&[o, i as usize, j as usize], acc);
                }
            }
        }
        assert!(tape.real(y).max_abs_diff(&direct) < 1e-12);

        // a centre-tap kernel is a channel map
        let mut centre = Tensor::zeros(&[cout, cin, 3, 3]);
        let m = rand(&[cout, cin], &mut rng);
        for o in 0..cout {
            for c in 0..cin {
                centre.set(&[o, c, 1, 1], m.get(&[o, c]));
            }
        }
        let cv = tape.leaf(centre, false);
        let zb = tape.leaf(Tensor::zeros(&[cout]), false);
        let y = tape.conv3x3(xv, cv, zb).unwrap();
        assert!(tape.real(y).max_abs_diff(&matmul_channels(&m, &x)) < 1e-12);
    }

    #[test]
    fn zero_parameters_give_zero_field() {
        for variant in [Variant::Bfno, Variant::Fno, Variant::Conv] {
            let cfg = OdeFunctionConfig { variant, ..small_cfg() };
            let mut store = ParamStore::new();
            let f = OdeFunction::init(cfg, &mut store, "", &mut Prng::new(0)).unwrap();
            store.tensors_mut().iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
            let h = rand(&[1, 8, 8], &mut Prng::new(1));
            let y = f.eval_tensor(&store, &h, 0.3).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0), "{variant:?}");
        }
    }

    #[test]
    fn no_layers_is_decode_of_encode() {
        let cfg = OdeFunctionConfig { layers: 0, ..small_cfg() };
        let mut store = ParamStore::new();
        let f = OdeFunction::init(cfg, &mut store, "", &mut Prng::new(2)).unwrap();
        let h = rand(&[1, 8, 8], &mut Prng::new(3));
        let y = f.eval_tensor(&store, &h, 0.25).unwrap();
        let mut x = augment_state(&h, 1);
        x.data_mut()[64..].iter_mut().for_each(|v| *v = 0.25);
        let mut g = matmul_channels(store.get("enc.w").unwrap(), &x);
        let eb = store.get("enc.b").unwrap().clone();
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v += eb.data()[i / 64];
        }
        let r = matmul_channels(store.get("dec.w").unwrap(), &g);
        assert!(y.max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn mnist_shaped_function_is_deterministic_and_finite() {
        let cfg = OdeFunctionConfig { layers: 3, branches: 2, dim_g: 47, ..Default::default() };
        let run = || {
            let mut store = ParamStore::new();
            let f = OdeFunction::init(cfg.clone(), &mut store, "", &mut Prng::new(42)).unwrap();
            let h = rand(&[1, 28, 28], &mut Prng::new(43));
            f.eval_tensor(&store, &h, 0.5).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.shape(), &[1, 28, 28]);
        assert!(a.all_finite());
        assert_eq!(a, b);
    }

    #[test]
    fn extra_branch_adds_kernel_and_aggregator_column() {
        for sharing in [KernelSharing::PerChannel, KernelSharing::Shared] {
            let count = |l: usize| {
                let cfg = OdeFunctionConfig { branches: l, kernel_sharing: sharing, layers: 3, ..small_cfg() };
                let mut store = ParamStore::new();
                let f = OdeFunction::init(cfg, &mut store, "", &mut Prng::new(0)).unwrap();
                f.num_params(&store)
            };
            let (c, bins) = (8, 8 * 5);
            let per_layer = match sharing {
                KernelSharing::PerChannel => c * bins * 2 + c,
                KernelSharing::Shared => bins * 2 + c,
            };
            for l in 1..5 {
                assert_eq!(count(l + 1) - count(l), 3 * per_layer);
            }
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = OdeFunctionConfig { activation: Activation::Tanh, ..small_cfg() };
        let mut store = ParamStore::new();
        let f = OdeFunction::init(cfg, &mut store, "", &mut Prng::new(12)).unwrap();
        let mut rng = Prng::new(13);
        // generic encoder bias so no ReLU-style dead zones hide gradients
        store.get_mut("enc.b").unwrap().data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        let mut tape = Tape::new();
        let params = bind_params(&mut tape, &store, true);
        let h = tape.leaf(rand(&[1, 8, 8], &mut rng), false);
        let y = f.eval(&mut tape, &params, h, 0.4).unwrap();
        let probe = rand(&[1, 8, 8], &mut rng);
        let grads = tape.backward(y, Some(crate::autodiff::Value::Real(probe))).unwrap();
        for (i, v) in params.iter().enumerate() {
            let g = grads.real(*v).unwrap_or_else(|| panic!("{} has no gradient", store.name(i)));
            assert!(g.data().iter().any(|&x| x != 0.0), "{} gradient is zero", store.name(i));
            if store.name(i).contains("kernel") {
                let zeros = g.data().iter().filter(|&&x| x == 0.0).count();
                // imaginary parts of self-conjugate bins may vanish; nothing else
                assert!(zeros <= g.len() / 2, "{}: {zeros} zero entries", store.name(i));
            }
        }
    }

    #[test]
    fn augment_appends_zero_channels() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let y = augment_state(&x, 2);
        assert_eq!(y.shape(), &[3, 2, 2]);
        assert_eq!(y.sum(), 4.0);
    }

    #[test]
    fn config_validation() {
        let bad = OdeFunctionConfig { dim_g: 1, augment: 1, ..small_cfg() };
        assert!(bad.validate().is_err());
        let bad = OdeFunctionConfig { branches: 0, ..small_cfg() };
        assert!(bad.validate().is_err());
        let bad = OdeFunctionConfig { variant: Variant::Fno, fno_modes: Some(6), ..small_cfg() };
        assert!(bad.validate().is_err());
        assert!(small_cfg().validate().is_ok());
    }
}
