//! Real-input radix-2 FFTs over one or two trailing axes, their inverses,
//! and the O(n^2) reference transforms used to check them.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[k] = sum_j x[j] exp(-2 pi i jk / n)`, and the inverse carries `1/n`.
//! Only the non-redundant half of the last axis is stored (`n/2 + 1` bins).
//!
//! The inverse of a half spectrum reads only the real part of the
//! self-conjugate bins (DC and, for even `n`, Nyquist); equivalently it is
//! the inverse of the Hermitian projection of its input. The VJPs below are
//! stated for exactly that map.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::Tensor;

pub use num_complex::Complex64;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("transform extent {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },
    #[error("spectrum has {bins} bins along the half axis, expected {expected} for extent {n}")]
    BinMismatch { bins: usize, expected: usize, n: usize },
    #[error("tensor of rank {0} cannot be transformed over two axes")]
    RankTooLow(usize),
}

/// Half spectrum of a real signal, stored as separate real and imaginary
/// planes. The last axis holds `n/2 + 1` bins.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumTensor {
    shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl SpectrumTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_parts(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert!(re.len() == n && im.len() == n, "spectrum buffers do not match shape {shape:?}");
        Self { shape, re, im }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn get(&self, flat: usize) -> Complex64 {
        Complex64::new(self.re[flat], self.im[flat])
    }

    pub fn scale(&mut self, factor: f64) {
        self.re.iter_mut().for_each(|x| *x *= factor);
        self.im.iter_mut().for_each(|x| *x *= factor);
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &SpectrumTensor) {
        assert_eq!(self.len(), other.len(), "spectrum axpy length mismatch");
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            *a += factor * b;
        }
        for (a, b) in self.im.iter_mut().zip(&other.im) {
            *a += factor * b;
        }
    }

    pub fn max_abs_diff(&self, other: &SpectrumTensor) -> f64 {
        self.re
            .iter()
            .zip(&other.re)
            .chain(self.im.iter().zip(&other.im))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn is_power_of_two(n: usize) -> bool {
    n >= 1 && n & (n - 1) == 0
}

pub fn next_power_of_two(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

fn check_pow2(n: usize) -> Result<(), SpectralError> {
    if is_power_of_two(n) {
        Ok(())
    } else {
        Err(SpectralError::NotPowerOfTwo(n))
    }
}

/// Twiddles and bit-reversal table for an in-place complex transform of
/// length `n`.
struct FftPlan {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bitrev: Vec<usize>,
}

impl FftPlan {
    fn new(n: usize) -> Self {
        let half = n / 2;
        let cos = (0..half).map(|k| (2.0 * PI * k as f64 / n as f64).cos()).collect();
        let sin = (0..half).map(|k| (2.0 * PI * k as f64 / n as f64).sin()).collect();
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Self { n, cos, sin, bitrev }
    }

    /// Unnormalized in-place transform. `inverse` flips the exponent sign.
    fn run(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.n;
        debug_assert!(re.len() == n && im.len() == n);
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let wr = self.cos[k * stride];
                    let wi = sign * self.sin[k * stride];
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len *= 2;
        }
    }
}

impl FftPlan {
    /// Unnormalized transforms down every column of an `n x m` row-major
    /// block at once.
    fn run_columns(&self, re: &mut [f64], im: &mut [f64], m: usize, inverse: bool) {
        let n = self.n;
        debug_assert!(re.len() == n * m && im.len() == n * m);
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                let (lo, hi) = re.split_at_mut(j * m);
                lo[i * m..(i + 1) * m].swap_with_slice(&mut hi[..m]);
                let (lo, hi) = im.split_at_mut(j * m);
                lo[i * m..(i + 1) * m].swap_with_slice(&mut hi[..m]);
            }
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let wr = self.cos[k * stride];
                    let wi = sign * self.sin[k * stride];
                    let a = (start + k) * m;
                    let b = a + half * m;
                    let (rl, rh) = re.split_at_mut(b);
                    let (il, ih) = im.split_at_mut(b);
                    let (ra, rb) = (&mut rl[a..a + m], &mut rh[..m]);
                    let (ia, ib) = (&mut il[a..a + m], &mut ih[..m]);
                    for j in 0..m {
                        let tr = rb[j] * wr - ib[j] * wi;
                        let ti = rb[j] * wi + ib[j] * wr;
                        rb[j] = ra[j] - tr;
                        ib[j] = ia[j] - ti;
                        ra[j] += tr;
                        ia[j] += ti;
                    }
                }
            }
            len *= 2;
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<FftPlan>>> = RefCell::new(HashMap::new());
}

fn plan(n: usize) -> Rc<FftPlan> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| Rc::new(FftPlan::new(n)))
            .clone()
    })
}

/// Scratch for the half-length packed transforms.
#[derive(Default)]
struct Scratch {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Scratch {
    fn resize(&mut self, n: usize) {
        self.re.resize(n, 0.0);
        self.im.resize(n, 0.0);
    }
}

/// Real forward transform of `x` (length `n`, power of two) into `n/2+1`
/// bins, via a packed half-length complex transform.
fn rfft_line(x: &[f64], out_re: &mut [f64], out_im: &mut [f64], scratch: &mut Scratch) {
    let n = x.len();
    if n == 1 {
        out_re[0] = x[0];
        out_im[0] = 0.0;
        return;
    }
    let m = n / 2;
    scratch.resize(m);
    for j in 0..m {
        scratch.re[j] = x[2 * j];
        scratch.im[j] = x[2 * j + 1];
    }
    plan(m).run(&mut scratch.re, &mut scratch.im, false);
    let tw = plan(n);
    for k in 0..=m {
        let (zr, zi) = (scratch.re[k % m], scratch.im[k % m]);
        let (cr, ci) = (scratch.re[(m - k) % m], -scratch.im[(m - k) % m]);
        // even part (z + conj z')/2, odd part (z - conj z')/(2i)
        let er = 0.5 * (zr + cr);
        let ei = 0.5 * (zi + ci);
        let or = 0.5 * (zi - ci);
        let oi = -0.5 * (zr - cr);
        // twiddle exp(-2 pi i k / n)
        let (wr, wi) = if k < m { (tw.cos[k], -tw.sin[k]) } else { (-1.0, 0.0) };
        out_re[k] = er + or * wr - oi * wi;
        out_im[k] = ei + or * wi + oi * wr;
    }
}

/// Inverse of [`rfft_line`] with the `1/n` normalization. Imaginary parts
/// of the DC and Nyquist bins are ignored.
fn irfft_line(in_re: &[f64], in_im: &[f64], y: &mut [f64], scratch: &mut Scratch) {
    let n = y.len();
    if n == 1 {
        y[0] = in_re[0];
        return;
    }
    let m = n / 2;
    scratch.resize(m);
    let tw = plan(n);
    let bin = |k: usize| -> (f64, f64) {
        if k == 0 || k == m {
            (in_re[k], 0.0)
        } else {
            (in_re[k], in_im[k])
        }
    };
    for k in 0..m {
        let (xr, xi) = bin(k);
        let (cr, ci) = {
            let (r, i) = bin(m - k);
            (r, -i)
        };
        let er = 0.5 * (xr + cr);
        let ei = 0.5 * (xi + ci);
        let dr = 0.5 * (xr - cr);
        let di = 0.5 * (xi - ci);
        // odd part = d * exp(+2 pi i k / n)
        let (wr, wi) = (tw.cos[k], tw.sin[k]);
        let or = dr * wr - di * wi;
        let oi = dr * wi + di * wr;
        // Z = E + i O
        scratch.re[k] = er - oi;
        scratch.im[k] = ei + or;
    }
    plan(m).run(&mut scratch.re, &mut scratch.im, true);
    let norm = 1.0 / m as f64;
    for j in 0..m {
        y[2 * j] = scratch.re[j] * norm;
        y[2 * j + 1] = scratch.im[j] * norm;
    }
}

/// Direct O(n^2) DFT with the unnormalized forward convention.
pub fn dft_naive(signal: &[f64]) -> Vec<Complex64> {
    let n = signal.len();
    (0..n)
        .map(|k| {
            signal
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let angle = -2.0 * PI * ((j * k) % n) as f64 / n as f64;
                    Complex64::from_polar(x, angle)
                })
                .sum()
        })
        .collect()
}

/// Direct 2-D DFT of a real `h x w` image (row-major), full spectrum.
pub fn dft2_naive(image: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for k1 in 0..h {
        for k2 in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for j1 in 0..h {
                for j2 in 0..w {
                    let phase = ((j1 * k1) % h) as f64 / h as f64 + ((j2 * k2) % w) as f64 / w as f64;
                    acc += Complex64::from_polar(image[j1 * w + j2], -2.0 * PI * phase);
                }
            }
            out[k1 * w + k2] = acc;
        }
    }
    out
}

/// Direct 2-D inverse DFT (with `1/(hw)`) of a full complex spectrum.
pub fn idft2_naive(spectrum: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for j1 in 0..h {
        for j2 in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for k1 in 0..h {
                for k2 in 0..w {
                    let phase = ((j1 * k1) % h) as f64 / h as f64 + ((j2 * k2) % w) as f64 / w as f64;
                    acc += spectrum[k1 * w + k2] * Complex64::from_polar(1.0, 2.0 * PI * phase);
                }
            }
            out[j1 * w + j2] = acc * norm;
        }
    }
    out
}

/// Rebuilds the full `h x w` spectrum implied by a half spectrum
/// (`h x (w/2+1)`, one plane): stored bins are copied, missing bins are
/// conjugate mirrors.
pub fn hermitian_extend(re: &[f64], im: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let wh = w / 2 + 1;
    let mut full = vec![Complex64::new(0.0, 0.0); h * w];
    for k1 in 0..h {
        for k2 in 0..w {
            full[k1 * w + k2] = if k2 < wh {
                Complex64::new(re[k1 * wh + k2], im[k1 * wh + k2])
            } else {
                let m1 = (h - k1) % h;
                let m2 = w - k2;
                Complex64::new(re[m1 * wh + m2], -im[m1 * wh + m2])
            };
        }
    }
    full
}

/// Circular 2-D convolution computed directly, `O((hw)^2)`.
pub fn circular_convolve_2d(x: &[f64], k: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i1 in 0..h {
        for i2 in 0..w {
            let mut acc = 0.0;
            for j1 in 0..h {
                for j2 in 0..w {
                    let d1 = (i1 + h - j1) % h;
                    let d2 = (i2 + w - j2) % w;
                    acc += x[j1 * w + j2] * k[d1 * w + d2];
                }
            }
            out[i1 * w + i2] = acc;
        }
    }
    out
}

/// Real FFT along `axis`; that axis shrinks to `n/2+1` bins.
pub fn rfft_1d(signal: &Tensor, axis: usize) -> Result<SpectrumTensor, SpectralError> {
    let shape = signal.shape();
    if axis >= shape.len() {
        return Err(SpectralError::BadAxis { axis, rank: shape.len() });
    }
    let n = shape[axis];
    check_pow2(n)?;
    let nb = n / 2 + 1;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = nb;
    let mut out = SpectrumTensor::zeros(&out_shape);
    let mut line = vec![0.0; n];
    let (mut lr, mut li) = (vec![0.0; nb], vec![0.0; nb]);
    let mut scratch = Scratch::default();
    let x = signal.data();
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                line[j] = x[(o * n + j) * inner + i];
            }
            rfft_line(&line, &mut lr, &mut li, &mut scratch);
            for k in 0..nb {
                out.re[(o * nb + k) * inner + i] = lr[k];
                out.im[(o * nb + k) * inner + i] = li[k];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`rfft_1d`]; `n` is the original extent along `axis`.
pub fn irfft_1d(spec: &SpectrumTensor, n: usize, axis: usize) -> Result<Tensor, SpectralError> {
    let shape = spec.shape();
    if axis >= shape.len() {
        return Err(SpectralError::BadAxis { axis, rank: shape.len() });
    }
    check_pow2(n)?;
    let nb = n / 2 + 1;
    if shape[axis] != nb {
        return Err(SpectralError::BinMismatch { bins: shape[axis], expected: nb, n });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = n;
    let mut out = vec![0.0; outer * n * inner];
    let (mut lr, mut li) = (vec![0.0; nb], vec![0.0; nb]);
    let mut line = vec![0.0; n];
    let mut scratch = Scratch::default();
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..nb {
                lr[k] = spec.re[(o * nb + k) * inner + i];
                li[k] = spec.im[(o * nb + k) * inner + i];
            }
            irfft_line(&lr, &li, &mut line, &mut scratch);
            for j in 0..n {
                out[(o * n + j) * inner + i] = line[j];
            }
        }
    }
    Ok(Tensor::new(out_shape, out).expect("shape computed from input"))
}

fn split_2d(shape: &[usize]) -> Result<(usize, usize, usize), SpectralError> {
    if shape.len() < 2 {
        return Err(SpectralError::RankTooLow(shape.len()));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

/// Real 2-D FFT over the two trailing axes: rows first (real, halved),
/// then columns (complex).
pub fn rfft_2d(image: &Tensor) -> Result<SpectrumTensor, SpectralError> {
    let (lead, h, w) = split_2d(image.shape())?;
    check_pow2(h)?;
    check_pow2(w)?;
    let wh = w / 2 + 1;
    let mut out_shape = image.shape().to_vec();
    let r = out_shape.len();
    out_shape[r - 1] = wh;
    let mut out = SpectrumTensor::zeros(&out_shape);
    let x = image.data();
    let m = w / 2;
    let (mut zr, mut zi) = (vec![0.0; m.max(1) * h], vec![0.0; m.max(1) * h]);
    let mut scratch = Scratch::default();
    let half_plan = plan(m.max(1));
    let tw = plan(w);
    let col_plan = plan(h);
    for c in 0..lead {
        let plane = &x[c * h * w..(c + 1) * h * w];
        let base = c * h * wh;
        let (ore, oim) = (&mut out.re[base..base + h * wh], &mut out.im[base..base + h * wh]);
        if w == 1 {
            for row in 0..h {
                rfft_line(&plane[row..row + 1], &mut ore[row..row + 1], &mut oim[row..row + 1], &mut scratch);
            }
        } else {
            // packed rows, transposed so that each half-length transform
            // runs down a column of an m x h block
            for row in 0..h {
                for j in 0..m {
                    zr[j * h + row] = plane[row * w + 2 * j];
                    zi[j * h + row] = plane[row * w + 2 * j + 1];
                }
            }
            half_plan.run_columns(&mut zr, &mut zi, h, false);
            for k in 0..=m {
                let (p, q) = ((k % m) * h, ((m - k) % m) * h);
                let (wr, wi) = if k < m { (tw.cos[k], -tw.sin[k]) } else { (-1.0, 0.0) };
                for row in 0..h {
                    let (zr_k, zi_k) = (zr[p + row], zi[p + row]);
                    let (cr, ci) = (zr[q + row], -zi[q + row]);
                    let er = 0.5 * (zr_k + cr);
                    let ei = 0.5 * (zi_k + ci);
                    let or = 0.5 * (zi_k - ci);
                    let oi = -0.5 * (zr_k - cr);
                    ore[row * wh + k] = er + or * wr - oi * wi;
                    oim[row * wh + k] = ei + or * wi + oi * wr;
                }
            }
        }
        if h > 1 {
            col_plan.run_columns(ore, oim, wh, false);
        }
    }
    Ok(out)
}

/// Inverse of [`rfft_2d`] with `1/(hw)` normalization.
pub fn irfft_2d(spec: &SpectrumTensor, h: usize, w: usize) -> Result<Tensor, SpectralError> {
    let (lead, sh, swh) = split_2d(spec.shape())?;
    check_pow2(h)?;
    check_pow2(w)?;
    let wh = w / 2 + 1;
    if swh != wh {
        return Err(SpectralError::BinMismatch { bins: swh, expected: wh, n: w });
    }
    if sh != h {
        return Err(SpectralError::BinMismatch { bins: sh, expected: h, n: h });
    }
    let mut out_shape = spec.shape().to_vec();
    let r = out_shape.len();
    out_shape[r - 1] = w;
    let mut out = vec![0.0; lead * h * w];
    let (mut pr, mut pi) = (vec![0.0; h * wh], vec![0.0; h * wh]);
    let m = w / 2;
    let (mut zr, mut zi) = (vec![0.0; m.max(1) * h], vec![0.0; m.max(1) * h]);
    let col_plan = plan(h);
    let half_plan = plan(m.max(1));
    let tw = plan(w);
    let norm = 1.0 / (h * m.max(1)) as f64;
    for c in 0..lead {
        let base = c * h * wh;
        pr.copy_from_slice(&spec.re[base..base + h * wh]);
        pi.copy_from_slice(&spec.im[base..base + h * wh]);
        if h > 1 {
            col_plan.run_columns(&mut pr, &mut pi, wh, true);
        }
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        if w == 1 {
            for row in 0..h {
                plane[row] = pr[row] / h as f64;
            }
            continue;
        }
        for k in 0..m {
            let (wr, wi) = (tw.cos[k], tw.sin[k]);
            let q = m - k;
            for row in 0..h {
                let xr = pr[row * wh + k];
                let xi = if k == 0 { 0.0 } else { pi[row * wh + k] };
                let cr = pr[row * wh + q];
                let ci = if q == m { 0.0 } else { -pi[row * wh + q] };
                let er = 0.5 * (xr + cr);
                let ei = 0.5 * (xi + ci);
                let dr = 0.5 * (xr - cr);
                let di = 0.5 * (xi - ci);
                let or = dr * wr - di * wi;
                let oi = dr * wi + di * wr;
                zr[k * h + row] = er - oi;
                zi[k * h + row] = ei + or;
            }
        }
        half_plan.run_columns(&mut zr, &mut zi, h, true);
        for row in 0..h {
            for j in 0..m {
                plane[row * w + 2 * j] = zr[j * h + row] * norm;
                plane[row * w + 2 * j + 1] = zi[j * h + row] * norm;
            }
        }
    }
    Ok(Tensor::new(out_shape, out).expect("shape computed from input"))
}

/// Column weight of a half-spectrum bin: 1 for self-conjugate columns
/// (DC, and Nyquist when `w` is even), 2 otherwise.
fn column_weight(k2: usize, w: usize) -> f64 {
    if k2 == 0 || (w % 2 == 0 && k2 == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// VJP of [`rfft_2d`]: maps a cotangent on the half spectrum (real and
/// imaginary planes) back to the real input. Interior bins are halved and
/// the result is pushed through the inverse transform scaled by `hw`.
pub fn vjp_rfft_2d(cotangent: &SpectrumTensor, h: usize, w: usize) -> Result<Tensor, SpectralError> {
    let mut g = cotangent.clone();
    let wh = w / 2 + 1;
    let lines = g.len() / wh;
    for line in 0..lines {
        for k2 in 0..wh {
            let s = 1.0 / column_weight(k2, w);
            g.re[line * wh + k2] *= s;
            g.im[line * wh + k2] *= s;
        }
    }
    let mut x = irfft_2d(&g, h, w)?;
    let scale = (h * w) as f64;
    x.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(x)
}

/// VJP of [`irfft_2d`]: the forward transform of the cotangent, weighted
/// per column and scaled by `1/(hw)`.
pub fn vjp_irfft_2d(cotangent: &Tensor, h: usize, w: usize) -> Result<SpectrumTensor, SpectralError> {
    let mut s = rfft_2d(cotangent)?;
    let wh = w / 2 + 1;
    let norm = 1.0 / (h * w) as f64;
    let lines = s.len() / wh;
    for line in 0..lines {
        for k2 in 0..wh {
            let f = column_weight(k2, w) * norm;
            s.re[line * wh + k2] *= f;
            s.im[line * wh + k2] *= f;
        }
    }
    Ok(s)
}

/// VJP of [`rfft_1d`] along the last axis.
pub fn vjp_rfft_1d(cotangent: &SpectrumTensor, n: usize) -> Result<Tensor, SpectralError> {
    let shape = cotangent.shape();
    let mut as_2d = cotangent.clone();
    as_2d.shape = [&shape[..shape.len() - 1], &[1, shape[shape.len() - 1]]].concat();
    let x = vjp_rfft_2d(&as_2d, 1, n)?;
    let mut out_shape = shape.to_vec();
    *out_shape.last_mut().unwrap() = n;
    Ok(x.reshape(&out_shape).expect("same size"))
}

/// Projects every `h x (w/2+1)` plane onto the half spectra of real
/// signals: the self-conjugate columns are replaced by their Hermitian
/// part, `(S[k1] + conj S[-k1]) / 2`. The map is an orthogonal projection,
/// so it is its own VJP.
pub fn hermitian_project(spec: &mut SpectrumTensor, h: usize, w: usize) {
    let wh = w / 2 + 1;
    let planes = spec.len() / (h * wh);
    let cols: &[usize] = if w % 2 == 0 && w >= 2 { &[0, w / 2] } else { &[0] };
    for p in 0..planes {
        let base = p * h * wh;
        for &k2 in cols {
            for k1 in 0..=h / 2 {
                let m1 = (h - k1) % h;
                let a = base + k1 * wh + k2;
                let b = base + m1 * wh + k2;
                let re = 0.5 * (spec.re[a] + spec.re[b]);
                let im = 0.5 * (spec.im[a] - spec.im[b]);
                spec.re[a] = re;
                spec.im[a] = im;
                spec.re[b] = re;
                spec.im[b] = -im;
            }
        }
    }
}
