//! Dense row-major tensors, the deterministic generator, and the named
//! parameter registry.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but the buffer has {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("fan-in must be at least 1")]
    ZeroFanIn,
    #[error("parameter store is empty")]
    EmptyStore,
    #[error("parameter `{0}` is already registered")]
    DuplicateName(String),
    #[error("flat vector has {actual} values but the store expects {expected}")]
    FlatLength { expected: usize, actual: usize },
}

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Rank-1 tensor owning `values`.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same buffer under a new shape of equal size.
    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data)
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(
            index.len(),
            self.shape.len(),
            "index rank {} does not match tensor rank {}",
            index.len(),
            self.shape.len()
        );
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {index:?} out of bounds for shape {:?}", self.shape);
            off = off * n + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    /// `self += factor * other`; shapes must hold the same number of elements.
    pub fn axpy(&mut self, factor: f64, other: &Tensor) {
        assert_eq!(self.len(), other.len(), "axpy length mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.len(), other.len(), "max_abs_diff length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

/// Inner product over the common prefix, with independent partial sums so
/// the loop is not bound by add latency.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// xoshiro256** seeded through SplitMix64.
#[derive(Clone, Debug)]
pub struct Prng {
    state: [u64; 4],
    seed: u64,
}

/// One SplitMix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { state, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform on [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; consumes two draws per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift, slight bias is
    /// irrelevant at the sizes used here).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Fan-in uniform initialization on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_param(shape: &[usize], fan_in: usize, rng: &mut Prng) -> Result<Tensor, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    if fan_in == 0 {
        return Err(TensorError::ZeroFanIn);
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Ordered name -> tensor registry. Iteration and flattening follow
/// insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize, TensorError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(TensorError::DuplicateName(name));
        }
        self.names.push(name);
        self.tensors.push(value);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count over all entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Concatenates all entries in insertion order into a rank-1 tensor.
    pub fn flatten(&self) -> Result<Tensor, TensorError> {
        if self.is_empty() {
            return Err(TensorError::EmptyStore);
        }
        let mut flat = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            flat.extend_from_slice(t.data());
        }
        Ok(Tensor::from_vec(flat))
    }

    /// Inverse of [`flatten`](Self::flatten): overwrites every entry from `flat`.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), TensorError> {
        let expected = self.num_scalars();
        if flat.len() != expected {
            return Err(TensorError::FlatLength {
                expected,
                actual: flat.len(),
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Maps a flat coordinate back to (entry name, offset within entry).
    pub fn locate(&self, flat_index: usize) -> Option<(&str, usize)> {
        let mut off = 0;
        for (name, t) in self.iter() {
            if flat_index < off + t.len() {
                return Some((name, flat_index - off));
            }
            off += t.len();
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splitmix_reference_word() {
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn equal_seeds_equal_streams() {
        let mut a = Prng::new(42);
        let mut b = Prng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ() {
        assert_ne!(Prng::new(1).next_u64(), Prng::new(2).next_u64());
    }

    #[test]
    fn xoshiro_matches_reference_step() {
        // State expanded from seed 0 by SplitMix64, then one xoshiro256** step
        // written out longhand.
        let mut sm = 0u64;
        let s: Vec<u64> = (0..4).map(|_| splitmix64(&mut sm)).collect();
        let expected = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        assert_eq!(Prng::new(0).next_u64(), expected);
    }

    #[test]
    fn init_bounds_and_mean() {
        let mut rng = Prng::new(7);
        let t = init_param(&[2, 2], 4, &mut rng).unwrap();
        assert!(t.data().iter().all(|x| x.abs() <= 0.5));

        let big = init_param(&[100_000], 1, &mut rng).unwrap();
        let mean = big.sum() / big.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn init_is_deterministic_and_consumes_one_draw_per_entry() {
        let a = init_param(&[3, 5], 5, &mut Prng::new(9)).unwrap();
        let b = init_param(&[3, 5], 5, &mut Prng::new(9)).unwrap();
        assert_eq!(a, b);

        let mut r1 = Prng::new(9);
        init_param(&[3, 5], 5, &mut r1).unwrap();
        let mut r2 = Prng::new(9);
        for _ in 0..15 {
            r2.next_u64();
        }
        assert_eq!(r1.next_u64(), r2.next_u64());
    }

    #[test]
    fn init_rejects_zero_extent() {
        let mut rng = Prng::new(0);
        assert_eq!(
            init_param(&[2, 0], 4, &mut rng),
            Err(TensorError::ZeroExtent(vec![2, 0]))
        );
        assert_eq!(init_param(&[2], 0, &mut rng), Err(TensorError::ZeroFanIn));
    }

    #[test]
    fn flatten_orders_by_insertion() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        store.insert("b", Tensor::from_vec(vec![3.0, 4.0, 5.0])).unwrap();
        assert_eq!(store.flatten().unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(store.locate(3), Some(("b", 1)));
        assert!(store.insert("a", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn empty_store_cannot_flatten() {
        assert_eq!(ParamStore::new().flatten(), Err(TensorError::EmptyStore));
    }

    #[test]
    fn tensor_length_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let mut t = Tensor::zeros(&[2, 3]);
        t.set(&[1, 2], 4.0);
        assert_eq!(t.data()[5], 4.0);
        assert_eq!(t.get(&[1, 2]), 4.0);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(
            shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..4), 1..5),
            seed in any::<u64>(),
        ) {
            let mut rng = Prng::new(seed);
            let mut store = ParamStore::new();
            for (i, shape) in shapes.iter().enumerate() {
                let n: usize = shape.iter().product();
                store.insert(format!("p{i}"), init_param(shape, n, &mut rng).unwrap()).unwrap();
            }
            let flat = store.flatten().unwrap();
            let mut other = store.clone();
            for t in other.tensors_mut() {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
            other.unflatten(flat.data()).unwrap();
            prop_assert_eq!(&other, &store);
        }

        #[test]
        fn init_abs_sum_bound(dims in proptest::collection::vec(1usize..6, 1..4), fan_in in 1usize..50, seed in any::<u64>()) {
            let t = init_param(&dims, fan_in, &mut Prng::new(seed)).unwrap();
            let bound = t.len() as f64 / (fan_in as f64).sqrt();
            prop_assert!(t.data().iter().map(|x| x.abs()).sum::<f64>() <= bound);
        }
    }
}
