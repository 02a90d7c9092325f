//! IDX parsing, dataset loading and subsetting, and synthetic tasks.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Prng, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("truncated IDX header: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad IDX magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("IDX payload holds {got} bytes but the header declares {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("cannot take {requested} samples from {available}")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("synthetic data needs at least {classes} samples, got {n}")]
    TooFewSamples { n: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }
}

/// Reads the magic and big-endian extents; returns the header and the
/// payload offset.
pub fn parse_idx_header(bytes: &[u8]) -> Result<(IdxHeader, usize), DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated { needed: 4, got: bytes.len() });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    // unsigned-byte element type only
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] == 0 {
        return Err(DataError::BadMagic(magic));
    }
    let rank = bytes[3] as usize;
    let needed = 4 + 4 * rank;
    if bytes.len() < needed {
        return Err(DataError::Truncated { needed, got: bytes.len() });
    }
    let dims = (0..rank)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    Ok((IdxHeader { magic, dims }, needed))
}

/// Parses an unsigned-byte IDX stream into a tensor of raw byte values.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor, DataError> {
    let (header, offset) = parse_idx_header(bytes)?;
    let expected = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(DataError::SizeMismatch { expected: usize::MAX, got: bytes.len() - offset })?;
    let payload = &bytes[offset..];
    if payload.len() != expected {
        return Err(DataError::SizeMismatch { expected, got: payload.len() });
    }
    let data = payload.iter().map(|&b| f64::from(b)).collect();
    Ok(Tensor::new(header.dims, data).expect("size checked"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, c, h, w]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, name: impl Into<String>, split: Split) -> Result<Self, DataError> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(DataError::Inconsistent(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Inconsistent(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self { images, labels, classes, name: name.into(), split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> Tensor {
        let per: usize = self.sample_shape().iter().product();
        Tensor::new(self.sample_shape().to_vec(), self.images.data()[i * per..(i + 1) * per].to_vec()).expect("sample size")
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::new(shape, data).expect("sample size"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            name: self.name.clone(),
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Loads `<dir>/<name>/<split>-{images,labels}.idx`, scaling bytes to
/// `[0, 1]`.
pub fn load_idx_dataset(dir: &Path, name: &str, split: Split) -> Result<Dataset, DataError> {
    let base = dir.join(name);
    let images = read(&base.join(format!("{}-images.idx", split.name())))?;
    let labels = read(&base.join(format!("{}-labels.idx", split.name())))?;
    let (ih, _) = parse_idx_header(&images)?;
    if ih.magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic(ih.magic));
    }
    let (lh, _) = parse_idx_header(&labels)?;
    if lh.magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic(lh.magic));
    }
    let images = parse_idx(&images)?;
    let labels: Vec<usize> = parse_idx(&labels)?.data().iter().map(|&v| v as usize).collect();
    let (n, h, w) = (images.shape()[0], images.shape()[1], images.shape()[2]);
    let images = images.scale(1.0 / 255.0).reshape(&[n, 1, h, w]).expect("same size");
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(images, labels, classes, name, split)
}

/// Seeded class-stratified sample of `n` items in shuffled order. Each
/// class gets `floor(n * count / total)`; leftover slots go to the
/// classes with the largest remainders.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n > ds.len() {
        return Err(DataError::SubsetTooLarge { requested: n, available: ds.len() });
    }
    let mut rng = Prng::new(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let total = ds.len();
    let mut quota: Vec<usize> = by_class.iter().map(|c| n * c.len() / total).collect();
    let mut left = n - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ds.classes).collect();
    // largest remainder first, lower class index on ties
    order.sort_by_key(|&c| std::cmp::Reverse(n * by_class[c].len() % total));
    for c in order {
        if left == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    let mut picked = Vec::with_capacity(n);
    for (c, members) in by_class.iter_mut().enumerate() {
        rng.shuffle(members);
        picked.extend_from_slice(&members[..quota[c]]);
    }
    rng.shuffle(&mut picked);
    Ok(ds.select(&picked))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Two classes: a disk of radius 1 inside an annulus of radii 2 to 3.
    Rings,
    /// Four well-separated Gaussian blobs.
    Gaussians,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RINGS" => Some(SyntheticKind::Rings),
            "GAUSSIANS" => Some(SyntheticKind::Gaussians),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Rings => "RINGS",
            SyntheticKind::Gaussians => "GAUSSIANS",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            SyntheticKind::Rings => 2,
            SyntheticKind::Gaussians => 4,
        }
    }
}

const SYN: usize = 8;

/// Class centroids of the Gaussian task and the shared noise scale
/// (a tenth of the smallest centroid distance).
pub fn gaussian_centroids(seed: u64) -> (Vec<Vec<f64>>, f64) {
    let mut rng = Prng::new(seed ^ 0x6a09_e667_f3bc_c908);
    let k = SyntheticKind::Gaussians.classes();
    let centroids: Vec<Vec<f64>> = (0..k).map(|_| (0..SYN * SYN).map(|_| rng.uniform(0.25, 0.75)).collect()).collect();
    let mut dmin = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let d = centroids[i].iter().zip(&centroids[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            dmin = dmin.min(d);
        }
    }
    (centroids, dmin / 10.0)
}

/// Deterministic `1 x 8 x 8` synthetic datasets with balanced classes.
/// The same seed with different `split`s gives independent samples from
/// the same distribution.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, seed: u64, split: Split) -> Result<Dataset, DataError> {
    let classes = kind.classes();
    if n < classes {
        return Err(DataError::TooFewSamples { n, classes });
    }
    let stream = match split {
        Split::Train => 0,
        Split::Test => 0x9e37_79b9_7f4a_7c15,
    };
    let mut rng = Prng::new(seed ^ stream);
    let mut data = Vec::with_capacity(n * SYN * SYN);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    match kind {
        SyntheticKind::Rings => {
            let ramp = |k: usize| (k as f64 - 3.5) / 3.5;
            for &l in &labels {
                let r = if l == 0 { rng.uniform(0.0, 1.0) } else { rng.uniform(2.0, 3.0) };
                let theta = rng.uniform(0.0, std::f64::consts::TAU);
                let (u, v) = (r * theta.cos(), r * theta.sin());
                for i in 0..SYN {
                    for j in 0..SYN {
                        data.push(0.5 + (u * ramp(j) + v * ramp(i)) / 9.0);
                    }
                }
            }
        }
        SyntheticKind::Gaussians => {
            let (centroids, sigma) = gaussian_centroids(seed);
            for &l in &labels {
                for &c in &centroids[l] {
                    data.push((c + sigma * rng.normal()).clamp(0.0, 1.0));
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let images = Tensor::new(vec![n, 1, SYN, SYN], data).expect("sample size");
    let ds = Dataset::new(images, labels, classes, kind.name().to_ascii_lowercase(), split)?;
    Ok(ds.select(&order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        dims.iter().for_each(|d| b.extend_from_slice(&d.to_be_bytes()));
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn image_fixture() {
        let bytes = idx(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0, 128, 255, 64]);
        assert_eq!(bytes.len(), 20);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[0.0, 128.0, 255.0, 64.0]);
    }

    #[test]
    fn label_fixture() {
        let t = parse_idx(&idx(IDX_LABELS_MAGIC, &[3], &[1, 0, 9])).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 9.0]);
    }

    #[test]
    fn malformed_streams_map_to_distinct_errors() {
        let short = idx(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0, 1, 2]);
        assert!(matches!(parse_idx(&short), Err(DataError::SizeMismatch { expected: 4, got: 3 })));
        let long = idx(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0; 5]);
        assert!(matches!(parse_idx(&long), Err(DataError::SizeMismatch { .. })));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(DataError::Truncated { needed: 4, got: 3 })));
        assert!(matches!(parse_idx(&[0, 0, 8, 3, 0, 0, 0, 1]), Err(DataError::Truncated { needed: 16, .. })));
        assert!(matches!(parse_idx(&idx(0x0000_0903, &[1, 1, 1], &[0])), Err(DataError::BadMagic(0x0903))));
        assert!(matches!(parse_idx(&idx(0x0100_0801, &[1], &[0])), Err(DataError::BadMagic(_))));
        assert!(matches!(parse_idx(&[0, 0, 8, 0]), Err(DataError::BadMagic(_))));
    }

    proptest! {
        #[test]
        fn parse_idx_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = parse_idx(&bytes);
        }

        #[test]
        fn well_formed_round_trip(payload in proptest::collection::vec(any::<u8>(), 1..40)) {
            let t = parse_idx(&idx(IDX_LABELS_MAGIC, &[payload.len() as u32], &payload)).unwrap();
            prop_assert!(t.data().iter().zip(&payload).all(|(a, &b)| *a == f64::from(b)));
        }
    }

    fn write_dataset(dir: &Path, pixels: &[u8], labels: &[u8], h: u32, w: u32) {
        let n = labels.len() as u32;
        let base = dir.join("toy");
        std::fs::create_dir_all(&base).unwrap();
        std::fs::write(base.join("train-images.idx"), idx(IDX_IMAGES_MAGIC, &[n, h, w], pixels)).unwrap();
        std::fs::write(base.join("train-labels.idx"), idx(IDX_LABELS_MAGIC, &[n], labels)).unwrap();
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("bfno-data-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn load_scales_bytes_exactly() {
        let dir = temp_dir("scale");
        write_dataset(&dir, &[0, 255, 51, 102, 0, 0, 0, 255], &[1, 0], 2, 2);
        let ds = load_idx_dataset(&dir, "toy", Split::Train).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images.data()[0], 0.0);
        assert_eq!(ds.images.data()[1], 1.0);
        assert_eq!(ds.images.data()[7], 1.0);
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.classes, 2);
        assert!(matches!(load_idx_dataset(&dir, "toy", Split::Test), Err(DataError::Io { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn load_rejects_swapped_files() {
        let dir = temp_dir("swap");
        let base = dir.join("toy");
        std::fs::create_dir_all(&base).unwrap();
        std::fs::write(base.join("train-images.idx"), idx(IDX_LABELS_MAGIC, &[1], &[0])).unwrap();
        std::fs::write(base.join("train-labels.idx"), idx(IDX_LABELS_MAGIC, &[1], &[0])).unwrap();
        assert!(matches!(load_idx_dataset(&dir, "toy", Split::Train), Err(DataError::BadMagic(IDX_LABELS_MAGIC))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    fn balanced(n: usize, classes: usize) -> Dataset {
        let images = Tensor::new(vec![n, 1, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| i % classes).collect(), classes, "b", Split::Train).unwrap()
    }

    #[test]
    fn subset_is_stratified_and_deterministic() {
        let ds = balanced(1000, 10);
        let s = subset(&ds, 100, 3).unwrap();
        assert_eq!(s.class_counts(), vec![10; 10]);
        assert_eq!(s, subset(&ds, 100, 3).unwrap());
        assert_ne!(s.labels, subset(&ds, 100, 4).unwrap().labels);

        let full = subset(&ds, 1000, 5).unwrap();
        let mut ids: Vec<usize> = full.images.data().iter().map(|&v| v as usize).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..1000).collect::<Vec<_>>());
        assert!(matches!(subset(&ds, 1001, 0), Err(DataError::SubsetTooLarge { .. })));
    }

    proptest! {
        #[test]
        fn subset_proportions_within_one(n in 0usize..300, seed in any::<u64>()) {
            let images = Tensor::new(vec![300, 1, 1, 1], vec![0.0; 300]).unwrap();
            // unbalanced: class c has weight c + 1
            let labels: Vec<usize> = (0..300).map(|i| [0, 1, 1, 2, 2, 2][i % 6]).collect();
            let ds = Dataset::new(images, labels, 3, "u", Split::Train).unwrap();
            let s = subset(&ds, n, seed).unwrap();
            prop_assert_eq!(s.len(), n);
            for (c, &got) in s.class_counts().iter().enumerate() {
                let exact = n as f64 * ds.class_counts()[c] as f64 / 300.0;
                prop_assert!((got as f64 - exact).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        for kind in [SyntheticKind::Rings, SyntheticKind::Gaussians] {
            let a = gen_synthetic(kind, 64, 9, Split::Train).unwrap();
            assert_eq!(a, gen_synthetic(kind, 64, 9, Split::Train).unwrap());
            assert_ne!(a.images, gen_synthetic(kind, 64, 9, Split::Test).unwrap().images);
            assert_eq!(a.sample_shape(), &[1, 8, 8]);
            let counts = a.class_counts();
            assert!(counts.iter().all(|&c| c == 64 / kind.classes()));
            assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(gen_synthetic(SyntheticKind::Gaussians, 3, 0, Split::Train).is_err());
    }

    #[test]
    fn gaussians_nearest_centroid() {
        let ds = gen_synthetic(SyntheticKind::Gaussians, 400, 11, Split::Test).unwrap();
        let (centroids, _) = gaussian_centroids(11);
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = ds.image(i);
                let dist = |c: &Vec<f64>| x.data().iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..centroids.len()).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best == ds.labels[i]
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn rings_defeat_a_linear_classifier() {
        let train = gen_synthetic(SyntheticKind::Rings, 400, 12, Split::Train).unwrap();
        let d = 64;
        let (mut w, mut b) = (vec![0.0; d], 0.0);
        // full-batch logistic regression, well past convergence of the margin
        for _ in 0..2000 {
            let (mut gw, mut gb) = (vec![0.0; d], 0.0);
            for i in 0..train.len() {
                let x = train.image(i);
                let z = b + x.data().iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - train.labels[i] as f64;
                gw.iter_mut().zip(x.data()).for_each(|(g, xv)| *g += e * xv);
                gb += e;
            }
            let lr = 2.0 / train.len() as f64;
            w.iter_mut().zip(&gw).for_each(|(wv, g)| *wv -= lr * g);
            b -= lr * gb;
        }
        let acc = (0..train.len())
            .filter(|&i| {
                let z = b + train.image(i).data().iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                usize::from(z > 0.0) == train.labels[i]
            })
            .count() as f64
            / train.len() as f64;
        assert!(acc <= 0.85, "{acc}");
    }
}
