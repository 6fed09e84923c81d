//! Imbalanced dataset construction: count profiles, seeded subsampling, a
//! Gaussian-mixture generator and the CIFAR binary reader.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::margin_losses::ClassCounts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    LongTailed,
    Step,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountProfile {
    pub counts: ClassCounts,
    pub kind: ProfileKind,
    pub rho: f64,
}

fn check_profile_args(k: usize, n_max: usize, rho: f64) -> Result<()> {
    if k < 2 {
        return invalid(format!("need at least 2 classes, got {k}"));
    }
    if n_max == 0 {
        return invalid("n_max must be at least 1");
    }
    if !(rho.is_finite() && rho >= 1.0) {
        return invalid(format!("imbalance ratio must be >= 1, got {rho}"));
    }
    if (n_max as f64) / rho < 1.0 {
        return invalid(format!(
            "n_max / rho = {n_max} / {rho} < 1 leaves the rarest class empty"
        ));
    }
    Ok(())
}

fn round_count(x: f64) -> usize {
    (x.round() as usize).max(1)
}

/// `n_i = round(n_max · ρ^{-i/(K-1)})`.
pub fn long_tailed_counts(k: usize, n_max: usize, rho: f64) -> Result<CountProfile> {
    check_profile_args(k, n_max, rho)?;
    let counts = (0..k)
        .map(|i| {
            if i == k - 1 {
                round_count(n_max as f64 / rho)
            } else {
                round_count(n_max as f64 * rho.powf(-(i as f64) / (k - 1) as f64))
            }
        })
        .collect();
    Ok(CountProfile {
        counts: ClassCounts::new(counts)?,
        kind: if rho == 1.0 {
            ProfileKind::Uniform
        } else {
            ProfileKind::LongTailed
        },
        rho,
    })
}

/// The first `⌊K · majority_frac⌋` classes get `n_max`, the rest `round(n_max / ρ)`.
pub fn step_counts(k: usize, n_max: usize, rho: f64, majority_frac: f64) -> Result<CountProfile> {
    check_profile_args(k, n_max, rho)?;
    if !(majority_frac > 0.0 && majority_frac < 1.0) {
        return invalid(format!(
            "majority fraction must lie in (0, 1), got {majority_frac}"
        ));
    }
    // Tolerate representation error such as 10 * 0.4 = 3.9999….
    let majority = ((k as f64) * majority_frac + 1e-9).floor() as usize;
    if majority == 0 || majority == k {
        return invalid(format!(
            "majority fraction {majority_frac} leaves no {} classes out of {k}",
            if majority == 0 {
                "majority"
            } else {
                "minority"
            }
        ));
    }
    let minority = round_count(n_max as f64 / rho);
    let counts = (0..k)
        .map(|i| if i < majority { n_max } else { minority })
        .collect();
    Ok(CountProfile {
        counts: ClassCounts::new(counts)?,
        kind: if rho == 1.0 {
            ProfileKind::Uniform
        } else {
            ProfileKind::Step
        },
        rho,
    })
}

pub fn uniform_counts(k: usize, n: usize) -> Result<CountProfile> {
    check_profile_args(k, n, 1.0)?;
    Ok(CountProfile {
        counts: ClassCounts::new(vec![n; k])?,
        kind: ProfileKind::Uniform,
        rho: 1.0,
    })
}

/// Features stored row-major, `len() × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if features.len() != labels.len() * dim {
            return invalid(format!(
                "{} feature values for {} examples of dimension {dim}",
                features.len(),
                labels.len()
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return invalid(format!("label {y} out of range for {num_classes} classes"));
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            dim,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> (&[f64], usize) {
        (
            &self.features[i * self.dim..(i + 1) * self.dim],
            self.labels[i],
        )
    }

    /// Number of examples per class, zeros included.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &y in &self.labels {
            hist[y] += 1;
        }
        hist
    }

    /// Per-class counts; fails if some class has no examples.
    pub fn per_class_counts(&self) -> Result<ClassCounts> {
        ClassCounts::new(self.class_histogram())
    }

    fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (x, y) = self.example(i);
            features.extend_from_slice(x);
            labels.push(y);
        }
        Self {
            features,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }
}

/// Keeps the first `n_i` examples of each class under a seeded shuffle.
pub fn subsample(
    base: &LabeledDataset,
    profile: &CountProfile,
    seed: u64,
) -> Result<LabeledDataset> {
    let wanted = profile.counts.as_slice();
    if wanted.len() != base.num_classes {
        return invalid(format!(
            "profile has {} classes, dataset has {}",
            wanted.len(),
            base.num_classes
        ));
    }
    let available = base.class_histogram();
    for (class, (&want, &have)) in wanted.iter().zip(&available).enumerate() {
        if have < want {
            return invalid(format!(
                "class {class} has {have} examples, profile needs {want}"
            ));
        }
    }
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = vec![0usize; base.num_classes];
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let y = base.labels[i];
            if taken[y] < wanted[y] {
                taken[y] += 1;
                true
            } else {
                false
            }
        })
        .collect();
    Ok(base.select(&keep))
}

/// Unit vectors for the class centers.
///
/// One-hot when `d ≥ K`; evenly spaced on a line for `d = 1`; otherwise the
/// trigonometric moment curve `(cos θ_i, sin θ_i, cos 2θ_i, sin 2θ_i, …)`
/// with `θ_i = 2πi/K`, normalized.
pub fn class_directions(k: usize, d: usize) -> Vec<Vec<f64>> {
    if d >= k {
        return (0..k)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
    }
    if d == 1 {
        return (0..k)
            .map(|i| vec![-1.0 + 2.0 * i as f64 / (k - 1) as f64])
            .collect();
    }
    (0..k)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            let v: Vec<f64> = (0..d)
                .map(|j| {
                    let harmonic = (j / 2 + 1) as f64;
                    if j % 2 == 0 {
                        (harmonic * theta).cos()
                    } else {
                        (harmonic * theta).sin()
                    }
                })
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Class `i` is drawn from `N(separation · u_i, I_d)`. Examples are emitted
/// class by class.
pub fn gaussian_mixture(
    k: usize,
    d: usize,
    n_per_class: &ClassCounts,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if d < 1 {
        return invalid("feature dimension must be at least 1");
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return invalid(format!("separation must be >= 0, got {separation}"));
    }
    if n_per_class.num_classes() != k {
        return invalid(format!(
            "{} class counts for {k} classes",
            n_per_class.num_classes()
        ));
    }
    let centers = class_directions(k, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_per_class.total();
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class.get(class) {
            for &c in center {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(separation * c + noise);
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, labels, d, k)
}

pub const CIFAR_PIXELS: usize = 3072;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    /// 1 label byte + 3072 pixel bytes.
    Cifar10,
    /// Coarse and fine label bytes + 3072 pixel bytes; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Parses CIFAR binary records; pixels are scaled to `[0, 1]`.
/// `base_offset` is only used to report positions in error messages.
pub fn parse_cifar(
    bytes: &[u8],
    variant: CifarVariant,
    base_offset: u64,
) -> Result<LabeledDataset> {
    let rec = variant.record_len();
    let k = variant.num_classes();
    let full = bytes.len() / rec;
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Parse {
            offset: base_offset + (full * rec) as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() % rec
            ),
        });
    }
    let mut features = Vec::with_capacity(full * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(full);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label_pos = rec - CIFAR_PIXELS - 1;
        let label = record[label_pos] as usize;
        if label >= k {
            return Err(Error::Parse {
                offset: base_offset + (i * rec + label_pos) as u64,
                message: format!("label {label} out of range for {k} classes"),
            });
        }
        labels.push(label);
        features.extend(
            record[rec - CIFAR_PIXELS..]
                .iter()
                .map(|&b| b as f64 / 255.0),
        );
    }
    LabeledDataset::new(features, labels, CIFAR_PIXELS, k)
}

/// Reads and concatenates CIFAR binary files.
pub fn load_cifar_binary<P: AsRef<Path>>(
    paths: &[P],
    variant: CifarVariant,
) -> Result<LabeledDataset> {
    let mut all = LabeledDataset::empty(CIFAR_PIXELS, variant.num_classes());
    for path in paths {
        let bytes = fs::read(path.as_ref())?;
        let part = parse_cifar(&bytes, variant, 0).map_err(|e| match e {
            Error::Parse { offset, message } => Error::Parse {
                offset,
                message: format!("{}: {message}", path.as_ref().display()),
            },
            other => other,
        })?;
        all.features.extend(part.features);
        all.labels.extend(part.labels);
    }
    Ok(all)
}

pub fn load_cifar10_binary<P: AsRef<Path>>(path: P) -> Result<LabeledDataset> {
    load_cifar_binary(&[path], CifarVariant::Cifar10)
}
