//! Deterministic synthetic image classification tasks.
//!
//! Every sample is a pure function of the task and its global index: index
//! `i` has label `i % n_classes` and draws from its own derived stream, so
//! datasets are reproducible bit-for-bit and class-balanced by construction.
//! Validation samples continue the index sequence after the training samples.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{DType, Tensor};

const NOISE_STREAM: u64 = 0x6e6f_6973_65;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum GeneratorKind {
    /// One Gaussian bump per class, centred on a ring.
    Blobs,
    /// One bar per class: even classes horizontal, odd classes vertical.
    Bars,
}

/// Post-generation transform turning a base task into a transfer task.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Transform {
    /// Cyclic roll by `rows` down and `cols` right.
    Shift { rows: i64, cols: i64 },
    /// Counter-clockwise quarter turn; needs square images.
    Rotate90,
    /// Additive zero-mean Gaussian noise.
    Noise { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TaskSpec {
    pub n_classes: usize,
    /// `(C, H, W)`.
    pub image: [usize; 3],
    pub generator: GeneratorKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub transforms: Vec<Transform>,
    pub seed: u64,
}

impl TaskSpec {
    /// Bars, 4 classes, 1×8×8.
    pub fn bars(seed: u64) -> Self {
        Self {
            n_classes: 4,
            image: [1, 8, 8],
            generator: GeneratorKind::Bars,
            transforms: Vec::new(),
            seed,
        }
    }

    pub fn with_transforms(mut self, transforms: Vec<Transform>) -> Self {
        self.transforms = transforms;
        self
    }

    /// The same task without transforms.
    pub fn base(&self) -> Self {
        Self {
            transforms: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image;
        if self.n_classes < 2 {
            return Err(invalid("a task needs at least two classes"));
        }
        if c == 0 || h == 0 || w == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if self.generator == GeneratorKind::Bars && self.n_classes.div_ceil(2) > h.min(w) {
            return Err(invalid(format!("{} bar classes do not fit a {h}x{w} image", self.n_classes)));
        }
        for t in &self.transforms {
            match *t {
                Transform::Rotate90 if h != w => return Err(invalid("rotate90 needs square images")),
                Transform::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                    return Err(invalid("noise sigma must be finite and non-negative"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Untransformed pixels of sample `index`, `C·H·W` values.
    pub fn base_sample(&self, index: u64) -> Vec<f64> {
        let [c, h, w] = self.image;
        let label = (index % self.n_classes as u64) as usize;
        let mut rng = Rng::new(derive_seed(self.seed, index));
        let mut plane = vec![0.0; h * w];
        match self.generator {
            GeneratorKind::Bars => {
                let amp = rng.uniform_range(0.5, 1.0);
                for p in plane.iter_mut() {
                    *p = rng.uniform_range(0.0, 0.1);
                }
                let slots = self.n_classes.div_ceil(2);
                let slot = label / 2;
                let horizontal = label % 2 == 0;
                let extent = if horizontal { h } else { w };
                let pos = slot * extent / slots + extent / (2 * slots);
                for k in 0..if horizontal { w } else { h } {
                    let (i, j) = if horizontal { (pos, k) } else { (k, pos) };
                    plane[i * w + j] += amp;
                }
            }
            GeneratorKind::Blobs => {
                let angle = 2.0 * core::f64::consts::PI * label as f64 / self.n_classes as f64;
                let radius = 0.3 * h.min(w) as f64;
                let ci = (h as f64 - 1.0) / 2.0 + radius * libm::sin(angle) + rng.uniform_range(-0.5, 0.5);
                let cj = (w as f64 - 1.0) / 2.0 + radius * libm::cos(angle) + rng.uniform_range(-0.5, 0.5);
                let width = h.min(w) as f64 / 8.0;
                for i in 0..h {
                    for j in 0..w {
                        let d2 = (i as f64 - ci) * (i as f64 - ci) + (j as f64 - cj) * (j as f64 - cj);
                        plane[i * w + j] = libm::exp(-d2 / (2.0 * width * width)) + rng.uniform_range(0.0, 0.1);
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            out.extend_from_slice(&plane);
        }
        out
    }

    /// Pixels of sample `index` after every transform, in order.
    pub fn sample(&self, index: u64) -> (Vec<f64>, usize) {
        let [c, h, w] = self.image;
        let mut px = self.base_sample(index);
        for (k, t) in self.transforms.iter().enumerate() {
            px = match *t {
                Transform::Shift { rows, cols } => roll(&px, c, h, w, rows, cols),
                Transform::Rotate90 => rotate90(&px, c, h),
                Transform::Noise { sigma } => {
                    let stream = derive_seed(self.seed ^ NOISE_STREAM, k as u64);
                    let mut rng = Rng::new(derive_seed(stream, index));
                    px.into_iter().map(|v| v + sigma * rng.standard_normal()).collect()
                }
            };
        }
        (px, (index % self.n_classes as u64) as usize)
    }
}

/// Cyclic roll of each `h × w` channel.
pub fn roll(px: &[f64], c: usize, h: usize, w: usize, rows: i64, cols: i64) -> Vec<f64> {
    let mut out = vec![0.0; px.len()];
    let dr = rows.rem_euclid(h as i64) as usize;
    let dc = cols.rem_euclid(w as i64) as usize;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[ch * h * w + ((i + dr) % h) * w + (j + dc) % w] = px[ch * h * w + i * w + j];
            }
        }
    }
    out
}

fn rotate90(px: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; px.len()];
    for ch in 0..c {
        for i in 0..n {
            for j in 0..n {
                out[ch * n * n + (n - 1 - j) * n + i] = px[ch * n * n + i * n + j];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(N, C, H, W)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if images.dims().len() != 4 || images.dims()[0] != labels.len() {
            return Err(invalid("images must be (N, C, H, W) with one label per image"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self { images, labels, n_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> [usize; 3] {
        let d = self.images.dims();
        [d[1], d[2], d[3]]
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_rows(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn build(spec: &TaskSpec, start: u64, n: usize, split: Split) -> Result<Dataset> {
    let [c, h, w] = spec.image;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let (px, y) = spec.sample(start + i);
        data.extend(px);
        labels.push(y);
    }
    Dataset::new(Tensor::from_vec(&[n, c, h, w], data)?, labels, spec.n_classes, split)
}

/// Training samples `0..n_train` and validation samples
/// `n_train..n_train + n_val` of the task.
pub fn generate(spec: &TaskSpec, n_train: usize, n_val: usize) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if n_train < spec.n_classes || n_val < spec.n_classes {
        return Err(invalid(format!(
            "need at least {} samples per split, got {n_train}/{n_val}",
            spec.n_classes
        )));
    }
    Ok((
        build(spec, 0, n_train, Split::Train)?,
        build(spec, n_train as u64, n_val, Split::Val)?,
    ))
}

/// Labels as an F64 tensor of integral values.
pub fn labels_to_tensor(labels: &[usize]) -> Result<Tensor> {
    Tensor::from_vec_dtype(&[labels.len()], labels.iter().map(|&y| y as f64).collect(), DType::F64)
}

pub fn labels_from_tensor(t: &Tensor) -> Result<Vec<usize>> {
    if t.dims().len() != 1 {
        return Err(invalid("labels must be a vector"));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && libm::trunc(v) == v && v < usize::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(invalid(format!("label value {v} is not a non-negative integer")))
            }
        })
        .collect()
}
