//! Procedural image-classification tasks for pretrain-then-adapt experiments.
//!
//! Every class is an oriented sinusoidal grating plus a pair of Gaussian blobs, each
//! with per-channel colour weights. Samples are the class template with optional
//! per-sample grating phase jitter and additive pixel noise, clamped to `[0, 1]`.
//! A transfer target rotates the gratings, moves the blobs and permutes which
//! template each label gets.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};

/// Shape and generator parameters of a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub classes: usize,
    /// Train, validation and test images per class.
    pub split_per_class: [usize; 3],
    pub image_size: usize,
    pub channels: usize,
    /// Seed of the class templates (independent of the sample seed).
    pub pattern_seed: u64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Per-sample grating phase jitter, as a fraction of a full period.
    pub jitter: f64,
    /// Transfer shift in `[0, 1]`; 0 keeps the source generator.
    pub shift: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            split_per_class: [100, 10, 10],
            image_size: 32,
            channels: 3,
            pattern_seed: 0,
            noise: 0.1,
            jitter: 0.0,
            shift: 0.5,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config(
                "classes, image_size and channels must be positive".into(),
            ));
        }
        if self.split_per_class.contains(&0) {
            return Err(Error::Config(format!("empty split in {:?}", self.split_per_class)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "noise must be finite and >= 0, got {}",
                self.noise
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!(
                "jitter must be finite and >= 0, got {}",
                self.jitter
            )));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::Config(format!("shift must lie in [0, 1], got {}", self.shift)));
        }
        Ok(())
    }

    pub fn images_per_class(&self) -> usize {
        self.split_per_class.iter().sum()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Generator parameters of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub angle: f64,
    /// Grating cycles across the image.
    pub frequency: f64,
    pub phase: f64,
    /// Blob centres in unit image coordinates.
    pub blobs: [(f64, f64); 2],
    pub blob_width: f64,
    /// Grating and blob weight per channel.
    pub grating_colour: Vec<f64>,
    pub blob_colour: Vec<f64>,
}

impl Pattern {
    fn sample(spec: &TaskSpec, rng: &mut Rng) -> Self {
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
        let angle = u(0.0, PI);
        let frequency = u(1.5, 4.0);
        let phase = u(0.0, TAU);
        let blobs = [(u(0.2, 0.8), u(0.2, 0.8)), (u(0.2, 0.8), u(0.2, 0.8))];
        let blob_width = u(0.08, 0.18);
        let grating_colour = (0..spec.channels).map(|_| u(-1.0, 1.0)).collect();
        let blob_colour = (0..spec.channels).map(|_| u(-1.0, 1.0)).collect();
        Self {
            angle,
            frequency,
            phase,
            blobs,
            blob_width,
            grating_colour,
            blob_colour,
        }
    }

    /// Rotates the grating by `shift·π/2` and moves each blob by up to `shift·0.3`.
    fn shifted(&self, shift: f64, rng: &mut Rng) -> Self {
        let mut out = self.clone();
        out.angle += shift * PI / 2.0;
        for b in out.blobs.iter_mut() {
            let dir = TAU * rng.uniform();
            let len = shift * 0.3;
            b.0 = (b.0 + len * libm::cos(dir)).clamp(0.1, 0.9);
            b.1 = (b.1 + len * libm::sin(dir)).clamp(0.1, 0.9);
        }
        out
    }

    /// Writes one `C·H·W` image into `out`.
    fn render(&self, size: usize, phase_offset: f64, out: &mut [f64]) {
        let plane = size * size;
        let (ca, sa) = (libm::cos(self.angle), libm::sin(self.angle));
        let inv_w2 = 1.0 / (2.0 * self.blob_width * self.blob_width);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                let g = libm::sin(TAU * self.frequency * (fx * ca + fy * sa) + self.phase + phase_offset);
                let b: f64 = self
                    .blobs
                    .iter()
                    .map(|&(cx, cy)| libm::exp(-((fx - cx).powi(2) + (fy - cy).powi(2)) * inv_w2))
                    .sum();
                for c in 0..self.grating_colour.len() {
                    out[c * plane + y * size + x] =
                        0.5 + 0.25 * self.grating_colour[c] * g + 0.25 * self.blob_colour[c] * b;
                }
            }
        }
    }
}

/// Class templates for the source task (`target = false`) or its shifted target.
///
/// With `shift = 0` both are identical.
pub fn class_patterns(spec: &TaskSpec, target: bool) -> Vec<Pattern> {
    let root = Rng::new(spec.pattern_seed);
    let source: Vec<Pattern> = (0..spec.classes)
        .map(|c| Pattern::sample(spec, &mut root.fork(c as u64)))
        .collect();
    if !target || spec.shift == 0.0 {
        return source;
    }
    let mut perm: Vec<usize> = (0..spec.classes).collect();
    let mut prng = root.fork(u64::MAX);
    // A derangement where possible, so that no label keeps its source template.
    if spec.classes > 1 {
        loop {
            prng.shuffle(&mut perm);
            if perm.iter().enumerate().all(|(i, &p)| i != p) {
                break;
            }
        }
    }
    perm.iter()
        .enumerate()
        .map(|(c, &p)| source[p].shifted(spec.shift, &mut root.fork(u64::MAX - 1 - c as u64)))
        .collect()
}

/// Images (`N × C·H·W`, values in `[0, 1]`), labels and disjoint split indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Matrix<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Which subset of a [`Dataset`] to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Checks that splits are in range, disjoint and cover every sample.
    pub fn validate(&self) -> Result<()> {
        if self.images.rows() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                self.images.rows(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Data(format!("label {bad} with {} classes", self.classes)));
        }
        let mut seen = vec![false; self.len()];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            match seen.get_mut(i) {
                None => return Err(Error::Data(format!("split index {i} out of range"))),
                Some(true) => return Err(Error::Data(format!("sample {i} appears in two splits"))),
                Some(s) => *s = true,
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("splits do not cover every sample".into()));
        }
        Ok(())
    }

    /// Rows of `split` (in split order) and their labels.
    pub fn gather(&self, split: Split) -> Result<(Matrix<f32>, Vec<usize>)> {
        self.gather_indices(self.indices(split))
            .map_err(|_| Error::Data(format!("{} split is empty", split.name())))
    }

    pub fn gather_indices(&self, idx: &[usize]) -> Result<(Matrix<f32>, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::Data("no samples selected".into()));
        }
        let cols = self.images.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.images.row(i));
        }
        let images = Matrix::from_vec(idx.len(), cols, data)?;
        Ok((images, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

fn render_dataset(spec: &TaskSpec, patterns: &[Pattern], seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let per_class = spec.images_per_class();
    let total = per_class * spec.classes;
    let len = spec.image_len();
    let mut images = vec![0f32; total * len];
    let mut labels = Vec::with_capacity(total);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let root = Rng::new(seed);
    let mut buf = vec![0f64; len];
    // Sample-major, class-minor order keeps every prefix class-balanced.
    for j in 0..per_class {
        for (c, pattern) in patterns.iter().enumerate() {
            let i = j * spec.classes + c;
            let mut rng = root.fork(i as u64);
            let offset = if spec.jitter > 0.0 {
                TAU * spec.jitter * (2.0 * rng.uniform() - 1.0)
            } else {
                0.0
            };
            pattern.render(spec.image_size, offset, &mut buf);
            for (dst, &v) in images[i * len..(i + 1) * len].iter_mut().zip(&buf) {
                let noisy = if spec.noise > 0.0 {
                    v + spec.noise * rng.normal()
                } else {
                    v
                };
                *dst = noisy.clamp(0.0, 1.0) as f32;
            }
            labels.push(c);
            let [tr, va, _] = spec.split_per_class;
            if j < tr {
                train.push(i);
            } else if j < tr + va {
                val.push(i);
            } else {
                test.push(i);
            }
        }
    }
    Ok(Dataset {
        images: Matrix::from_vec(total, len, images)?,
        labels,
        classes: spec.classes,
        train,
        val,
        test,
    })
}

/// Source-task dataset for `spec`, deterministic in `(spec, seed)`.
pub fn gen_task(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    render_dataset(spec, &class_patterns(spec, false), seed)
}

/// Source and shifted-target datasets drawn with independent sample streams.
pub fn make_transfer_pair(spec: &TaskSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let root = Rng::new(seed);
    let source = render_dataset(spec, &class_patterns(spec, false), root.fork(0).seed())?;
    let target = render_dataset(spec, &class_patterns(spec, true), root.fork(1).seed())?;
    Ok((source, target))
}
