use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::IN_CHANNELS;
use crate::tensor::Tensor;

/// Per-channel normalization applied to pixel values in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const CIFAR: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };

    pub fn apply(&self, channel: usize, x: f64) -> f32 {
        ((x - self.mean[channel]) / self.std[channel]) as f32
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::CIFAR
    }
}

/// Decoded, normalized images in `[n, 3, s, s]` layout with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_px: usize,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        IN_CHANNELS * self.image_px * self.image_px
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.image_len();
        &self.images[i * l..(i + 1) * l]
    }

    /// Batch tensor and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let s = self.image_px;
        let t = Tensor::new(vec![indices.len(), IN_CHANNELS, s, s], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Record layout of a CIFAR binary batch file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarLayout {
    /// 1 label byte + 3072 pixels.
    Cifar10,
    /// coarse label byte + fine label byte + 3072 pixels; the fine label is used.
    Cifar100,
}

impl CifarLayout {
    pub fn for_classes(classes: usize) -> Self {
        if classes > 10 {
            CifarLayout::Cifar100
        } else {
            CifarLayout::Cifar10
        }
    }

    pub fn label_bytes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 1,
            CifarLayout::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }
}

const CIFAR_PX: usize = 32;
const CIFAR_PIXELS: usize = IN_CHANNELS * CIFAR_PX * CIFAR_PX;

/// Decodes CIFAR records (R, G, B planes, row-major) from raw bytes.
pub fn decode_cifar(
    bytes: &[u8],
    layout: CifarLayout,
    classes: usize,
    norm: &Normalization,
    origin: &Path,
) -> Result<Dataset> {
    let rec = layout.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format {
            path: origin.to_path_buf(),
            message: format!("{} bytes is not a whole number of {rec}-byte records", bytes.len()),
        });
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[layout.label_bytes() - 1] as usize;
        if label >= classes {
            return Err(Error::Format {
                path: origin.to_path_buf(),
                message: format!("record {r} has label {label} but only {classes} classes"),
            });
        }
        labels.push(label);
        for (k, &px) in record[layout.label_bytes()..].iter().enumerate() {
            images.push(norm.apply(k / (CIFAR_PX * CIFAR_PX), px as f64 / 255.0));
        }
    }
    Ok(Dataset {
        image_px: CIFAR_PX,
        classes,
        images,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Standard batch file names of a split.
pub fn cifar_files(dir: &Path, layout: CifarLayout, split: Split) -> Vec<PathBuf> {
    match (layout, split) {
        (CifarLayout::Cifar10, Split::Train) => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        (CifarLayout::Cifar10, Split::Test) => vec![dir.join("test_batch.bin")],
        (CifarLayout::Cifar100, Split::Train) => vec![dir.join("train.bin")],
        (CifarLayout::Cifar100, Split::Test) => vec![dir.join("test.bin")],
    }
}

/// Loads a CIFAR binary split. `path` may be a single batch file or a
/// directory holding the standard file names.
pub fn load_cifar_binary(path: &Path, split: Split, classes: usize, norm: &Normalization) -> Result<Dataset> {
    let layout = CifarLayout::for_classes(classes);
    let files = if path.is_dir() {
        cifar_files(path, layout, split)
    } else {
        vec![path.to_path_buf()]
    };
    let mut out: Option<Dataset> = None;
    for f in files {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let part = decode_cifar(&bytes, layout, classes, norm, &f)?;
        match out.as_mut() {
            None => out = Some(part),
            Some(d) => {
                d.images.extend(part.images);
                d.labels.extend(part.labels);
            }
        }
    }
    out.ok_or_else(|| Error::Config(format!("no CIFAR files under {}", path.display())))
}

/// Deterministic toy dataset: every class draws a bar or blob at its own
/// position with its own tint over a noisy background. Labels cycle
/// through the classes so counts differ by at most one.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, image_px: usize, norm: &Normalization) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes, got {classes}"
        )));
    }
    if image_px < 8 {
        return Err(Error::Config(format!(
            "synthetic images need at least 8 px, got {image_px}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("valid normal");
    let s = image_px;
    let mut images = Vec::with_capacity(n * IN_CHANNELS * s * s);
    let mut labels = Vec::with_capacity(n);
    let mut canvas = vec![0.0f64; IN_CHANNELS * s * s];
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        let pos = c % 9;
        let kind = (c / 9 + c) % 3;
        let tint = (c / 27) % 3;
        let cell = s as f64 / 3.0;
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..=1.0);
        let cy = cell * ((pos / 3) as f64 + 0.5) + jitter(&mut rng);
        let cx = cell * ((pos % 3) as f64 + 0.5) + jitter(&mut rng);
        let half_len = cell * 0.5;
        let half_w = (cell * 0.18).max(0.75);
        let strength = rng.random_range(0.35..0.5);
        for ch in 0..IN_CHANNELS {
            for y in 0..s {
                for x in 0..s {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let inside = match kind {
                        0 => dy.abs() <= half_w && dx.abs() <= half_len,
                        1 => dx.abs() <= half_w && dy.abs() <= half_len,
                        _ => dy * dy + dx * dx <= (cell * 0.4) * (cell * 0.4),
                    };
                    let base = 0.5 + noise.sample(&mut rng);
                    let gain = if ch == tint { 1.0 } else { 0.6 };
                    canvas[(ch * s + y) * s + x] = base + if inside { strength * gain } else { 0.0 };
                }
            }
        }
        for (k, &v) in canvas.iter().enumerate() {
            images.push(norm.apply(k / (s * s), v));
        }
    }
    Ok(Dataset {
        image_px,
        classes,
        images,
        labels,
    })
}

/// Mirrors a `[3, s, s]` image left to right.
pub fn flip_horizontal(img: &[f32], s: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    for row in out.chunks_mut(s) {
        row.reverse();
    }
    out
}

/// Window `(top, left)` of the image reflect-padded by `pad` on every side.
pub fn reflect_crop(img: &[f32], s: usize, pad: usize, top: usize, left: usize) -> Vec<f32> {
    let reflect = |i: isize| -> usize {
        let n = s as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let mut out = Vec::with_capacity(img.len());
    for ch in 0..IN_CHANNELS {
        for y in 0..s {
            let sy = reflect(y as isize + top as isize - pad as isize);
            for x in 0..s {
                let sx = reflect(x as isize + left as isize - pad as isize);
                out.push(img[(ch * s + sy) * s + sx]);
            }
        }
    }
    out
}

pub const AUGMENT_PAD: usize = 4;

/// Random horizontal flip (p = 0.5) then a random crop of the image
/// reflect-padded by 4 pixels.
pub fn augment(img: &[f32], s: usize, rng: &mut impl Rng) -> Vec<f32> {
    let flipped = if rng.random_bool(0.5) {
        flip_horizontal(img, s)
    } else {
        img.to_vec()
    };
    let top = rng.random_range(0..=2 * AUGMENT_PAD);
    let left = rng.random_range(0..=2 * AUGMENT_PAD);
    reflect_crop(&flipped, s, AUGMENT_PAD, top, left)
}
