//! Dataset ingestion, preprocessing, augmentation and the synthetic glyph set.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labelled images `[n, h, w, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return shape_err("Dataset", format!("images {:?} are not [n, h, w, c]", images.dims()));
        }
        if images.dims()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.dims()[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::TargetOutOfRange {
                target: bad,
                classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[h, w, c]`
    pub fn image_dims(&self) -> [usize; 3] {
        let d = self.images.dims();
        [d[1], d[2], d[3]]
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        let [h, w, c] = self.image_dims();
        let size = h * w * c;
        Tensor::new([h, w, c], self.images.data()[i * size..(i + 1) * size].to_vec()).expect("extents agree")
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::EmptyInput("dataset subset"));
        }
        let [h, w, c] = self.image_dims();
        let images = Tensor::new([n, h, w, c], self.images.data()[..n * h * w * c].to_vec())?;
        Dataset::new(images, self.labels[..n].to_vec(), self.classes, self.split)
    }

    /// Applies [`preprocess`] to every image.
    pub fn preprocessed(&self, target: usize) -> Result<Dataset> {
        Dataset::new(preprocess(&self.images, target)?, self.labels.clone(), self.classes, self.split)
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            what: what.to_string(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = read_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() != header + len {
        return Err(Error::Truncated {
            what: what.to_string(),
            expected: header + len,
            found: bytes.len(),
        });
    }
    Ok(&bytes[header..])
}

/// Decodes an IDX image file into `(count, rows, cols, pixels)`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IDX_IMAGES_MAGIC, "IDX images")?;
    let n = read_u32(bytes, 4, "IDX images")? as usize;
    let rows = read_u32(bytes, 8, "IDX images")? as usize;
    let cols = read_u32(bytes, 12, "IDX images")? as usize;
    let pixels = payload(bytes, 16, n * rows * cols, "IDX images")?;
    Ok((n, rows, cols, pixels))
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, IDX_LABELS_MAGIC, "IDX labels")?;
    let n = read_u32(bytes, 4, "IDX labels")? as usize;
    payload(bytes, 8, n, "IDX labels")
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`. Class count is
/// `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (n, rows, cols, pixels) = decode_idx_images(&image_bytes)?;
    let labels = decode_idx_labels(&label_bytes)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("IDX file"));
    }
    let images = Tensor::new([n, rows, cols, 1], pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(images, labels, classes, Split::Train)
}

/// Writes single-channel images in `[0, 1]` as an IDX pair, quantizing to `u8`.
pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [h, w, c] = dataset.image_dims();
    if c != 1 {
        return Err(Error::UnsupportedOp("IDX stores single-channel images".into()));
    }
    if dataset.labels.iter().any(|&l| l > u8::MAX as usize) {
        return Err(Error::UnsupportedOp("IDX labels are bytes".into()));
    }
    let pixels: Vec<u8> = dataset
        .images
        .data()
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let labels: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    fs::write(images_path, encode_idx_images(h, w, &pixels))?;
    fs::write(labels_path, encode_idx_labels(&labels))?;
    Ok(())
}

/// Loads `train` or `t10k` MNIST-format files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = dir.as_ref();
    let mut ds = load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.classes = 10;
    ds.split = split;
    Ok(ds)
}

fn bilinear(src: &[f32], h: usize, w: usize, c: usize, target: usize, out: &mut Vec<f32>) {
    // Half-pixel centers, so an equal-size resize samples every pixel exactly.
    let coord = |dst: usize, len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * len as f64 / target as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, s - lo as f64)
    };
    for y in 0..target {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..target {
            let (x0, x1, fx) = coord(x, w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
}

/// Standardizes to mean 0 and standard deviation 1, with the deviation floored at 1e-6.
pub fn standardize(image: &mut [f32]) {
    let n = image.len() as f64;
    let mean = image.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = image.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-6);
    for x in image {
        *x = ((*x as f64 - mean) / sd) as f32;
    }
}

/// Bilinear resize of `[n, h, w, c]` images to `target × target`, then per-image
/// standardization.
pub fn preprocess(images: &Tensor<f32>, target: usize) -> Result<Tensor<f32>> {
    let d = images.dims();
    if d.len() != 4 {
        return shape_err("preprocess", format!("images {d:?} are not [n, h, w, c]"));
    }
    let (n, h, w, c) = (d[0], d[1], d[2], d[3]);
    if h < 8 || w < 8 || target == 0 {
        return Err(Error::InvalidShape(format!("cannot preprocess {h}x{w} images to {target}")));
    }
    let size = target * target * c;
    let mut out = Vec::with_capacity(n * size);
    for img in images.data().chunks_exact(h * w * c) {
        let start = out.len();
        bilinear(img, h, w, c, target, &mut out);
        standardize(&mut out[start..]);
    }
    Tensor::new([n, target, target, c], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Random crop, brightness and contrast.
    Train,
    /// Center crop only.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Side of the square crop.
    pub crop: usize,
    /// Additive brightness delta range.
    pub brightness: (f32, f32),
    /// Contrast factor range, applied about the image mean.
    pub contrast: (f32, f32),
    pub seed: u64,
}

impl AugmentConfig {
    /// No brightness or contrast change.
    pub fn crop_only(crop: usize) -> Self {
        AugmentConfig {
            crop,
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.crop == 0 || self.crop > h || self.crop > w {
            return Err(Error::InvalidConfig(format!("crop {} does not fit {h}x{w}", self.crop)));
        }
        let ordered = |(lo, hi): (f32, f32)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.brightness) || !ordered(self.contrast) || self.contrast.0 < 0.0 {
            return Err(Error::InvalidConfig("augmentation ranges must be ordered (contrast >= 0)".into()));
        }
        Ok(())
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Augments one `[h, w, c]` image with an RNG seeded from `cfg.seed`.
pub fn augment(image: &Tensor<f32>, cfg: &AugmentConfig, mode: AugmentMode) -> Result<Tensor<f32>> {
    augment_with(image, cfg, mode, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Crop, then additive brightness, then contrast about the cropped image's mean.
pub fn augment_with(image: &Tensor<f32>, cfg: &AugmentConfig, mode: AugmentMode, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let d = image.dims();
    if d.len() != 3 {
        return shape_err("augment", format!("image {d:?} is not [h, w, c]"));
    }
    let (h, w, c) = (d[0], d[1], d[2]);
    cfg.validate(h, w)?;
    let s = cfg.crop;
    let (oy, ox) = match mode {
        AugmentMode::Train => (rng.random_range(0..=h - s), rng.random_range(0..=w - s)),
        AugmentMode::Eval => ((h - s) / 2, (w - s) / 2),
    };
    let mut out = Vec::with_capacity(s * s * c);
    for y in oy..oy + s {
        out.extend_from_slice(&image.data()[(y * w + ox) * c..(y * w + ox + s) * c]);
    }
    if mode == AugmentMode::Train {
        let delta = sample(rng, cfg.brightness);
        let factor = sample(rng, cfg.contrast);
        out.iter_mut().for_each(|x| *x += delta);
        if factor != 1.0 {
            let mean = out.iter().sum::<f32>() / out.len() as f32;
            out.iter_mut().for_each(|x| *x = (*x - mean) * factor + mean);
        }
    }
    Tensor::new([s, s, c], out)
}

/// Glyph strokes as line segments in `[-1, 1]²`.
fn glyph(class: usize) -> Vec<[f64; 4]> {
    let polygon = |pts: &[(f64, f64)]| -> Vec<[f64; 4]> {
        (0..pts.len())
            .map(|k| {
                let (a, b) = (pts[k], pts[(k + 1) % pts.len()]);
                [a.0, a.1, b.0, b.1]
            })
            .collect()
    };
    match class {
        // vertical bar
        0 => vec![[0.0, -0.8, 0.0, 0.8]],
        // cross
        1 => vec![[-0.7, -0.7, 0.7, 0.7], [-0.7, 0.7, 0.7, -0.7]],
        // square
        2 => polygon(&[(-0.6, -0.6), (0.6, -0.6), (0.6, 0.6), (-0.6, 0.6)]),
        // triangle
        3 => polygon(&[(0.0, -0.75), (0.7, 0.6), (-0.7, 0.6)]),
        // ring
        4 => {
            let pts: Vec<(f64, f64)> = (0..12)
                .map(|k| {
                    let t = k as f64 * std::f64::consts::TAU / 12.0;
                    (0.65 * t.cos(), 0.65 * t.sin())
                })
                .collect();
            polygon(&pts)
        }
        // plus
        5 => vec![[-0.75, 0.0, 0.75, 0.0], [0.0, -0.75, 0.0, 0.75]],
        // L
        6 => vec![[-0.5, -0.8, -0.5, 0.7], [-0.5, 0.7, 0.6, 0.7]],
        // T
        7 => vec![[-0.7, -0.7, 0.7, -0.7], [0.0, -0.7, 0.0, 0.8]],
        // Z
        8 => vec![[-0.6, -0.7, 0.6, -0.7], [0.6, -0.7, -0.6, 0.7], [-0.6, 0.7, 0.6, 0.7]],
        // two bars
        _ => vec![[-0.4, -0.8, -0.4, 0.8], [0.4, -0.8, 0.4, 0.8]],
    }
}

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - s[0]) * dx + (py - s[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    ((px - s[0] - t * dx).powi(2) + (py - s[1] - t * dy).powi(2)).sqrt()
}

/// Side of the synthetic glyph images.
pub const GLYPH_SIZE: usize = 32;

/// `n_per_class` images of each of `classes` (≤ 10) procedural glyphs, each under a
/// random rotation (±30°), scale (0.75–1.1) and translation (±3 px), in `[0, 1]`.
/// Examples are shuffled; labels are exactly balanced.
pub fn synth_affine_glyphs(classes: usize, n_per_class: usize, seed: u64, split: Split) -> Result<Dataset> {
    if classes == 0 || classes > 10 {
        return Err(Error::InvalidConfig(format!("glyph classes must be in 1..=10, got {classes}")));
    }
    if n_per_class == 0 {
        return Err(Error::EmptyInput("glyph dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..classes).flat_map(|k| std::iter::repeat_n(k, n_per_class)).collect();
    labels.shuffle(&mut rng);
    let size = GLYPH_SIZE;
    let half = size as f64 / 2.0;
    let mut pixels = Vec::with_capacity(labels.len() * size * size);
    for &label in &labels {
        let strokes = glyph(label);
        let angle = rng.random_range(-30f64..30.0).to_radians();
        let scale = rng.random_range(0.75..1.1) * 0.7 * half;
        let (tx, ty) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (sin, cos) = angle.sin_cos();
        let placed: Vec<[f64; 4]> = strokes
            .iter()
            .map(|s| {
                let map = |x: f64, y: f64| (scale * (cos * x - sin * y) + half + tx, scale * (sin * x + cos * y) + half + ty);
                let (a, b) = map(s[0], s[1]);
                let (c, d) = map(s[2], s[3]);
                [a, b, c, d]
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let dist = placed.iter().map(|s| segment_distance(px, py, s)).fold(f64::INFINITY, f64::min);
                // Strokes are about two pixels wide with a one-pixel ramp.
                pixels.push((2.0 - dist).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let images = Tensor::new([labels.len(), size, size, 1], pixels)?;
    Dataset::new(images, labels, classes, split)
}
