//! Image datasets in the `[0, 1]` pixel domain: the CIFAR-10 binary loader,
//! a synthetic blob-texture generator, augmentation and batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming the CIFAR-10 directory.
pub const DATA_DIR_ENV: &str = "ADVCLR_DATA_DIR";

pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];
const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image of shape (3, H, W) and its class id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor<f32>,
    pub label: usize,
}

/// Images stored contiguously, all of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    image_shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    split: Split,
}

impl Dataset {
    /// Builds a dataset from raw buffers, checking pixel range, labels and
    /// lengths.
    pub fn from_parts(
        image_shape: [usize; 3],
        pixels: Vec<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 {
            return Err(Error::invalid(format!("image shape {image_shape:?} has a zero dimension")));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} pixels for {} images of shape {image_shape:?}", pixels.len(), labels.len()),
            ));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "pixel {} of image {} is {} (outside [0, 1])",
                i % per,
                i / per,
                pixels[i]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            image_shape,
            pixels,
            labels,
            class_names,
            split,
        })
    }

    pub fn from_images(images: &[LabeledImage], class_names: Vec<String>, split: Split) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::invalid("cannot infer image shape from an empty list"));
        };
        let shape: [usize; 3] = first
            .pixels
            .shape()
            .try_into()
            .map_err(|_| Error::shape("dataset", format!("image shape {:?} is not (C, H, W)", first.pixels.shape())))?;
        let mut pixels = Vec::with_capacity(images.len() * first.pixels.len());
        for im in images {
            if im.pixels.shape() != shape {
                return Err(Error::shape("dataset", format!("mixed image shapes {shape:?} and {:?}", im.pixels.shape())));
            }
            pixels.extend_from_slice(im.pixels.data());
        }
        Self::from_parts(shape, pixels, images.iter().map(|im| im.label).collect(), class_names, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image_pixels(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize) -> LabeledImage {
        LabeledImage {
            pixels: Tensor::from_vec(self.image_shape.to_vec(), self.image_pixels(i).to_vec()).expect("consistent shape"),
            label: self.labels[i],
        }
    }

    /// Number of images per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range for {} images", self.len())));
            }
            pixels.extend_from_slice(self.image_pixels(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            image_shape: self.image_shape,
            pixels,
            labels,
            class_names: self.class_names.clone(),
            split: self.split,
        })
    }

    /// The first `n` images (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx).expect("indices in range")
    }

    /// Stacks the images at `indices` into a (B, C, H, W) batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let sub = self.select(indices)?;
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        Ok(Batch {
            x: Tensor::from_vec(shape, sub.pixels)?,
            labels: sub.labels,
            indices: indices.to_vec(),
        })
    }

    /// All images as one batch.
    pub fn as_batch(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx).expect("indices in range")
    }
}

/// A stacked mini-batch. `indices` point back into the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---------------------------------------------------------------------------
// CIFAR-10

/// Parses one CIFAR-10 binary batch. `name` is used in error messages.
pub fn parse_cifar_batch(bytes: &[u8], name: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let expected = CIFAR_RECORD * CIFAR_RECORDS_PER_FILE;
    if bytes.len() != expected {
        let detail = if bytes.len() < expected {
            format!("truncated record: file has {} bytes, expected {expected}", bytes.len())
        } else {
            format!("file has {} bytes, expected {expected}", bytes.len())
        };
        return Err(Error::Data {
            path: name.to_path_buf(),
            detail,
        });
    }
    let mut pixels = Vec::with_capacity(CIFAR_PIXELS * CIFAR_RECORDS_PER_FILE);
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_FILE);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES.len() {
            return Err(Error::Data {
                path: name.to_path_buf(),
                detail: format!("record {r} has label {label}"),
            });
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn read_cifar_file(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Data {
                path: path.to_path_buf(),
                detail: format!(
                    "missing file, expected {} bytes",
                    CIFAR_RECORD * CIFAR_RECORDS_PER_FILE
                ),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    parse_cifar_batch(&bytes, path)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let names: Vec<String> = CIFAR_CLASSES.iter().map(|s| s.to_string()).collect();
    let shape = [3, CIFAR_SIDE, CIFAR_SIDE];
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        let (p, l) = read_cifar_file(&dir.join(f))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let train = Dataset::from_parts(shape, pixels, labels, names.clone(), Split::Train)?;
    let (p, l) = read_cifar_file(&dir.join(CIFAR_TEST_FILE))?;
    let test = Dataset::from_parts(shape, p, l, names, Split::Test)?;
    Ok((train, test))
}

/// Data directory: the explicit value if given, else `ADVCLR_DATA_DIR`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Pattern seed shared by all splits so train and test draw the same classes.
pub const DEFAULT_PATTERN_SEED: u64 = 1000;

/// Each class is a fixed sum of coloured Gaussian blobs; each instance adds
/// i.i.d. pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub pattern_seed: u64,
    pub blobs_per_class: usize,
    pub amplitude: f32,
    pub noise: f32,
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            image_size,
            seed,
            pattern_seed: DEFAULT_PATTERN_SEED,
            blobs_per_class: 3,
            amplitude: 0.35,
            noise: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.image_size == 0 {
            return Err(Error::invalid("image_size must be >= 1"));
        }
        if !(self.amplitude >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::invalid("amplitude and noise must be >= 0"));
        }
        Ok(())
    }
}

fn class_templates(cfg: &SyntheticConfig) -> Vec<Vec<f64>> {
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pattern_seed);
    (0..cfg.num_classes)
        .map(|_| {
            let mut t = vec![0.0f64; 3 * s * s];
            for _ in 0..cfg.blobs_per_class {
                let cy = rng.random_range(0.0..s as f64);
                let cx = rng.random_range(0.0..s as f64);
                let sigma = rng.random_range(1.5..3.0) * s as f64 / 16.0;
                let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let g = (-d2 / (2.0 * sigma * sigma)).exp();
                        for (c, col) in colour.iter().enumerate() {
                            t[(c * s + y) * s + x] += col * g;
                        }
                    }
                }
            }
            t
        })
        .collect()
}

pub fn synthetic(cfg: &SyntheticConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let s = cfg.image_size;
    let per = 3 * s * s;
    let templates = class_templates(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.num_classes * cfg.per_class;
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    let (amp, noise) = (cfg.amplitude as f64, cfg.noise as f64);
    for (c, t) in templates.iter().enumerate() {
        for _ in 0..cfg.per_class {
            for &tv in t {
                let z: f64 = StandardNormal.sample(&mut rng);
                pixels.push((0.5 + amp * tv + noise * z).clamp(0.0, 1.0) as f32);
            }
            labels.push(c);
        }
    }
    let names = (0..cfg.num_classes).map(|c| format!("class{c}")).collect();
    Dataset::from_parts([3, s, s], pixels, labels, names, split)
}

/// Synthetic training split with default pattern and noise settings.
pub fn make_synthetic(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    synthetic(&SyntheticConfig::new(num_classes, per_class, image_size, seed), Split::Train)
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub enabled: bool,
    /// Reflection padding added on every side before a random crop back to
    /// the original size.
    pub crop_pad: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_pad: 4,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            crop_pad: 0,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::invalid(format!("hflip_prob must be in [0, 1], got {}", self.hflip_prob)));
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Augments one (C, H, W) image held in `src` into `dst`. Draws exactly
/// three values from `rng` when enabled (row offset, column offset, flip).
fn augment_slice<R: Rng + ?Sized>(
    src: &[f32],
    dst: &mut [f32],
    [c, h, w]: [usize; 3],
    policy: &AugmentPolicy,
    rng: &mut R,
) {
    if !policy.enabled {
        dst.copy_from_slice(src);
        return;
    }
    let pad = policy.crop_pad as i64;
    let dy = (rng.random_range(0..=2 * pad) - pad) as isize;
    let dx = (rng.random_range(0..=2 * pad) - pad) as isize;
    let flip = rng.random::<f64>() < policy.hflip_prob;
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect(y as isize + dy, h);
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = reflect(ox as isize + dx, w);
                dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
}

/// Random reflection-padded crop followed by a random horizontal flip.
pub fn augment<R: Rng + ?Sized>(image: &LabeledImage, policy: &AugmentPolicy, rng: &mut R) -> Result<LabeledImage> {
    policy.validate()?;
    let shape: [usize; 3] = image
        .pixels
        .shape()
        .try_into()
        .map_err(|_| Error::shape("augment", format!("image shape {:?} is not (C, H, W)", image.pixels.shape())))?;
    let mut out = vec![0.0; image.pixels.len()];
    augment_slice(image.pixels.data(), &mut out, shape, policy, rng);
    Ok(LabeledImage {
        pixels: Tensor::from_vec(shape.to_vec(), out)?,
        label: image.label,
    })
}

/// Augments every image of a (B, C, H, W) batch independently.
pub fn augment_batch<R: Rng + ?Sized>(x: &Tensor<f32>, policy: &AugmentPolicy, rng: &mut R) -> Result<Tensor<f32>> {
    policy.validate()?;
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("augment_batch", format!("expected (B, C, H, W), got {s:?}")));
    }
    let shape = [s[1], s[2], s[3]];
    let per: usize = shape.iter().product();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks_exact(per).zip(out.chunks_exact_mut(per)) {
        augment_slice(src, dst, shape, policy, rng);
    }
    Tensor::from_vec(s.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Batching

/// Iterator over one epoch of batches.
#[derive(Debug)]
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl BatchIter<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.dataset.batch(&self.order[self.pos..end]).expect("indices in range");
        self.pos = end;
        Some(b)
    }
}

/// One epoch of batches; the last batch may be smaller. With a seed the
/// order is a deterministic shuffle, otherwise dataset order.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot iterate over an empty dataset"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let pixels = (0..n * 12).map(|i| (i % 7) as f32 / 7.0).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        Dataset::from_parts([3, 2, 2], pixels, labels, vec!["a".into(), "b".into()], Split::Train).unwrap()
    }

    #[test]
    fn batch_sizes_and_order() {
        let d = tiny(10);
        let sizes: Vec<usize> = batch_iter(&d, 3, None).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, [3, 3, 3, 1]);
        let idx: Vec<usize> = batch_iter(&d, 4, None).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        let a: Vec<usize> = batch_iter(&d, 4, Some(3)).unwrap().flat_map(|b| b.indices).collect();
        let b: Vec<usize> = batch_iter(&d, 4, Some(3)).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_iter_rejects_empty_and_zero() {
        let d = tiny(0);
        assert!(batch_iter(&d, 3, None).is_err());
        assert!(batch_iter(&tiny(2), 0, None).is_err());
    }

    #[test]
    fn cifar_truncated_and_endpoint() {
        let err = parse_cifar_batch(&[0u8; 3072], Path::new("data_batch_1.bin")).unwrap_err();
        assert!(err.to_string().contains("truncated record"), "{err}");
        assert!(err.to_string().contains("data_batch_1.bin"));
        let mut bytes = vec![0u8; CIFAR_RECORD * CIFAR_RECORDS_PER_FILE];
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        let (p, l) = parse_cifar_batch(&bytes, Path::new("x")).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert_eq!((l[0], l[1]), (0, 9));
        bytes[0] = 10;
        assert!(parse_cifar_batch(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn missing_cifar_dir_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path()).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
        assert!(err.to_string().contains("30730000"), "{err}");
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let a = make_synthetic(10, 3, 8, 7).unwrap();
        let b = make_synthetic(10, 3, 8, 7).unwrap();
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.len(), 30);
        assert_eq!(a.class_counts(), vec![3; 10]);
        let c = make_synthetic(10, 3, 8, 8).unwrap();
        assert_ne!(a.pixels(), c.pixels());
        assert!(make_synthetic(1, 3, 8, 0).is_err());
        let empty = make_synthetic(2, 0, 8, 0).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn disabled_policy_is_identity() {
        let d = tiny(1);
        let im = d.get(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&im, &AugmentPolicy::disabled(), &mut rng).unwrap(), im);
    }

    #[test]
    fn hflip_swaps_halves() {
        let (h, w) = (4, 6);
        let px: Vec<f32> = (0..3 * h * w).map(|i| if i % w < w / 2 { 1.0 } else { 0.0 }).collect();
        let im = LabeledImage {
            pixels: Tensor::from_vec([3, h, w], px).unwrap(),
            label: 1,
        };
        let policy = AugmentPolicy {
            enabled: true,
            crop_pad: 0,
            hflip_prob: 1.0,
        };
        let out = augment(&im, &policy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let expect: Vec<f32> = (0..3 * h * w).map(|i| if i % w < w / 2 { 0.0 } else { 1.0 }).collect();
        assert_eq!(out.pixels.data(), &expect[..]);
        assert_eq!(out.label, 1);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(8, 5), 0);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }
}
