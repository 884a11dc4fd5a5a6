//! Dataset ingestion, deterministic splits, normalization, and a synthetic
//! edge-image corpus for fast tests.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

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

/// Classes of the synthetic corpus: four edge orientations plus "none".
pub const SYNTHETIC_CLASSES: [&str; 5] = [
    "horizontal",
    "vertical",
    "positive_diagonal",
    "negative_diagonal",
    "none",
];

/// Images in `[0,1]` with integer class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(C, H, W)` of a single image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_numel(&self) -> usize {
        let (c, h, w) = self.image_shape();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_numel();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.shape()[0];
        if n != self.labels.len() {
            return Err(Error::Shape(format!(
                "{n} images with {} labels",
                self.labels.len()
            )));
        }
        let k = self.classes();
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range [0,{k})")));
        }
        if !self.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Contract("image values must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// View of the whole dataset.
    pub fn view(&self) -> DatasetView<'_> {
        DatasetView {
            dataset: self,
            indices: (0..self.len()).collect(),
        }
    }

    /// Keeps at most `cap` images per class, in record order. `cap = 0`
    /// means no cap.
    pub fn cap_per_class(&self, cap: usize) -> DatasetView<'_> {
        if cap == 0 {
            return self.view();
        }
        let mut kept = vec![0usize; self.classes()];
        let indices = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i];
                kept[c] += 1;
                kept[c] <= cap
            })
            .collect();
        DatasetView {
            dataset: self,
            indices,
        }
    }
}

/// An index-based subset of a [`LabeledDataset`].
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub dataset: &'a LabeledDataset,
    pub indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.dataset.labels[self.indices[i]]
    }

    /// Materializes a batch `[B, C, H, W]` plus labels for view positions
    /// `positions`.
    pub fn gather(&self, positions: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.dataset.image_shape();
        let n = c * h * w;
        let mut data = Vec::with_capacity(positions.len() * n);
        let mut labels = Vec::with_capacity(positions.len());
        for &p in positions {
            let idx = self.indices[p];
            data.extend_from_slice(self.dataset.image(idx));
            labels.push(self.dataset.labels[idx]);
        }
        (
            Tensor::new(vec![positions.len(), c, h, w], data).expect("gather shape"),
            labels,
        )
    }

    /// Keeps the first `cap` items of the view (`0` = no cap).
    pub fn take(&self, cap: usize) -> DatasetView<'a> {
        let indices = if cap == 0 || cap >= self.indices.len() {
            self.indices.clone()
        } else {
            self.indices[..cap].to_vec()
        };
        DatasetView {
            dataset: self.dataset,
            indices,
        }
    }
}

// ---- CIFAR-10 binary batches ---------------------------------------------

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixel bytes
const CIFAR_PER_FILE: usize = 10_000;
const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

fn read_cifar_file(path: &Path, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<usize> {
    let mut file = File::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        offset: 0,
        detail: e.to_string(),
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        offset: 0,
        detail: e.to_string(),
    })?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
            detail: format!(
                "file length {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let records = bytes.len() / CIFAR_RECORD;
    for r in 0..records {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES.len() {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD) as u64,
                detail: format!("label byte {label} out of range"),
            });
        }
        labels.push(label);
        // channel-planar R, G, B
        images.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(records)
}

/// Loads the standard binary batches: five training files plus
/// `test_batch.bin`, each holding 3073-byte records (label byte followed by
/// channel-planar RGB pixels). Pixels are scaled to `[0,1]`; record order is
/// preserved.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let class_names: Vec<String> = CIFAR_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        let path = dir.join(name);
        let records = read_cifar_file(&path, &mut train_images, &mut train_labels)?;
        if records != CIFAR_PER_FILE {
            return Err(Error::Ingest {
                path,
                offset: (records * CIFAR_RECORD) as u64,
                detail: format!("expected {CIFAR_PER_FILE} records, found {records}"),
            });
        }
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_file(
        &dir.join(CIFAR_TEST_FILE),
        &mut test_images,
        &mut test_labels,
    )?;

    let n_train = train_labels.len();
    let n_test = test_labels.len();
    Ok((
        LabeledDataset {
            images: Tensor::new(vec![n_train, 3, 32, 32], train_images)?,
            labels: train_labels,
            class_names: class_names.clone(),
        },
        LabeledDataset {
            images: Tensor::new(vec![n_test, 3, 32, 32], test_images)?,
            labels: test_labels,
            class_names,
        },
    ))
}

// ---- IDX (MNIST-style) -----------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, offset as u64, "truncated header"))
}

/// Reads an IDX image file (magic `0x00000803`) into `[N, 1, H, W]` in `[0,1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| idx_err(path, 0, e.to_string()))?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(path, 0, format!("bad magic {magic:#010x}")));
    }
    let n = read_be_u32(&bytes, 4, path)? as usize;
    let h = read_be_u32(&bytes, 8, path)? as usize;
    let w = read_be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(idx_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], data)
}

/// Reads an IDX label file (magic `0x00000801`).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| idx_err(path, 0, e.to_string()))?;
    let magic = read_be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(path, 0, format!("bad magic {magic:#010x}")));
    }
    let n = read_be_u32(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(idx_err(
            path,
            bytes.len().min(8 + n) as u64,
            format!("expected {} bytes, found {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

// ---- splits ----------------------------------------------------------------

/// How to carve a validation set out of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of each class routed to validation.
    pub val_fraction: f64,
    pub seed: u64,
    /// Per-class stratification (on by default).
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            val_fraction: 0.10,
            seed: 0,
            stratified: true,
        }
    }
}

/// Splits a view into `(train, val)`. With stratification, exactly
/// `round(val_fraction * n_c)` samples of every class go to validation,
/// chosen by seeded shuffle; the results are disjoint and exhaustive over
/// the input view (so capping composes with splitting).
pub fn stratified_split<'a>(
    view: &DatasetView<'a>,
    spec: &SplitSpec,
) -> Result<(DatasetView<'a>, DatasetView<'a>)> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must be in (0,1), got {}",
            spec.val_fraction
        )));
    }
    let ds = view.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    if spec.stratified {
        let min_per_class = (1.0 / spec.val_fraction).ceil() as usize;
        for class in 0..ds.classes() {
            let mut members: Vec<usize> = view
                .indices
                .iter()
                .copied()
                .filter(|&i| ds.labels[i] == class)
                .collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < min_per_class {
                return Err(Error::Config(format!(
                    "class {class} has {} samples, needs at least {min_per_class} for a {} split",
                    members.len(),
                    spec.val_fraction
                )));
            }
            members.shuffle(&mut rng);
            let n_val = (spec.val_fraction * members.len() as f64).round() as usize;
            val_idx.extend_from_slice(&members[..n_val]);
            train_idx.extend_from_slice(&members[n_val..]);
        }
    } else {
        let mut all = view.indices.clone();
        all.shuffle(&mut rng);
        let n_val = (spec.val_fraction * all.len() as f64).round() as usize;
        val_idx.extend_from_slice(&all[..n_val]);
        train_idx.extend_from_slice(&all[n_val..]);
    }
    // deterministic iteration order independent of the shuffle
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        DatasetView {
            dataset: ds,
            indices: train_idx,
        },
        DatasetView {
            dataset: ds,
            indices: val_idx,
        },
    ))
}

// ---- normalization -----------------------------------------------------------

/// Per-channel standardization constants, persisted as a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Config(format!(
                "{} means for {} stds",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("std must be positive per channel".into()));
        }
        Ok(Self { mean, std })
    }

    /// Identity transform for `channels` channels.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and population std over a view. Stds are floored at
    /// `1e-6` so constant channels stay usable.
    pub fn fit(view: &DatasetView<'_>) -> Result<Self> {
        if view.is_empty() {
            return Err(Error::Config(
                "cannot fit a normalizer on an empty view".into(),
            ));
        }
        let (c, h, w) = view.dataset.image_shape();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sumsq = vec![0.0f64; c];
        for &idx in &view.indices {
            let img = view.dataset.image(idx);
            for ci in 0..c {
                for &v in &img[ci * plane..(ci + 1) * plane] {
                    sum[ci] += v;
                    sumsq[ci] += v * v;
                }
            }
        }
        let count = (view.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std: Vec<f64> = sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / count - m * m).max(0.0)).sqrt().max(1e-6))
            .collect();
        Self::new(mean, std)
    }

    /// `(x - mean) / std`, per channel, for a `[B,C,H,W]` batch.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.transform(x, false)
    }

    /// Inverse transform `x * std + mean`.
    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.transform(x, true)
    }

    fn transform(&self, x: &Tensor, inverse: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.mean.len() {
            return Err(Error::Config(format!(
                "normalizer fitted for {} channels, batch has {c}",
                self.mean.len()
            )));
        }
        let mut out = x.clone();
        let plane = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let (m, s) = (self.mean[ci], self.std[ci]);
                for v in &mut out.data_mut()[base..base + plane] {
                    *v = if inverse { *v * s + m } else { (*v - m) / s };
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let n: Self = serde_json::from_str(&json)?;
        Self::new(n.mean, n.std)
    }
}

// ---- synthetic edge corpus ---------------------------------------------------

fn fill_plane(img: &mut [f64], size: usize, f: impl Fn(usize, usize) -> f64) {
    // one gray plane replicated over three channels
    for y in 0..size {
        for x in 0..size {
            let v = f(y, x);
            for ci in 0..3 {
                img[ci * size * size + y * size + x] = v;
            }
        }
    }
}

/// Deterministic corpus of step-edge images over constant backgrounds,
/// labeled by edge orientation (plus a "none" class of constant images).
/// Images are `[3, size, size]` grayscale replicated over RGB.
pub fn synthetic_edges(count: usize, size: usize, seed: u64) -> Result<LabeledDataset> {
    if size < 8 {
        return Err(Error::Config(format!(
            "size must be at least 8, got {size}"
        )));
    }
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0.0f64; count * 3 * size * size];
    let mut labels = Vec::with_capacity(count);
    let n = 3 * size * size;
    for i in 0..count {
        let class = i % SYNTHETIC_CLASSES.len();
        let img = &mut images[i * n..(i + 1) * n];
        let lo = rng.gen_range(0.0..0.25);
        let hi = rng.gen_range(0.75..1.0);
        // bright side first: positive response bands survive the layer's
        // max pooling, which runs before rectification
        let (a, b) = (hi, lo);
        let cut = rng.gen_range(size / 4..size * 3 / 4);
        match class {
            // horizontal edge: step across rows
            0 => fill_plane(img, size, |y, _| if y < cut { a } else { b }),
            // vertical edge: step across columns
            1 => fill_plane(img, size, |_, x| if x < cut { a } else { b }),
            // positive diagonal: step across the anti-diagonal y + x
            2 => {
                let c2 = cut + size / 4;
                fill_plane(img, size, |y, x| if y + x < c2 { a } else { b })
            }
            // negative diagonal: step across y - x
            3 => {
                let c2 = cut as isize - (size / 2) as isize;
                fill_plane(img, size, |y, x| {
                    if (y as isize - x as isize) < c2 {
                        a
                    } else {
                        b
                    }
                })
            }
            // constant background
            _ => {
                let level = rng.gen_range(0.2..0.8);
                fill_plane(img, size, |_, _| level)
            }
        }
        labels.push(class);
    }
    Ok(LabeledDataset {
        images: Tensor::new(vec![count, 3, size, size], images)?,
        labels,
        class_names: SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    /// Builds a CIFAR batch file of hand-crafted records.
    fn write_cifar_file(dir: &Path, name: &str, records: &[(u8, u8)]) -> PathBuf {
        // each record: label byte, then all 3072 pixels set to the same value
        let mut bytes = Vec::new();
        for &(label, pixel) in records {
            bytes.push(label);
            bytes.extend(std::iter::repeat_n(pixel, 3072));
        }
        let path = dir.join(name);
        std::fs::write(&path, bytes).unwrap();
        path
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("sbfm-data-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn cifar_fixture_decodes_byte_exactly() {
        let dir = temp_dir("fixture");
        let path = write_cifar_file(&dir, "two.bin", &[(6, 0), (2, 255)]);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let records = read_cifar_file(&path, &mut images, &mut labels).unwrap();
        assert_eq!(records, 2);
        assert_eq!(labels, vec![6, 2]);
        assert!(images[..3072].iter().all(|&v| v == 0.0));
        assert!(images[3072..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar_missing_and_short_files_are_ingest_errors() {
        let dir = temp_dir("errors");
        let missing = load_cifar10(&dir);
        match missing {
            Err(Error::Ingest { path, .. }) => {
                assert!(path.to_string_lossy().contains("data_batch_1.bin"))
            }
            other => panic!("expected ingest error, got {other:?}"),
        }

        // a truncated record must name the offending offset
        let path = dir.join("short.bin");
        std::fs::write(&path, vec![0u8; CIFAR_RECORD + 10]).unwrap();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        match read_cifar_file(&path, &mut images, &mut labels) {
            Err(Error::Ingest { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn idx_fixtures_roundtrip() {
        let dir = temp_dir("idx");
        let img_path = dir.join("imgs.idx");
        let mut bytes = Vec::new();
        bytes.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(2u32.to_be_bytes());
        bytes.extend(3u32.to_be_bytes());
        bytes.extend((0u8..12).map(|i| i * 20));
        std::fs::write(&img_path, &bytes).unwrap();
        let images = load_idx_images(&img_path).unwrap();
        assert_eq!(images.shape(), &[2, 1, 2, 3]);
        assert_eq!(images.data()[1], 20.0 / 255.0);

        let lab_path = dir.join("labels.idx");
        let mut bytes = Vec::new();
        bytes.extend(IDX_LABELS_MAGIC.to_be_bytes());
        bytes.extend(3u32.to_be_bytes());
        bytes.extend([7u8, 0, 9]);
        std::fs::write(&lab_path, &bytes).unwrap();
        assert_eq!(load_idx_labels(&lab_path).unwrap(), vec![7, 0, 9]);

        // wrong magic
        std::fs::write(&lab_path, 99u32.to_be_bytes()).unwrap();
        assert!(load_idx_labels(&lab_path).is_err());
    }

    #[test]
    fn split_is_stratified_deterministic_and_exhaustive() {
        let ds = synthetic_edges(200, 8, 3).unwrap();
        let spec = SplitSpec {
            val_fraction: 0.10,
            seed: 11,
            stratified: true,
        };
        let (train, val) = stratified_split(&ds.view(), &spec).unwrap();
        // 40 per class, 10% -> 4 to val per class
        assert_eq!(val.len(), 20);
        assert_eq!(train.len(), 180);
        for class in 0..5 {
            let n = val
                .indices
                .iter()
                .filter(|&&i| ds.labels[i] == class)
                .count();
            assert_eq!(n, 4, "class {class}");
        }
        // disjoint and exhaustive
        let mut union: Vec<usize> = train.indices.iter().chain(&val.indices).copied().collect();
        union.sort_unstable();
        assert_eq!(union, (0..200).collect::<Vec<_>>());
        // same seed, same split
        let (train2, val2) = stratified_split(&ds.view(), &spec).unwrap();
        assert_eq!(train.indices, train2.indices);
        assert_eq!(val.indices, val2.indices);
        // different seed, different split
        let (_, val3) = stratified_split(&ds.view(), &SplitSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(val.indices, val3.indices);
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let ds = synthetic_edges(10, 8, 0).unwrap(); // 2 per class
        let spec = SplitSpec {
            val_fraction: 0.10,
            seed: 0,
            stratified: true,
        };
        assert!(matches!(
            stratified_split(&ds.view(), &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn normalizer_roundtrips_and_validates() {
        let ds = synthetic_edges(40, 8, 7).unwrap();
        let view = ds.view();
        let norm = Normalizer::fit(&view).unwrap();
        let (batch, _) = view.gather(&[0, 1, 2]);
        let fwd = norm.apply(&batch).unwrap();
        let back = norm.invert(&fwd).unwrap();
        for (a, b) in batch.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // identity leaves data untouched
        let id = Normalizer::identity(3);
        assert_eq!(id.apply(&batch).unwrap().data(), batch.data());
        // constant image at the mean maps to zero
        let m = Normalizer::new(vec![0.5, 0.5, 0.5], vec![2.0, 2.0, 2.0]).unwrap();
        let constant = Tensor::full(vec![1, 3, 2, 2], 0.5);
        assert!(m.apply(&constant).unwrap().data().iter().all(|&v| v == 0.0));
        // invalid stds are rejected
        assert!(Normalizer::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn normalizer_sidecar_roundtrip() {
        let dir = temp_dir("sidecar");
        let path = dir.join("normalization.json");
        let n = Normalizer::new(vec![0.4, 0.5, 0.6], vec![0.2, 0.25, 0.3]).unwrap();
        n.save(&path).unwrap();
        assert_eq!(Normalizer::load(&path).unwrap(), n);
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_valid() {
        let a = synthetic_edges(25, 8, 99).unwrap();
        let b = synthetic_edges(25, 8, 99).unwrap();
        assert!(a.images.bits_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        a.validate().unwrap();
        assert_eq!(a.classes(), 5);
        // round-robin labels cover every class
        for class in 0..5 {
            assert!(a.labels.contains(&class));
        }
        assert!(synthetic_edges(10, 4, 0).is_err(), "size below 8 rejected");
    }

    #[test]
    fn cap_per_class_keeps_record_order() {
        let ds = synthetic_edges(50, 8, 1).unwrap();
        let capped = ds.cap_per_class(3);
        assert_eq!(capped.len(), 15);
        let mut last = 0;
        for &i in &capped.indices {
            assert!(i >= last);
            last = i;
        }
        for class in 0..5 {
            let n = capped
                .indices
                .iter()
                .filter(|&&i| ds.labels[i] == class)
                .count();
            assert_eq!(n, 3);
        }
    }
}
