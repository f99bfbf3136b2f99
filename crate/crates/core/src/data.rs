//! Dataset representation and ingestion.
//!
//! * CIFAR-10 binary batches (`data_batch_{1..5}.bin`, `test_batch.bin`):
//!   3073-byte records, one label byte then 3072 channel-major pixels.
//! * CIFAR-10-C: one `<corruption>.npy` per type, `uint8 [5*10000, 32, 32, 3]`
//!   (HWC, severities 1..5 in blocks of 10000) plus `labels.npy`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array4, Axis};
use ndarray_npy::ReadNpyExt;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::{ImageBatch, LabeledBatch};
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// The 19 CIFAR-10-C corruption types.
pub const CORRUPTIONS: [&str; 19] = [
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "glass_blur",
    "motion_blur",
    "zoom_blur",
    "snow",
    "frost",
    "fog",
    "brightness",
    "contrast",
    "elastic_transform",
    "pixelate",
    "jpeg_compression",
    "speckle_noise",
    "gaussian_blur",
    "spatter",
    "saturate",
];
pub const SEVERITIES: usize = 5;

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub num_classes: usize,
    /// Retained portion of the original training set.
    pub fraction: f64,
}

impl DatasetSplit {
    pub fn class_counts(batch: &LabeledBatch, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &batch.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Class-stratified, seed-deterministic subsample of the training set.
///
/// Each class keeps `floor(fraction * count)` samples; original order is kept.
pub fn stratified_fraction(split: &DatasetSplit, fraction: f64, rng: RngState) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(split.clone());
    }
    let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in split.train.labels.iter().enumerate() {
        per_class.entry(l).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (class, mut idx) in per_class {
        let n = (fraction * idx.len() as f64 + 1e-9).floor() as usize;
        if n == 0 {
            return Err(Error::invalid(format!(
                "fraction {fraction} leaves class {class} empty ({} samples)",
                idx.len()
            )));
        }
        let mut g = rng.derive("stratified", class as u64).generator();
        idx.shuffle(&mut g);
        keep.extend_from_slice(&idx[..n]);
    }
    keep.sort_unstable();
    Ok(DatasetSplit {
        train: split.train.select(&keep),
        test: split.test.clone(),
        num_classes: split.num_classes,
        fraction: split.fraction * fraction,
    })
}

/// Decodes concatenated CIFAR-10 binary records.
pub fn decode_cifar_records(bytes: &[u8], path: &Path) -> Result<LabeledBatch> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::MalformedData {
            path: path.to_path_buf(),
            message: format!(
                "length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Array4::from_shape_vec((n, 3, 32, 32), pixels).expect("record size checked");
    LabeledBatch::new(ImageBatch::new(images)?, labels, 10).map_err(|e| Error::MalformedData {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_file(path: &Path, expected: &str) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::DatasetMissing {
            path: path.to_path_buf(),
            expected: expected.to_string(),
        });
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads CIFAR-10 from the directory holding the binary batch files.
pub fn load_cifar10(dir: &Path) -> Result<DatasetSplit> {
    let expected = "CIFAR-10 binary version (cifar-10-batches-bin: data_batch_1..5.bin, test_batch.bin)";
    let mut parts = Vec::new();
    for f in CIFAR_TRAIN_FILES {
        let p = dir.join(f);
        parts.push(decode_cifar_records(&read_file(&p, expected)?, &p)?);
    }
    let p = dir.join(CIFAR_TEST_FILE);
    let test = decode_cifar_records(&read_file(&p, expected)?, &p)?;
    let imgs: Vec<&ImageBatch> = parts.iter().map(|b| &b.images).collect();
    let train = LabeledBatch {
        images: ImageBatch::concat(&imgs)?,
        labels: parts.iter().flat_map(|b| b.labels.iter().copied()).collect(),
    };
    Ok(DatasetSplit {
        train,
        test,
        num_classes: 10,
        fraction: 1.0,
    })
}

/// Resolves the CIFAR-10 directory under a dataset root.
pub fn cifar10_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// One corruption type at all severities.
#[derive(Debug, Clone)]
pub struct CorruptionSet {
    pub name: String,
    /// Index `s` holds severity `s + 1`.
    pub severities: Vec<LabeledBatch>,
}

/// Converts `uint8 [N, H, W, C]` into `[N, C, H, W]` in `[0, 1]`.
pub fn hwc_u8_to_batch(arr: &Array4<u8>) -> ImageBatch {
    let nchw = arr.view().permuted_axes([0, 3, 1, 2]);
    ImageBatch::clipped(nchw.mapv(|b| b as f32 / 255.0).as_standard_layout().into_owned())
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path, "labels.npy (uint8 or int64 vector)")?;
    if let Ok(a) = Array1::<u8>::read_npy(bytes.as_slice()) {
        return Ok(a.iter().map(|&v| v as usize).collect());
    }
    if let Ok(a) = Array1::<i64>::read_npy(bytes.as_slice()) {
        return Ok(a.iter().map(|&v| v.max(0) as usize).collect());
    }
    Err(Error::MalformedData {
        path: path.to_path_buf(),
        message: "expected a uint8 or int64 NPY vector".into(),
    })
}

/// Loads one corruption file. Labels of length `per_severity` are repeated
/// for each severity; labels of length `5 * per_severity` are used as-is.
pub fn load_corruption(dir: &Path, name: &str) -> Result<CorruptionSet> {
    let path = dir.join(format!("{name}.npy"));
    let bytes = read_file(&path, "NPY uint8 array [5*N, 32, 32, 3]")?;
    let arr = Array4::<u8>::read_npy(bytes.as_slice()).map_err(|e| Error::MalformedData {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let total = arr.shape()[0];
    if total % SEVERITIES != 0 {
        return Err(Error::MalformedData {
            path,
            message: format!("{total} images is not divisible by {SEVERITIES} severities"),
        });
    }
    let per = total / SEVERITIES;
    let labels = read_labels(&dir.join("labels.npy"))?;
    let labels: Vec<usize> = if labels.len() == per {
        labels.iter().copied().cycle().take(total).collect()
    } else if labels.len() == total {
        labels
    } else {
        return Err(Error::MalformedData {
            path: dir.join("labels.npy"),
            message: format!("expected {per} or {total} labels, got {}", labels.len()),
        });
    };
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut severities = Vec::with_capacity(SEVERITIES);
    for s in 0..SEVERITIES {
        let block = arr.slice_axis(Axis(0), ndarray::Slice::from(s * per..(s + 1) * per));
        let images = hwc_u8_to_batch(&block.to_owned());
        severities.push(LabeledBatch::new(
            images,
            labels[s * per..(s + 1) * per].to_vec(),
            num_classes.max(10),
        )?);
    }
    Ok(CorruptionSet {
        name: name.to_string(),
        severities,
    })
}

/// Loads every present corruption type; missing files are reported by name.
pub fn load_corruptions(dir: &Path, names: &[&str]) -> Result<(Vec<CorruptionSet>, Vec<String>)> {
    let mut sets = Vec::new();
    let mut missing = Vec::new();
    for &name in names {
        if !dir.join(format!("{name}.npy")).exists() {
            log::warn!("corruption `{name}` not found in {}, skipping", dir.display());
            missing.push(name.to_string());
            continue;
        }
        sets.push(load_corruption(dir, name)?);
    }
    Ok((sets, missing))
}

/// Synthetic class-conditional images for desk-scale runs and tests.
///
/// Each class has a fixed mean color and an oriented stripe pattern; samples
/// add Gaussian pixel noise and a random spatial shift, then clip to `[0, 1]`.
pub fn synthetic_split(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    shape: (usize, usize, usize),
    rng: RngState,
) -> DatasetSplit {
    let (c, h, w) = shape;
    let mut proto_rng = rng.derive("synthetic-prototypes", 0).generator();
    let protos: Vec<(Vec<f32>, f32, f32)> = (0..num_classes)
        .map(|_| {
            let color: Vec<f32> = (0..c).map(|_| proto_rng.gen_range(0.25..0.75)).collect();
            let angle = proto_rng.gen_range(0.0..std::f32::consts::PI);
            let freq = proto_rng.gen_range(0.3..0.9);
            (color, angle, freq)
        })
        .collect();
    let make = |per_class: usize, tag: &str| -> LabeledBatch {
        let n = per_class * num_classes;
        let mut g = rng.derive(tag, 0).generator();
        let noise = Normal::new(0.0f32, 0.08).expect("valid sigma");
        let mut data = Array4::<f32>::zeros((n, c, h, w));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % num_classes;
            labels.push(class);
            let (color, angle, freq) = &protos[class];
            let (sx, sy) = (g.gen_range(0.0..std::f32::consts::TAU), g.gen_range(-2.0..2.0f32));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let t = (x as f32 * angle.cos() + (y as f32 + sy) * angle.sin()) * freq + sx;
                        let v = color[ch] + 0.2 * t.sin() + noise.sample(&mut g);
                        data[[i, ch, y, x]] = v;
                    }
                }
            }
        }
        LabeledBatch {
            images: ImageBatch::clipped(data),
            labels,
        }
    };
    DatasetSplit {
        train: make(train_per_class, "synthetic-train"),
        test: make(test_per_class, "synthetic-test"),
        num_classes,
        fraction: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_split(per_class: usize, classes: usize) -> DatasetSplit {
        let n = per_class * classes;
        let imgs = ImageBatch::new(Array4::from_shape_fn((n, 1, 2, 2), |(i, ..)| {
            (i % 5) as f32 / 5.0
        }))
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let train = LabeledBatch::new(imgs.clone(), labels.clone(), classes).unwrap();
        DatasetSplit {
            test: train.clone(),
            train,
            num_classes: classes,
            fraction: 1.0,
        }
    }

    #[test]
    fn fraction_one_is_identity() {
        let s = toy_split(20, 3);
        let r = stratified_fraction(&s, 1.0, RngState::new(1)).unwrap();
        assert_eq!(r.train, s.train);
    }

    #[test]
    fn cifar_sized_fraction_counts() {
        let s = toy_split(5000, 10);
        let r = stratified_fraction(&s, 0.1, RngState::new(3)).unwrap();
        assert_eq!(r.train.len(), 5000);
        assert_eq!(DatasetSplit::class_counts(&r.train, 10), vec![500; 10]);
    }

    #[test]
    fn fraction_is_deterministic_and_seed_sensitive() {
        let s = toy_split(50, 4);
        let a = stratified_fraction(&s, 0.2, RngState::new(9)).unwrap();
        let b = stratified_fraction(&s, 0.2, RngState::new(9)).unwrap();
        let c = stratified_fraction(&s, 0.2, RngState::new(10)).unwrap();
        assert_eq!(a.train, b.train);
        assert_ne!(a.train.images, c.train.images);
    }

    #[test]
    fn fraction_emptying_a_class_errors() {
        let s = toy_split(3, 2);
        assert!(stratified_fraction(&s, 0.1, RngState::new(0)).is_err());
        assert!(stratified_fraction(&s, 0.0, RngState::new(0)).is_err());
        assert!(stratified_fraction(&s, 1.5, RngState::new(0)).is_err());
    }

    #[test]
    fn decodes_cifar_record_layout() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let b = decode_cifar_records(&rec, Path::new("mem")).unwrap();
        assert_eq!(b.labels, vec![7]);
        let d = b.images.data();
        // channel-major: pixel (c, y, x) is byte 1 + c*1024 + y*32 + x
        assert_eq!(d[[0, 0, 0, 1]], 1.0 / 255.0);
        assert_eq!(d[[0, 1, 0, 0]], (1024 % 256) as f32 / 255.0);
        assert_eq!(d[[0, 2, 1, 3]], ((2048 + 35) % 256) as f32 / 255.0);
        assert!(decode_cifar_records(&rec[..100], Path::new("mem")).is_err());
    }

    #[test]
    fn missing_cifar_names_the_path() {
        let err = load_cifar10(Path::new("/nonexistent/cifar")).unwrap_err();
        assert!(matches!(err, Error::DatasetMissing { .. }));
        assert!(err.to_string().contains("data_batch_1.bin"));
    }

    #[test]
    fn hwc_conversion() {
        let mut a = Array4::<u8>::zeros((1, 2, 2, 3));
        a[[0, 1, 0, 2]] = 255;
        let b = hwc_u8_to_batch(&a);
        assert_eq!(b.data()[[0, 2, 1, 0]], 1.0);
        assert_eq!(b.data().sum(), 1.0);
    }

    #[test]
    fn corruption_roundtrip_via_npy() {
        use ndarray_npy::WriteNpyExt;
        let dir = tempfile::tempdir().unwrap();
        let per = 4;
        let arr = Array4::<u8>::from_shape_fn((5 * per, 32, 32, 3), |(i, ..)| (i * 10) as u8);
        arr.write_npy(fs::File::create(dir.path().join("fog.npy")).unwrap())
            .unwrap();
        Array1::<u8>::from(vec![0, 1, 2, 3])
            .write_npy(fs::File::create(dir.path().join("labels.npy")).unwrap())
            .unwrap();
        let (sets, missing) = load_corruptions(dir.path(), &["fog", "snow"]).unwrap();
        assert_eq!(missing, vec!["snow".to_string()]);
        let fog = &sets[0];
        assert_eq!(fog.severities.len(), 5);
        assert_eq!(fog.severities[2].labels, vec![0, 1, 2, 3]);
        assert_eq!(fog.severities[2].images.data()[[1, 0, 0, 0]], 90.0 / 255.0);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_split(3, 4, 2, (3, 8, 8), RngState::new(5));
        let b = synthetic_split(3, 4, 2, (3, 8, 8), RngState::new(5));
        assert_eq!(a.train, b.train);
        assert_eq!(a.test.len(), 6);
    }
}
