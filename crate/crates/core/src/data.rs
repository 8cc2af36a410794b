//! Image/mask ingestion, augmentation, fold splitting and a synthetic lesion
//! generator.
//!
//! Samples are stored channel-first: `image` is `[3, H, W]` in `[0, 1]` and
//! `mask` is `[1, H, W]` with values exactly 0 or 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
pub const MASK_SUFFIX: &str = "_segmentation";
/// Mask pixels above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        if image.rank() != 3 || image.dim(0) != 3 {
            return Err(Error::Data(format!("{id}: image must be [3, H, W], got {:?}", image.shape())));
        }
        if mask.shape() != [1, image.dim(1), image.dim(2)] {
            return Err(Error::Data(format!(
                "{id}: mask shape {:?} does not match image {:?}",
                mask.shape(),
                image.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("{id}: mask is not binary")));
        }
        Ok(Self { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.dim(1), t.dim(2));
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| to_u8(d[c * h * w + p])))
    })
}

pub fn gray_to_mask(img: &GrayImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([1, h, w], |i| if raw[i] > MASK_THRESHOLD { 1.0 } else { 0.0 })
}

/// Any `[1, H, W]` or `[H, W]` map, thresholded at 0.5, as a 0/255 image.
pub fn mask_to_gray<T: Scalar>(t: &Tensor<T>) -> GrayImage {
    let (h, w) = (t.dim(t.rank() - 2), t.dim(t.rank() - 1));
    let half = T::of(0.5);
    let d = t.data();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if d[y as usize * w + x as usize] >= half { 255 } else { 0 }])
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Data(format!("{}: image has a zero dimension", path.display())));
    }
    Ok(img)
}

fn stem_of(path: &Path) -> Option<String> {
    path.file_stem().and_then(|s| s.to_str()).map(str::to_owned)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files in `dir` keyed (and ordered) by stem.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && has_image_extension(&path) {
            if let Some(stem) = stem_of(&path) {
                out.insert(stem, path);
            }
        }
    }
    Ok(out)
}

/// Finds the mask for `stem`: `{stem}.png` or `{stem}_segmentation.png`.
pub fn find_mask(mask_dir: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{stem}.png"), format!("{stem}{MASK_SUFFIX}.png")]
        .into_iter()
        .map(|name| mask_dir.join(name))
        .find(|p| p.is_file())
}

pub fn load_image(path: &Path, target: usize) -> Result<Tensor<f32>> {
    let rgb = open(path)?.to_rgb8();
    let t = target as u32;
    Ok(rgb_to_tensor(&imageops::resize(&rgb, t, t, FilterType::Triangle)))
}

pub fn load_mask(path: &Path, target: usize) -> Result<Tensor<f32>> {
    let gray = open(path)?.to_luma8();
    let t = target as u32;
    Ok(gray_to_mask(&imageops::resize(&gray, t, t, FilterType::Nearest)))
}

/// Loads every image of `image_dir` with its mask, resized to
/// `target × target`, in sorted-stem order.
pub fn load_pairs(image_dir: &Path, mask_dir: &Path, target: usize) -> Result<Vec<SegmentationSample>> {
    if target == 0 {
        return Err(Error::Data("target size must be positive".into()));
    }
    let mut out = Vec::new();
    for (stem, path) in list_images(image_dir)? {
        let mask_path = find_mask(mask_dir, &stem).ok_or_else(|| Error::MissingMask(stem.clone()))?;
        let image = load_image(&path, target)?;
        let mask = load_mask(&mask_path, target)?;
        out.push(SegmentationSample::new(stem, image, mask)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no images found in {}", image_dir.display())));
    }
    Ok(out)
}

/// Writes `images/{id}.png` and `masks/{id}_segmentation.png` under `root`.
pub fn write_dataset(root: &Path, samples: &[SegmentationSample]) -> Result<()> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        let p = img_dir.join(format!("{}.png", s.id));
        tensor_to_rgb(&s.image).save(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
        let p = mask_dir.join(format!("{}{MASK_SUFFIX}.png", s.id));
        mask_to_gray(&s.mask).save(&p).map_err(|source| Error::Image { path: p.clone(), source })?;
    }
    Ok(())
}

/// One draw of the augmentation group: `rot` quarter turns counter-clockwise,
/// then the optional horizontal and vertical flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub rot: u8,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub fn sample(rng: &mut SeededRng) -> Self {
        let rot = rng.below(4) as u8;
        let hflip = rng.bernoulli(0.5);
        let vflip = rng.bernoulli(0.5);
        Self { rot, hflip, vflip }
    }

    /// Applies to a square `[C, N, N]` tensor.
    pub fn apply<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        if t.rank() != 3 || t.dim(1) != t.dim(2) {
            return Err(Error::invalid("augment", format!("needs a square [C, N, N] map, got {:?}", t.shape())));
        }
        let n = t.dim(1);
        let last = n - 1;
        let src = |mut i: usize, mut j: usize| {
            // walk the output coordinate back through vflip, hflip, rotations
            if self.vflip {
                i = last - i;
            }
            if self.hflip {
                j = last - j;
            }
            for _ in 0..self.rot % 4 {
                (i, j) = (j, last - i);
            }
            (i, j)
        };
        let d = t.data();
        Ok(Tensor::from_fn(t.shape().to_vec(), |k| {
            let (c, p) = (k / (n * n), k % (n * n));
            let (i, j) = src(p / n, p % n);
            d[c * n * n + i * n + j]
        }))
    }
}

/// Random right-angle rotation plus flips, applied identically to image
/// and mask.
pub fn augment(sample: &SegmentationSample, rng: &mut SeededRng) -> Result<SegmentationSample> {
    let tf = Transform::sample(rng);
    Ok(SegmentationSample {
        id: sample.id.clone(),
        image: tf.apply(&sample.image)?,
        mask: tf.apply(&sample.mask)?,
    })
}

/// Stacks samples into `([B, 3, H, W], [B, 1, H, W])`.
pub fn stack_batch<T: Scalar>(samples: &[&SegmentationSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape("stack_batch", first.image.shape(), s.image.shape()));
        }
        img.extend(s.image.data().iter().map(|&v| T::of(v as f64)));
        mask.extend(s.mask.data().iter().map(|&v| T::of(v as f64)));
    }
    let b = samples.len();
    Ok((Tensor::new([b, 3, h, w], img)?, Tensor::new([b, 1, h, w], mask)?))
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut SeededRng, size: f64) -> Self {
        let theta = rng.uniform(0.0, std::f64::consts::PI);
        Self {
            cy: rng.uniform(0.25, 0.75) * size,
            cx: rng.uniform(0.25, 0.75) * size,
            ry: rng.uniform(0.1, 0.3) * size,
            rx: rng.uniform(0.1, 0.3) * size,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

pub const MIN_LESION_FRACTION: f64 = 0.05;
pub const MAX_LESION_FRACTION: f64 = 0.6;

/// Skin-like background with a linear shading gradient and noise; the lesion
/// is a darker, mottled union of 1 to 3 ellipses and the mask is exactly that
/// union (tested at pixel centres).
pub fn generate_synthetic(count: usize, size: usize, rng: &mut SeededRng) -> Result<Vec<SegmentationSample>> {
    if size < 16 {
        return Err(Error::invalid("generate_synthetic", format!("size {size} is below 16")));
    }
    let width = count.max(1).to_string().len();
    (0..count)
        .map(|i| {
            let (image, mask) = synth_one(size, rng);
            SegmentationSample::new(format!("synth_{i:0width$}"), image, mask)
        })
        .collect()
}

fn synth_one(size: usize, rng: &mut SeededRng) -> (Tensor<f32>, Tensor<f32>) {
    let n = size * size;
    let fsize = size as f64;
    let mask = loop {
        let shapes: Vec<Ellipse> = (0..1 + rng.below(3)).map(|_| Ellipse::random(rng, fsize)).collect();
        let mask: Vec<bool> = (0..n)
            .map(|p| {
                let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
                shapes.iter().any(|e| e.contains(y, x))
            })
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        if (MIN_LESION_FRACTION..=MAX_LESION_FRACTION).contains(&frac) {
            break mask;
        }
    };
    let skin = [rng.uniform(0.75, 0.9), rng.uniform(0.55, 0.7), rng.uniform(0.45, 0.6)];
    let darken = rng.uniform(0.35, 0.55);
    let lesion = [skin[0] * darken, skin[1] * darken * 0.85, skin[2] * darken * 0.8];
    let angle = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let (gy, gx) = (angle.sin() * 0.12, angle.cos() * 0.12);
    let (fy, fx, phase) = (rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), rng.uniform(0.0, 6.3));
    let mut img = vec![0.0f32; 3 * n];
    for p in 0..n {
        let (y, x) = ((p / size) as f64 / fsize - 0.5, (p % size) as f64 / fsize - 0.5);
        let shade = gy * y + gx * x;
        let (py, px) = ((p / size) as f64, (p % size) as f64);
        let texture = if mask[p] { 0.05 * (fy * py + phase).sin() * (fx * px).cos() } else { 0.0 };
        for c in 0..3 {
            let base = if mask[p] { lesion[c] } else { skin[c] };
            let v = base + shade + texture + 0.03 * rng.normal();
            img[c * n + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    let mask = mask.into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect();
    (
        Tensor::new([3, size, size], img).expect("sized"),
        Tensor::new([1, size, size], mask).expect("sized"),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_count: usize,
    pub assignments: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldSplit {
    /// Ids held out in fold `k`, sorted.
    pub fn fold(&self, k: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, f)| **f == k).map(|(id, _)| id.as_str()).collect()
    }

    /// Ids used for training when fold `k` is held out.
    pub fn train(&self, k: usize) -> Vec<&str> {
        self.assignments.iter().filter(|(_, f)| **f != k).map(|(id, _)| id.as_str()).collect()
    }
}

/// Sorts the ids, shuffles them with `seed` and deals them round-robin.
pub fn kfold_split(ids: &[String], folds: usize, seed: u64) -> Result<FoldSplit> {
    if folds == 0 || ids.len() < folds {
        return Err(Error::Data(format!("{} ids cannot fill {folds} folds", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Data("duplicate ids".into()));
    }
    SeededRng::new(seed).shuffle(&mut sorted);
    let assignments = sorted.into_iter().enumerate().map(|(i, id)| (id, i % folds)).collect();
    Ok(FoldSplit {
        fold_count: folds,
        assignments,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded 8:1:1 train/validation/test partition.
pub fn ratio_split(ids: &[String], seed: u64) -> Result<RatioSplit> {
    if ids.len() < 3 {
        return Err(Error::Data(format!("{} ids cannot fill an 8:1:1 split", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    SeededRng::new(seed).shuffle(&mut sorted);
    let n = sorted.len();
    let n_val = ((n as f64) * 0.1).round().max(1.0) as usize;
    let n_test = n_val;
    let n_train = n - n_val - n_test;
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(RatioSplit { train: sorted, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::compute_metrics;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img{i:03}")).collect()
    }

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = generate_synthetic(6, 32, &mut SeededRng::new(4)).unwrap();
        let b = generate_synthetic(6, 32, &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let frac = s.mask.sum_all() / 1024.0;
            assert!((0.05..=0.6).contains(&frac), "{frac}");
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(generate_synthetic(1, 8, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn intensity_threshold_baseline_beats_half_dice() {
        let samples = generate_synthetic(20, 48, &mut SeededRng::new(21)).unwrap();
        for s in &samples {
            let n = 48 * 48;
            let gray: Vec<f64> = (0..n)
                .map(|p| (0..3).map(|c| s.image.data()[c * n + p] as f64).sum::<f64>() / 3.0)
                .collect();
            // isodata: threshold halfway between the two class means
            let mut th = gray.iter().sum::<f64>() / n as f64;
            for _ in 0..50 {
                let (lo, hi): (Vec<f64>, Vec<f64>) = gray.iter().partition(|&&g| g < th);
                let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                th = 0.5 * (avg(&lo) + avg(&hi));
            }
            let pred = Tensor::<f64>::new([1, 48, 48], gray.iter().map(|&g| if g < th { 1.0 } else { 0.0 }).collect()).unwrap();
            let dsc = compute_metrics(&pred, &s.mask.cast(), 0.5).unwrap().dsc;
            assert!(dsc > 0.5, "{}: {dsc}", s.id);
        }
    }

    #[test]
    fn transform_group_laws() {
        let t = Tensor::<f32>::from_fn([2, 5, 5], |i| i as f32);
        assert_eq!(Transform::default().apply(&t).unwrap(), t);
        let quarter = Transform { rot: 1, ..Default::default() };
        let mut r = t.clone();
        for _ in 0..4 {
            r = quarter.apply(&r).unwrap();
        }
        assert_eq!(r, t);
        assert_ne!(quarter.apply(&t).unwrap(), t);
        // counter-clockwise: the top-right corner moves to the top-left
        assert_eq!(quarter.apply(&t).unwrap().at(&[0, 0, 0]), t.at(&[0, 0, 4]));
        let flip = Transform { hflip: true, ..Default::default() };
        assert_eq!(flip.apply(&flip.apply(&t).unwrap()).unwrap(), t);
        assert_eq!(flip.apply(&t).unwrap().at(&[1, 2, 0]), t.at(&[1, 2, 4]));
        let vflip = Transform { vflip: true, ..Default::default() };
        assert_eq!(vflip.apply(&t).unwrap().at(&[0, 0, 3]), t.at(&[0, 4, 3]));
        assert!(quarter.apply(&Tensor::<f32>::zeros([1, 4, 5])).is_err());
    }

    #[test]
    fn augmentation_keeps_masks_binary_and_consistent() {
        let s = &generate_synthetic(1, 24, &mut SeededRng::new(2)).unwrap()[0];
        let mut rng = SeededRng::new(8);
        for _ in 0..100 {
            let mut replay = rng.clone();
            let a = augment(s, &mut rng).unwrap();
            let tf = Transform::sample(&mut replay);
            assert_eq!(a.mask, tf.apply(&s.mask).unwrap());
            assert_eq!(a.image, tf.apply(&s.image).unwrap());
            assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(a.mask.sum_all(), s.mask.sum_all());
        }
    }

    #[test]
    fn kfold_partitions() {
        let split = kfold_split(&ids(10), 5, 3).unwrap();
        let mut all = BTreeSet::new();
        for k in 0..5 {
            let f = split.fold(k);
            assert_eq!(f.len(), 2);
            for id in f {
                assert!(all.insert(id.to_string()));
            }
            assert_eq!(split.train(k).len(), 8);
        }
        assert_eq!(all, ids(10).into_iter().collect());
        assert_eq!(split, kfold_split(&ids(10), 5, 3).unwrap());
        let mut rev = ids(10);
        rev.reverse();
        assert_eq!(split, kfold_split(&rev, 5, 3).unwrap());
        assert!(kfold_split(&ids(4), 5, 0).is_err());
        let uneven = kfold_split(&ids(13), 5, 1).unwrap();
        let sizes: Vec<usize> = (0..5).map(|k| uneven.fold(k).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn ratio_split_is_eight_one_one() {
        let s = ratio_split(&ids(100), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        assert_eq!(all, ids(100));
    }

    #[test]
    fn write_then_load_roundtrips_masks() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(3, 32, &mut SeededRng::new(6)).unwrap();
        write_dataset(dir.path(), &samples).unwrap();
        let loaded = load_pairs(&dir.path().join("images"), &dir.path().join("masks"), 32).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            assert!(a.image.max_abs_diff(&b.image).unwrap() <= 0.5 / 255.0 + 1e-6);
        }
        let again = load_pairs(&dir.path().join("images"), &dir.path().join("masks"), 32).unwrap();
        assert_eq!(loaded, again);
    }

    #[test]
    fn load_resizes_and_thresholds() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, masks) = (dir.path().join("i"), dir.path().join("m"));
        fs::create_dir_all(&imgs).unwrap();
        fs::create_dir_all(&masks).unwrap();
        RgbImage::from_pixel(768, 560, image::Rgb([200, 100, 50])).save(imgs.join("IMD002.png")).unwrap();
        GrayImage::from_fn(768, 560, |x, _| image::Luma([if x < 384 { 255 } else { 0 }]))
            .save(masks.join("IMD002.png"))
            .unwrap();
        let s = &load_pairs(&imgs, &masks, 256).unwrap()[0];
        assert_eq!(s.image.shape(), [3, 256, 256]);
        assert_eq!(s.mask.shape(), [1, 256, 256]);
        assert_eq!(s.mask.sum_all(), 128.0 * 256.0);
        assert!((s.image.at(&[0, 10, 10]) - 200.0 / 255.0).abs() < 1e-6);

        RgbImage::new(4, 4).save(imgs.join("orphan.png")).unwrap();
        assert!(matches!(load_pairs(&imgs, &masks, 256), Err(Error::MissingMask(id)) if id == "orphan"));
        fs::write(masks.join("orphan_segmentation.png"), b"not a png").unwrap();
        assert!(matches!(load_pairs(&imgs, &masks, 256), Err(Error::Image { .. })));
    }
}
