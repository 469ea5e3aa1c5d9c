//! Image/mask pairs: loading from disk, a seeded synthetic generator, boundary
//! targets derived from label maps, and batching into tensors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CtoError, Result};
use crate::mask::{BinaryMask, LabelMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: LabelMask,
    pub boundary: BinaryMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: LabelMask, boundary_width: usize) -> Self {
        let boundary = boundary_from_mask(&mask, boundary_width);
        Self {
            id: id.into(),
            image,
            mask,
            boundary,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

/// Labelled pixels with a 4-neighbour carrying a different label, grown by
/// `width - 1` steps of 4-neighbour dilation. Background (0) is never a boundary seed.
pub fn boundary_from_mask(mask: &LabelMask, width: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut out = BinaryMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = mask.get(y, x);
            if v == 0 {
                continue;
            }
            let differs = (y > 0 && mask.get(y - 1, x) != v)
                || (y + 1 < h && mask.get(y + 1, x) != v)
                || (x > 0 && mask.get(y, x - 1) != v)
                || (x + 1 < w && mask.get(y, x + 1) != v);
            out.set(y, x, differs);
        }
    }
    for _ in 1..width.max(1) {
        let prev = out.clone();
        for y in 0..h {
            for x in 0..w {
                if prev.get(y, x) {
                    continue;
                }
                let near = (y > 0 && prev.get(y - 1, x))
                    || (y + 1 < h && prev.get(y + 1, x))
                    || (x > 0 && prev.get(y, x - 1))
                    || (x + 1 < w && prev.get(y, x + 1));
                out.set(y, x, near);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    /// `(image, mask)` paths sorted by file name.
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| CtoError::Unreadable {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    for entry in entries {
        let path = entry?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn unreadable(path: &Path, e: impl ToString) -> CtoError {
    CtoError::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

impl DatasetManifest {
    /// Scans `<root>/images/*.png` and pairs each with `<root>/masks/<stem>.png`.
    pub fn scan(root: impl AsRef<Path>, split: Split) -> Result<Self> {
        let root = root.as_ref();
        let images = png_stems(&root.join("images"))?;
        let masks = png_stems(&root.join("masks"))?;
        let mut pairs = Vec::with_capacity(images.len());
        for (stem, image) in images {
            let Some(mask) = masks.get(&stem) else {
                return Err(CtoError::MissingPair { stem });
            };
            pairs.push((image, mask.clone()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            split,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Lazily decodes the pairs in manifest order, resized to `size x size`.
    pub fn samples(&self, size: usize, boundary_width: usize) -> impl Iterator<Item = Result<Sample>> + '_ {
        self.pairs
            .iter()
            .map(move |(img, mask)| load_pair(img, mask, size, boundary_width))
    }
}

pub fn load_image(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| unreadable(path, e))?.to_rgb8();
    Ok(rgb_to_tensor(&resize_rgb(img, size)))
}

/// Reads an 8-bit label mask at its native size.
pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| unreadable(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    LabelMask::from_vec(h as usize, w as usize, img.into_raw())
}

fn resize_rgb(img: RgbImage, size: usize) -> RgbImage {
    let s = size as u32;
    if img.dimensions() == (s, s) {
        img
    } else {
        imageops::resize(&img, s, s, FilterType::Triangle)
    }
}

fn load_pair(image_path: &Path, mask_path: &Path, size: usize, boundary_width: usize) -> Result<Sample> {
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let img = image::open(image_path)
        .map_err(|e| unreadable(image_path, e))?
        .to_rgb8();
    let mask = image::open(mask_path)
        .map_err(|e| unreadable(mask_path, e))?
        .to_luma8();
    if img.dimensions() != mask.dimensions() {
        return Err(CtoError::SizeMismatch {
            stem,
            image: img.dimensions(),
            mask: mask.dimensions(),
        });
    }
    let s = size as u32;
    let mask = if mask.dimensions() == (s, s) {
        mask
    } else {
        imageops::resize(&mask, s, s, FilterType::Nearest)
    };
    let image = rgb_to_tensor(&resize_rgb(img, size));
    let labels = LabelMask::from_vec(size, size, mask.into_raw())?;
    Ok(Sample::new(stem, image, labels, boundary_width))
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("rgb layout")
}

pub fn tensor_to_rgb(image: &Tensor<f32>) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image.data()[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn mask_to_gray(mask: &LabelMask) -> GrayImage {
    GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .expect("mask layout")
}

pub fn binary_to_gray(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect(),
    )
    .expect("mask layout")
}

/// Writes samples in the `<root>/images`, `<root>/masks` layout.
pub fn write_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    for s in samples {
        let img_path = root.join("images").join(format!("{}.png", s.id));
        tensor_to_rgb(&s.image)
            .save(&img_path)
            .map_err(|e| unreadable(&img_path, e))?;
        let mask_path = root.join("masks").join(format!("{}.png", s.id));
        mask_to_gray(&s.mask)
            .save(&mask_path)
            .map_err(|e| unreadable(&mask_path, e))?;
    }
    Ok(())
}

/// Seeded images of one to three bright noisy ellipses on a darker background.
/// Masks are the union of the ellipses (label 1).
pub fn synth_dataset(n: usize, size: usize, seed: u64, boundary_width: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(CtoError::Config("synthetic dataset needs at least one sample".into()));
    }
    if size == 0 || size % 32 != 0 {
        return Err(CtoError::Config(format!("synthetic size {size} must be a positive multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.04).expect("valid std");
    let sf = size as f64;
    (0..n)
        .map(|i| {
            let shapes = rng.random_range(1..=3);
            let background: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.3));
            let mut mask = LabelMask::new(size, size);
            let mut fill = vec![[0.0f64; 3]; size * size];
            for _ in 0..shapes {
                let ry = rng.random_range(0.12..0.28) * sf;
                let rx = rng.random_range(0.12..0.28) * sf;
                let cy = rng.random_range(ry.min(sf / 2.0)..=(sf - ry).max(sf / 2.0));
                let cx = rng.random_range(rx.min(sf / 2.0)..=(sf - rx).max(sf / 2.0));
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.65..0.95));
                let (sin, cos) = theta.sin_cos();
                for y in 0..size {
                    for x in 0..size {
                        let dy = y as f64 + 0.5 - cy;
                        let dx = x as f64 + 0.5 - cx;
                        let u = dx * cos + dy * sin;
                        let v = -dx * sin + dy * cos;
                        if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                            mask.set(y, x, 1);
                            fill[y * size + x] = color;
                        }
                    }
                }
            }
            let mut data = vec![0f32; 3 * size * size];
            for c in 0..3 {
                for p in 0..size * size {
                    let base = if mask.data()[p] == 1 { fill[p][c] } else { background[c] };
                    let v = base + noise.sample(&mut rng);
                    data[c * size * size + p] = v.clamp(0.0, 1.0) as f32;
                }
            }
            let image = Tensor::from_vec(&[3, size, size], data)?;
            Ok(Sample::new(format!("synth_{i:04}"), image, mask, boundary_width))
        })
        .collect()
}

/// A batch ready for the model.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    /// `[B, 3, H, W]`
    pub images: Tensor<T>,
    /// `[B, K, H, W]`: the foreground indicator for one class, one-hot otherwise.
    pub interior: Tensor<T>,
    /// `[B, 1, H/4, W/4]`: boundary max-pooled to the boundary head resolution.
    pub boundary: Tensor<T>,
}

/// Max-pools a binary map by `factor` (any set pixel sets the cell).
pub fn downsample_max(mask: &BinaryMask, factor: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let (oh, ow) = (h / factor, w / factor);
    let mut out = BinaryMask::new(oh, ow);
    for y in 0..oh * factor {
        for x in 0..ow * factor {
            if mask.get(y, x) {
                out.set(y / factor, x / factor, true);
            }
        }
    }
    out
}

pub fn make_batch<T: Scalar>(samples: &[&Sample], classes: usize) -> Result<Batch<T>> {
    let Some(first) = samples.first() else {
        return Err(CtoError::EmptyDataset("cannot batch zero samples".into()));
    };
    let (h, w) = first.size();
    let b = samples.len();
    let mut images = Vec::with_capacity(b * 3 * h * w);
    let mut interior = Vec::with_capacity(b * classes * h * w);
    let mut boundary = Vec::with_capacity(b * (h / 4) * (w / 4));
    for s in samples {
        if s.size() != (h, w) {
            return Err(CtoError::Shape(format!("batch mixes {:?} and {:?} samples", (h, w), s.size())));
        }
        images.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
        if classes == 1 {
            interior.extend(s.mask.data().iter().map(|&v| if v > 0 { T::one() } else { T::zero() }));
        } else {
            for k in 0..classes {
                interior.extend(
                    s.mask
                        .data()
                        .iter()
                        .map(|&v| if v as usize == k { T::one() } else { T::zero() }),
                );
            }
        }
        let down = downsample_max(&s.boundary, 4);
        boundary.extend(down.data().iter().map(|&v| if v { T::one() } else { T::zero() }));
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::from_vec(&[b, 3, h, w], images)?,
        interior: Tensor::from_vec(&[b, classes, h, w], interior)?,
        boundary: Tensor::from_vec(&[b, 1, h / 4, w / 4], boundary)?,
    })
}
