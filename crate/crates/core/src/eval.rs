//! Prediction, metric reports and inference outputs.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{binary_to_gray, boundary_from_mask, load_image, mask_to_gray, tensor_to_rgb, Sample};
use crate::error::{CtoError, Result};
use crate::graph::{resize_bilinear_tensor, Graph};
use crate::mask::{BinaryMask, LabelMask};
use crate::metrics::{avg_hausdorff, connected_components, dice_iou, panoptic_quality};
use crate::model::CtoModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Model prediction for one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: LabelMask,
    /// Boundary probability at input resolution, when the model has a boundary head.
    pub boundary: Option<Tensor<f32>>,
}

/// Anything that maps a sample to a label mask.
pub trait Segmenter {
    fn segment(&mut self, image: &Tensor<f32>) -> Result<Prediction>;
}

impl<T: Scalar> Segmenter for CtoModel<T> {
    /// Uses the finest decoder head in inference mode.
    fn segment(&mut self, image: &Tensor<f32>) -> Result<Prediction> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CtoError::Shape(format!("expected a [3, H, W] image, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let mut g = Graph::new(false);
        let x = g.input(image.cast::<T>().reshape(&[1, 3, h, w])?);
        let out = self.forward(&mut g, x)?;
        let logits = g.value(*out.interior.last().expect("three heads"));
        let k = logits.shape()[1];
        let ld = logits.data();
        let mut mask = LabelMask::new(h, w);
        for p in 0..h * w {
            let label = if k == 1 {
                (ld[p] > T::zero()) as u8
            } else {
                let mut best = 0;
                for c in 1..k {
                    if ld[c * h * w + p] > ld[best * h * w + p] {
                        best = c;
                    }
                }
                best as u8
            };
            mask.set(p / w, p % w, label);
        }
        let boundary = match out.boundary {
            Some(b) => {
                let probs = g.value(b).map(crate::graph::sigmoid);
                let up = resize_bilinear_tensor(&probs, h, w)?;
                Some(up.cast::<f32>().reshape(&[h, w])?)
            }
            None => None,
        };
        Ok(Prediction { mask, boundary })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    /// Undefined when either foreground is empty.
    pub hd: Option<f64>,
    pub pq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// `None` when no image had the metric defined.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Images the statistic was computed over.
    pub count: usize,
}

impl Summary {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: None,
                std: None,
                count: 0,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean: Some(mean),
            std: Some(var.sqrt()),
            count: n,
        }
    }

    fn display(&self, precision: usize) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.precision$} ± {s:.precision$}"),
            _ => "n/a".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: Summary,
    pub iou: Summary,
    pub hd: Summary,
    pub pq: Summary,
    pub per_image: Vec<ImageMetrics>,
}

/// Metrics of one prediction against ground truth, on the foreground/background split.
pub fn image_metrics(id: &str, pred: &LabelMask, gt: &LabelMask) -> Result<ImageMetrics> {
    let p = pred.map(|v| v > 0);
    let t = gt.map(|v| v > 0);
    let (dice, iou) = dice_iou::<f64>(&p, &t)?;
    let hd = match avg_hausdorff::<f64>(&p, &t) {
        Ok(d) => Some(d),
        Err(CtoError::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let pq = panoptic_quality::<f64>(&connected_components(&p), &connected_components(&t))?.pq;
    Ok(ImageMetrics {
        id: id.to_string(),
        dice,
        iou,
        hd,
        pq,
    })
}

pub fn evaluate<S: Segmenter + ?Sized>(model: &mut S, samples: &[Sample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(CtoError::EmptyDataset("nothing to evaluate".into()));
    }
    let per_image = samples
        .iter()
        .map(|s| {
            let pred = model.segment(&s.image)?;
            image_metrics(&s.id, &pred.mask, &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        dice: Summary::of(per_image.iter().map(|m| m.dice)),
        iou: Summary::of(per_image.iter().map(|m| m.iou)),
        hd: Summary::of(per_image.iter().filter_map(|m| m.hd)),
        pq: Summary::of(per_image.iter().map(|m| m.pq)),
        per_image,
    })
}

impl MetricReport {
    /// Writes `metrics.json` and `per_image.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("metrics.json"), json + "\n")?;
        let mut w = csv::Writer::from_path(dir.join("per_image.csv")).map_err(csv_err)?;
        for m in &self.per_image {
            w.serialize(m).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_line(&self) -> String {
        format!(
            "dice {}  iou {}  hd {}  pq {}  ({} images)",
            self.dice.display(4),
            self.iou.display(4),
            self.hd.display(3),
            self.pq.display(4),
            self.per_image.len()
        )
    }
}

fn csv_err(e: csv::Error) -> CtoError {
    CtoError::Io(std::io::Error::other(e))
}

/// Image with the predicted contour drawn in red.
pub fn overlay(image: &Tensor<f32>, mask: &LabelMask) -> RgbImage {
    let mut out = tensor_to_rgb(image);
    let contour = boundary_from_mask(mask, 1);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if contour.get(y, x) {
                out.put_pixel(x as u32, y as u32, Rgb([255, 0, 0]));
            }
        }
    }
    out
}

/// File paths written by [`infer_file`].
#[derive(Debug, Clone, Default)]
pub struct InferOutputs {
    pub mask: std::path::PathBuf,
    pub boundary: Option<std::path::PathBuf>,
    pub overlay: Option<std::path::PathBuf>,
}

/// Segments one image file. The mask is written at the input's original size
/// with the dataset label encoding; `boundary` and `overlay` add sibling PNGs.
pub fn infer_file<T: Scalar>(
    model: &mut CtoModel<T>,
    input: &Path,
    out: &Path,
    boundary: bool,
    overlay_png: bool,
) -> Result<InferOutputs> {
    let size = model.config().image_size;
    if size % 32 != 0 {
        return Err(CtoError::Shape(format!("inference size {size} is not divisible by 32")));
    }
    let (orig_w, orig_h) = image::image_dimensions(input).map_err(|e| CtoError::Unreadable {
        path: input.to_path_buf(),
        reason: e.to_string(),
    })?;
    let image = load_image(input, size)?;
    let pred = model.segment(&image)?;
    let mask_img = resize_gray(mask_to_gray(&pred.mask), orig_w, orig_h, image::imageops::FilterType::Nearest);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save(&mask_img, out)?;
    let mut outputs = InferOutputs {
        mask: out.to_path_buf(),
        ..Default::default()
    };
    if boundary {
        let Some(b) = &pred.boundary else {
            return Err(CtoError::Config(format!(
                "variant {} has no boundary head",
                model.variant()
            )));
        };
        let gray = GrayImage::from_fn(size as u32, size as u32, |x, y| {
            image::Luma([(b.data()[y as usize * size + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let path = sibling(out, "boundary");
        save(&resize_gray(gray, orig_w, orig_h, image::imageops::FilterType::Triangle), &path)?;
        outputs.boundary = Some(path);
    }
    if overlay_png {
        let path = sibling(out, "overlay");
        overlay(&image, &pred.mask)
            .save(&path)
            .map_err(|e| CtoError::Io(std::io::Error::other(e)))?;
        outputs.overlay = Some(path);
    }
    Ok(outputs)
}

/// Binary boundary map as a PNG (255 on the boundary).
pub fn save_binary(mask: &BinaryMask, path: &Path) -> Result<()> {
    save(&binary_to_gray(mask), path)
}

fn resize_gray(img: GrayImage, w: u32, h: u32, filter: image::imageops::FilterType) -> GrayImage {
    if img.dimensions() == (w, h) {
        img
    } else {
        image::imageops::resize(&img, w, h, filter)
    }
}

fn save(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| CtoError::Io(std::io::Error::other(e)))
}

fn sibling(path: &Path, suffix: &str) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
    path.with_file_name(format!("{stem}_{suffix}.png"))
}
