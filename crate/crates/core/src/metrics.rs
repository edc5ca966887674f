//! Evaluation metrics: per-image IoU and its image mean for segmentation,
//! MSE / AbsRel / delta1 for depth, and top-1 accuracy for classification.
//!
//! All arithmetic is carried out in `f64` and every reduction sums in index
//! order.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratio bound for the delta1 depth accuracy (standard depth-estimation practice).
pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Binary raster, row-major `[h][w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    pixels: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: pixels.len(),
            });
        }
        Ok(Mask { height, width, pixels })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            pixels: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[bool] {
        &self.pixels
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }
}

/// Aggregate metrics a scorer can report. All are normalized so that higher is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "miou")]
    MeanIou,
    #[serde(rename = "acc")]
    Accuracy,
    #[serde(rename = "neg_absrel")]
    NegAbsRel,
}

impl Metric {
    pub fn wire_name(self) -> &'static str {
        match self {
            Metric::MeanIou => "miou",
            Metric::Accuracy => "acc",
            Metric::NegAbsRel => "neg_absrel",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricId {
    MeanIou,
    Accuracy,
    Delta1,
    Mse,
    AbsRel,
}

impl MetricId {
    pub fn direction(self) -> Direction {
        match self {
            MetricId::MeanIou | MetricId::Accuracy | MetricId::Delta1 => Direction::HigherBetter,
            MetricId::Mse | MetricId::AbsRel => Direction::LowerBetter,
        }
    }
}

/// A named metric reading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub id: MetricId,
    pub value: f64,
}

impl MetricValue {
    pub fn direction(&self) -> Direction {
        self.id.direction()
    }
}

/// `|pred ∩ gt| / |pred ∪ gt|`, with two empty masks scoring 1.0.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::DimMismatch(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(iou_of(&pred.pixels, &gt.pixels))
}

pub(crate) fn iou_of(pred: &[bool], gt: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Unweighted mean of per-image IoU.
pub fn mean_iou(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            expected: gts.len(),
            actual: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("mask list"));
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| iou(p, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&per_image))
}

/// Arithmetic mean, summed in index order. Empty input yields NaN; callers guard.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub mse: f64,
    pub abs_rel: f64,
    pub delta1: f64,
}

pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::DimMismatch(format!(
            "prediction has {} pixels, ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("depth raster"));
    }
    if let Some(&bad) = gt.iter().find(|&&g| g.is_nan() || g <= 0.0) {
        return Err(Error::NonPositiveGroundTruth(bad));
    }
    let n = gt.len() as f64;
    let mut sq = 0.0;
    let mut rel = 0.0;
    let mut within = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let diff = p - g;
        sq += diff * diff;
        rel += diff.abs() / g;
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            within += 1;
        }
    }
    Ok(DepthMetrics {
        mse: sq / n,
        abs_rel: rel / n,
        delta1: within as f64 / n,
    })
}

pub fn top1_accuracy(pred_labels: &[u32], gt_labels: &[u32]) -> Result<f64> {
    if pred_labels.len() != gt_labels.len() {
        return Err(Error::LengthMismatch {
            expected: gt_labels.len(),
            actual: pred_labels.len(),
        });
    }
    if gt_labels.is_empty() {
        return Err(Error::EmptyInput("label list"));
    }
    let hits = pred_labels.iter().zip(gt_labels).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gt_labels.len() as f64)
}
