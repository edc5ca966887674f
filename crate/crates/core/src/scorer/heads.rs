//! Built-in linear heads. The channel map is applied virtually: each output
//! channel reads its source plane in place, with the same arithmetic as
//! scoring a materialized remapped tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_map, resolve_images, Score, Scorer};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureCache, GroundTruth, GroundTruthKind};
use crate::metrics::{self, iou_of, DepthMetrics, Metric};
use crate::remap::ChannelMap;

/// Lower clamp for depth predictions before AbsRel / delta1.
pub const DEFAULT_DEPTH_FLOOR: f64 = 1e-3;

/// Per-pixel linear head: `logit = Σ_c weights[c]·X[c] + bias`, foreground when `logit > 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSegHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSegHead {
    pub const THRESHOLD: f64 = 0.0;

    fn check(&self, channels: usize) -> Result<()> {
        if self.weights.len() != channels {
            return Err(Error::WeightLengthMismatch {
                expected: self.weights.len(),
                actual: channels,
            });
        }
        Ok(())
    }

    /// Writes the per-pixel outputs of image `d` into `out`.
    fn forward(&self, cache: &FeatureCache, map: &ChannelMap, d: usize, out: &mut Vec<f64>) {
        let plane = cache.dims().plane_len();
        out.clear();
        out.resize(plane, 0.0);
        for (c, &w) in self.weights.iter().enumerate() {
            match map.source(c) {
                Some(src) => {
                    for (acc, &x) in out.iter_mut().zip(cache.plane(d, src)) {
                        *acc += w * x as f64;
                    }
                }
                None => {
                    for acc in out.iter_mut() {
                        *acc += w * 0.0;
                    }
                }
            }
        }
        for acc in out.iter_mut() {
            *acc += self.bias;
        }
    }
}

/// Global-average-pool classifier: `logits = weights · mean_hw(X) + bias`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClsHead {
    /// `K × C`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearClsHead {
    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.weights.len() < 2 {
            return Err(Error::invariant(
                "head.weights",
                "a classifier needs at least 2 classes",
            ));
        }
        if self.bias.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                expected: self.weights.len(),
                actual: self.bias.len(),
            });
        }
        if let Some(row) = self.weights.iter().find(|r| r.len() != channels) {
            return Err(Error::WeightLengthMismatch {
                expected: row.len(),
                actual: channels,
            });
        }
        Ok(())
    }

    /// Predicted class from pooled source features; ties go to the lowest index.
    fn predict(&self, pooled: &[f64], map: &ChannelMap) -> u32 {
        let mut best = 0usize;
        let mut best_logit = f64::NEG_INFINITY;
        for (k, (row, b)) in self.weights.iter().zip(&self.bias).enumerate() {
            let mut logit = 0.0;
            for (c, &w) in row.iter().enumerate() {
                let x = map.source(c).map_or(0.0, |s| pooled[s]);
                logit += w * x;
            }
            logit += b;
            if logit > best_logit {
                best_logit = logit;
                best = k;
            }
        }
        best as u32
    }
}

/// Either head shape, as read from a JSON weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HeadFile {
    Linear(LinearSegHead),
    Classifier(LinearClsHead),
}

impl HeadFile {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::malformed("head file", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::malformed("head file", e))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn require_kind(cache: &FeatureCache, expected: GroundTruthKind) -> Result<()> {
    match cache.manifest().iter().find(|r| r.ground_truth.kind() != expected) {
        Some(r) => Err(Error::KindMismatch {
            expected,
            found: r.ground_truth.kind(),
        }),
        None => Ok(()),
    }
}

fn prepare(cache: &FeatureCache, map: &ChannelMap, images: Option<&[usize]>) -> Result<Vec<usize>> {
    check_map(map, cache.dims().channels)?;
    resolve_images(images, cache.dims().images)
}

fn segmentation_unchecked(cache: &FeatureCache, map: &ChannelMap, head: &LinearSegHead, images: &[usize]) -> Score {
    let mut logits = Vec::new();
    let mut pred = Vec::new();
    let per_image: Vec<f64> = images
        .iter()
        .map(|&d| {
            head.forward(cache, map, d, &mut logits);
            pred.clear();
            pred.extend(logits.iter().map(|&l| l > LinearSegHead::THRESHOLD));
            match &cache.manifest()[d].ground_truth {
                GroundTruth::BinaryMask(gt) => iou_of(&pred, gt.pixels()),
                _ => unreachable!("kind checked by caller"),
            }
        })
        .collect();
    Score::new(metrics::mean(&per_image), per_image)
}

/// Mean IoU of the thresholded linear head against the binary-mask ground truth.
pub fn score_segmentation(
    cache: &FeatureCache,
    map: &ChannelMap,
    head: &LinearSegHead,
    images: Option<&[usize]>,
) -> Result<Score> {
    require_kind(cache, GroundTruthKind::BinaryMask)?;
    head.check(cache.dims().channels)?;
    let images = prepare(cache, map, images)?;
    Ok(segmentation_unchecked(cache, map, head, &images))
}

fn depth_unchecked(
    cache: &FeatureCache,
    map: &ChannelMap,
    head: &LinearSegHead,
    floor: f64,
    images: &[usize],
) -> Result<Score> {
    let mut pred = Vec::new();
    let mut readings = Vec::with_capacity(images.len());
    for &d in images {
        head.forward(cache, map, d, &mut pred);
        for p in pred.iter_mut() {
            *p = p.max(floor);
        }
        let gt: Vec<f64> = match &cache.manifest()[d].ground_truth {
            GroundTruth::DepthMap(g) => g.iter().map(|&v| v as f64).collect(),
            _ => unreachable!("kind checked by caller"),
        };
        readings.push(metrics::depth_metrics(&pred, &gt)?);
    }
    let per_image: Vec<f64> = readings.iter().map(|m| -m.abs_rel).collect();
    let pick = |f: fn(&DepthMetrics) -> f64| metrics::mean(&readings.iter().map(f).collect::<Vec<_>>());
    let depth = DepthMetrics {
        mse: pick(|m| m.mse),
        abs_rel: pick(|m| m.abs_rel),
        delta1: pick(|m| m.delta1),
    };
    Ok(Score {
        aggregate: metrics::mean(&per_image),
        per_image,
        depth: Some(depth),
    })
}

/// Negated image-mean AbsRel of the (floored) linear head output.
pub fn score_depth(
    cache: &FeatureCache,
    map: &ChannelMap,
    head: &LinearSegHead,
    floor: f64,
    images: Option<&[usize]>,
) -> Result<Score> {
    require_kind(cache, GroundTruthKind::DepthMap)?;
    head.check(cache.dims().channels)?;
    check_floor(floor)?;
    let images = prepare(cache, map, images)?;
    depth_unchecked(cache, map, head, floor, &images)
}

fn check_floor(floor: f64) -> Result<()> {
    if floor.is_finite() && floor > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "depth floor must be positive, got {floor}"
        )))
    }
}

fn pooled_features(cache: &FeatureCache) -> Vec<Vec<f64>> {
    let dims = cache.dims();
    (0..dims.images)
        .map(|d| {
            (0..dims.channels)
                .map(|c| cache.plane(d, c).iter().map(|&x| x as f64).sum::<f64>() / dims.plane_len() as f64)
                .collect()
        })
        .collect()
}

fn check_labels(cache: &FeatureCache, head: &LinearClsHead) -> Result<()> {
    for rec in cache.manifest() {
        if let GroundTruth::ClassLabel(label) = rec.ground_truth {
            if label as usize >= head.classes() {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: head.classes(),
                });
            }
        }
    }
    Ok(())
}

fn classification_unchecked(
    cache: &FeatureCache,
    pooled: &[Vec<f64>],
    map: &ChannelMap,
    head: &LinearClsHead,
    images: &[usize],
) -> Result<Score> {
    let mut preds = Vec::with_capacity(images.len());
    let mut gts = Vec::with_capacity(images.len());
    for &d in images {
        preds.push(head.predict(&pooled[d], map));
        gts.push(match cache.manifest()[d].ground_truth {
            GroundTruth::ClassLabel(l) => l,
            _ => unreachable!("kind checked by caller"),
        });
    }
    let per_image = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| if p == g { 1.0 } else { 0.0 })
        .collect();
    Ok(Score::new(metrics::top1_accuracy(&preds, &gts)?, per_image))
}

/// Top-1 accuracy of the pooled linear classifier.
pub fn score_classification(
    cache: &FeatureCache,
    map: &ChannelMap,
    head: &LinearClsHead,
    images: Option<&[usize]>,
) -> Result<Score> {
    require_kind(cache, GroundTruthKind::ClassLabel)?;
    head.check(cache.dims().channels)?;
    check_labels(cache, head)?;
    let images = prepare(cache, map, images)?;
    classification_unchecked(cache, &pooled_features(cache), map, head, &images)
}

/// Segmentation scorer bound to one cache.
pub struct SegmentationScorer<'a> {
    cache: &'a FeatureCache,
    head: LinearSegHead,
}

impl<'a> SegmentationScorer<'a> {
    pub fn new(cache: &'a FeatureCache, head: LinearSegHead) -> Result<Self> {
        require_kind(cache, GroundTruthKind::BinaryMask)?;
        head.check(cache.dims().channels)?;
        Ok(SegmentationScorer { cache, head })
    }

    pub fn head(&self) -> &LinearSegHead {
        &self.head
    }
}

impl Scorer for SegmentationScorer<'_> {
    fn channels(&self) -> usize {
        self.cache.dims().channels
    }

    fn images(&self) -> usize {
        self.cache.dims().images
    }

    fn metric(&self) -> Metric {
        Metric::MeanIou
    }

    fn score(&self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score> {
        let images = prepare(self.cache, map, images)?;
        Ok(segmentation_unchecked(self.cache, map, &self.head, &images))
    }
}

pub struct DepthScorer<'a> {
    cache: &'a FeatureCache,
    head: LinearSegHead,
    floor: f64,
}

impl<'a> DepthScorer<'a> {
    pub fn new(cache: &'a FeatureCache, head: LinearSegHead, floor: f64) -> Result<Self> {
        require_kind(cache, GroundTruthKind::DepthMap)?;
        head.check(cache.dims().channels)?;
        check_floor(floor)?;
        Ok(DepthScorer { cache, head, floor })
    }
}

impl Scorer for DepthScorer<'_> {
    fn channels(&self) -> usize {
        self.cache.dims().channels
    }

    fn images(&self) -> usize {
        self.cache.dims().images
    }

    fn metric(&self) -> Metric {
        Metric::NegAbsRel
    }

    fn score(&self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score> {
        let images = prepare(self.cache, map, images)?;
        depth_unchecked(self.cache, map, &self.head, self.floor, &images)
    }
}

/// Classification scorer; spatial means are pooled once at construction.
pub struct ClassificationScorer<'a> {
    cache: &'a FeatureCache,
    head: LinearClsHead,
    pooled: Vec<Vec<f64>>,
}

impl<'a> ClassificationScorer<'a> {
    pub fn new(cache: &'a FeatureCache, head: LinearClsHead) -> Result<Self> {
        require_kind(cache, GroundTruthKind::ClassLabel)?;
        head.check(cache.dims().channels)?;
        check_labels(cache, &head)?;
        Ok(ClassificationScorer {
            cache,
            pooled: pooled_features(cache),
            head,
        })
    }
}

impl Scorer for ClassificationScorer<'_> {
    fn channels(&self) -> usize {
        self.cache.dims().channels
    }

    fn images(&self) -> usize {
        self.cache.dims().images
    }

    fn metric(&self) -> Metric {
        Metric::Accuracy
    }

    fn score(&self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score> {
        let images = prepare(self.cache, map, images)?;
        classification_unchecked(self.cache, &self.pooled, map, &self.head, &images)
    }
}

/// Picks the scorer matching the cache's ground-truth kind and the head's shape.
pub fn builtin_scorer<'a>(cache: &'a FeatureCache, head: HeadFile, depth_floor: f64) -> Result<Box<dyn Scorer + 'a>> {
    let kind = cache
        .ground_truth_kind()
        .ok_or_else(|| Error::InvalidConfig("cache mixes ground-truth kinds".into()))?;
    match (kind, head) {
        (GroundTruthKind::BinaryMask, HeadFile::Linear(h)) => Ok(Box::new(SegmentationScorer::new(cache, h)?)),
        (GroundTruthKind::DepthMap, HeadFile::Linear(h)) => Ok(Box::new(DepthScorer::new(cache, h, depth_floor)?)),
        (GroundTruthKind::ClassLabel, HeadFile::Classifier(h)) => Ok(Box::new(ClassificationScorer::new(cache, h)?)),
        (found, HeadFile::Linear(_)) => Err(Error::KindMismatch {
            expected: GroundTruthKind::BinaryMask,
            found,
        }),
        (found, HeadFile::Classifier(_)) => Err(Error::KindMismatch {
            expected: GroundTruthKind::ClassLabel,
            found,
        }),
    }
}
