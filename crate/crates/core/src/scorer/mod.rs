//! Evaluation oracles: a scorer maps a channel map over cached features to
//! a higher-is-better aggregate plus per-image values.

mod external;
mod heads;

use std::sync::atomic::{AtomicU64, Ordering};

pub use external::{
    AdapterMessage, EngineMessage, ExternalScorerPool, ExternalScorerSession, DEFAULT_TIMEOUT, PROTOCOL_VERSION,
};
pub use heads::{
    builtin_scorer, score_classification, score_depth, score_segmentation, ClassificationScorer, DepthScorer, HeadFile,
    LinearClsHead, LinearSegHead, SegmentationScorer, DEFAULT_DEPTH_FLOOR,
};

use crate::error::{Error, Result};
use crate::metrics::{DepthMetrics, Metric};
use crate::remap::ChannelMap;

/// Result of one scorer invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct Score {
    pub aggregate: f64,
    pub per_image: Vec<f64>,
    /// Image-averaged MSE / AbsRel / delta1 for depth scorers.
    pub depth: Option<DepthMetrics>,
}

impl Score {
    pub fn new(aggregate: f64, per_image: Vec<f64>) -> Self {
        Score {
            aggregate,
            per_image,
            depth: None,
        }
    }
}

/// Deterministic evaluation oracle `D(·)`.
///
/// `images` restricts scoring to a subset of image indices; `None` means all.
/// Implementations must be safe to call from several threads at once.
pub trait Scorer: Sync {
    fn channels(&self) -> usize;

    fn images(&self) -> usize;

    fn metric(&self) -> Metric;

    fn score(&self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn channels(&self) -> usize {
        (**self).channels()
    }

    fn images(&self) -> usize {
        (**self).images()
    }

    fn metric(&self) -> Metric {
        (**self).metric()
    }

    fn score(&self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score> {
        (**self).score(map, images)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn channels(&self) -> usize {
        (**self).channels()
    }

    fn images(&self) -> usize {
        (**self).images()
    }

    fn metric(&self) -> Metric {
        (**self).metric()
    }

    fn score(&self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score> {
        (**self).score(map, images)
    }
}

/// Wraps a scorer and counts every call.
pub struct CountingScorer<S> {
    inner: S,
    calls: AtomicU64,
}

impl<S: Scorer> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        CountingScorer {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> S {
        self.inner
    }
}

impl<S: Scorer> Scorer for CountingScorer<S> {
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn images(&self) -> usize {
        self.inner.images()
    }

    fn metric(&self) -> Metric {
        self.inner.metric()
    }

    fn score(&self, map: &ChannelMap, images: Option<&[usize]>) -> Result<Score> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(map, images)
    }
}

pub(crate) fn check_map(map: &ChannelMap, channels: usize) -> Result<()> {
    if map.len() != channels {
        return Err(Error::LengthMismatch {
            expected: channels,
            actual: map.len(),
        });
    }
    if let Some(index) = map.sources().iter().flatten().find(|&&s| s >= channels) {
        return Err(Error::IndexOutOfRange {
            index: *index,
            channels,
        });
    }
    Ok(())
}

/// Expands an optional subset into explicit indices, validating the range.
pub(crate) fn resolve_images(images: Option<&[usize]>, total: usize) -> Result<Vec<usize>> {
    match images {
        None => Ok((0..total).collect()),
        Some([]) => Err(Error::EmptyInput("image subset")),
        Some(list) => {
            if let Some(&bad) = list.iter().find(|&&d| d >= total) {
                return Err(Error::InvalidConfig(format!(
                    "image index {bad} out of range for {total} images"
                )));
            }
            Ok(list.to_vec())
        }
    }
}
