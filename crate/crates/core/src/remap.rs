//! Channel edits and their application to a feature tensor.
//!
//! A plan is a set of edits, each touching a distinct channel. Plans are
//! applied by parallel substitution: every output channel reads from the
//! original tensor, so a swap `{(0,1), (1,0)}` exchanges two channels.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureCache;

/// One channel edit: replace channel `channel` by channel `donor`, or zero it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum ChannelEdit {
    Replace {
        #[serde(rename = "i")]
        channel: usize,
        #[serde(rename = "j")]
        donor: usize,
    },
    Zero {
        #[serde(rename = "i")]
        channel: usize,
    },
}

impl ChannelEdit {
    pub fn replace(channel: usize, donor: usize) -> Self {
        ChannelEdit::Replace { channel, donor }
    }

    pub fn zero(channel: usize) -> Self {
        ChannelEdit::Zero { channel }
    }

    /// The edited channel (`i`).
    pub fn channel(&self) -> usize {
        match *self {
            ChannelEdit::Replace { channel, .. } | ChannelEdit::Zero { channel } => channel,
        }
    }

    pub fn donor(&self) -> Option<usize> {
        match *self {
            ChannelEdit::Replace { donor, .. } => Some(donor),
            ChannelEdit::Zero { .. } => None,
        }
    }

    fn sort_key(&self) -> (usize, usize) {
        (self.channel(), self.donor().unwrap_or(usize::MAX))
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        for index in std::iter::once(self.channel()).chain(self.donor()) {
            if index >= channels {
                return Err(Error::IndexOutOfRange { index, channels });
            }
        }
        if let ChannelEdit::Replace { channel, donor } = *self {
            if channel == donor {
                return Err(Error::IdentityPair(channel));
            }
        }
        Ok(())
    }
}

/// Lexicographic on `(i, j)`; a zero edit sorts after every replacement of the same channel.
impl Ord for ChannelEdit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for ChannelEdit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A validated set of edits in canonical (ascending) order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct ChannelPlan {
    edits: Vec<ChannelEdit>,
}

impl ChannelPlan {
    pub fn empty() -> Self {
        ChannelPlan::default()
    }

    /// Canonicalizes `edits`; rejects identity pairs and channels edited twice.
    pub fn new(mut edits: Vec<ChannelEdit>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(edits.len());
        for e in &edits {
            if let ChannelEdit::Replace { channel, donor } = *e {
                if channel == donor {
                    return Err(Error::IdentityPair(channel));
                }
            }
            if !seen.insert(e.channel()) {
                return Err(Error::DuplicateSource(e.channel()));
            }
        }
        edits.sort_unstable();
        Ok(ChannelPlan { edits })
    }

    pub fn edits(&self) -> &[ChannelEdit] {
        &self.edits
    }

    /// Number of edits `k`.
    pub fn len(&self) -> usize {
        self.edits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn check(&self, channels: usize) -> Result<()> {
        self.edits.iter().try_for_each(|e| e.check(channels))
    }

    pub fn to_file(&self, channels: usize) -> PlanFile {
        PlanFile {
            channels,
            edits: self.edits.clone(),
        }
    }
}

/// Per-output-channel read source; `None` marks a zeroed channel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChannelMap {
    sources: Vec<Option<usize>>,
}

/// Wire value for a zeroed channel.
pub const ZERO_SENTINEL: i64 = -1;

impl ChannelMap {
    pub fn identity(channels: usize) -> Self {
        ChannelMap {
            sources: (0..channels).map(Some).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn source(&self, c: usize) -> Option<usize> {
        self.sources[c]
    }

    pub fn sources(&self) -> &[Option<usize>] {
        &self.sources
    }

    pub fn is_identity(&self) -> bool {
        self.sources.iter().enumerate().all(|(c, s)| *s == Some(c))
    }

    /// Encodes as the scorer protocol's integer list (`-1` = zero).
    pub fn to_wire(&self) -> Vec<i64> {
        self.sources
            .iter()
            .map(|s| s.map_or(ZERO_SENTINEL, |c| c as i64))
            .collect()
    }

    pub fn from_wire(values: &[i64], channels: usize) -> Result<Self> {
        if values.len() != channels {
            return Err(Error::LengthMismatch {
                expected: channels,
                actual: values.len(),
            });
        }
        let sources = values
            .iter()
            .map(|&v| match v {
                ZERO_SENTINEL => Ok(None),
                v if v >= 0 && (v as u64) < channels as u64 => Ok(Some(v as usize)),
                v => Err(Error::IndexOutOfRange {
                    index: v.max(0) as usize,
                    channels,
                }),
            })
            .collect::<Result<_>>()?;
        Ok(ChannelMap { sources })
    }
}

pub fn plan_to_map(plan: &ChannelPlan, channels: usize) -> Result<ChannelMap> {
    let mut map = ChannelMap::identity(channels);
    let mut seen = HashSet::with_capacity(plan.len());
    for edit in plan.edits() {
        edit.check(channels)?;
        if !seen.insert(edit.channel()) {
            return Err(Error::DuplicateSource(edit.channel()));
        }
        map.sources[edit.channel()] = edit.donor();
    }
    Ok(map)
}

/// Materializes `X'[d][c] = X[d][m(c)]`, reading only from the input.
pub fn apply_map(cache: &FeatureCache, map: &ChannelMap) -> Result<FeatureCache> {
    let dims = cache.dims();
    if map.len() != dims.channels {
        return Err(Error::LengthMismatch {
            expected: dims.channels,
            actual: map.len(),
        });
    }
    let plane = dims.plane_len();
    let mut data = Vec::with_capacity(dims.len());
    for d in 0..dims.images {
        for c in 0..dims.channels {
            match map.source(c) {
                Some(src) => data.extend_from_slice(cache.plane(d, src)),
                None => data.extend(std::iter::repeat_n(0.0f32, plane)),
            }
        }
    }
    Ok(FeatureCache::from_parts_unchecked(
        dims,
        data,
        cache.manifest().to_vec(),
    ))
}

/// JSON plan file: `{"channels":C,"edits":[{"op":"replace","i":..,"j":..}|{"op":"zero","i":..}]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFile {
    pub channels: usize,
    pub edits: Vec<ChannelEdit>,
}

impl PlanFile {
    pub fn into_plan(self) -> Result<(ChannelPlan, usize)> {
        let plan = ChannelPlan::new(self.edits)?;
        plan.check(self.channels)?;
        Ok((plan, self.channels))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::malformed("plan file", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::malformed("plan file", e))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{Dims, GroundTruth, ImageRecord};
    use proptest::prelude::*;

    fn cache_from(dims: Dims, data: Vec<f32>) -> FeatureCache {
        let manifest = (0..dims.images)
            .map(|d| ImageRecord::new(format!("{d}"), GroundTruth::ClassLabel(0)))
            .collect();
        FeatureCache::new(dims, data, manifest).unwrap()
    }

    #[test]
    fn map_examples() {
        let empty = plan_to_map(&ChannelPlan::empty(), 4).unwrap();
        assert_eq!(empty.sources(), &[Some(0), Some(1), Some(2), Some(3)]);
        assert!(empty.is_identity());

        let plan = ChannelPlan::new(vec![ChannelEdit::zero(3), ChannelEdit::replace(0, 2)]).unwrap();
        let map = plan_to_map(&plan, 4).unwrap();
        assert_eq!(map.sources(), &[Some(2), Some(1), Some(2), None]);
        assert_eq!(map.to_wire(), vec![2, 1, 2, -1]);
        assert_eq!(ChannelMap::from_wire(&map.to_wire(), 4).unwrap(), map);
    }

    #[test]
    fn plan_rejections() {
        assert!(matches!(
            ChannelPlan::new(vec![ChannelEdit::replace(0, 2), ChannelEdit::replace(0, 1)]),
            Err(Error::DuplicateSource(0))
        ));
        assert!(matches!(
            ChannelPlan::new(vec![ChannelEdit::replace(1, 2), ChannelEdit::zero(1)]),
            Err(Error::DuplicateSource(1))
        ));
        assert!(matches!(
            ChannelPlan::new(vec![ChannelEdit::replace(2, 2)]),
            Err(Error::IdentityPair(2))
        ));
        let plan = ChannelPlan::new(vec![ChannelEdit::replace(0, 4)]).unwrap();
        assert!(matches!(
            plan_to_map(&plan, 4),
            Err(Error::IndexOutOfRange { index: 4, channels: 4 })
        ));
        assert!(ChannelMap::from_wire(&[0, 7], 2).is_err());
        assert!(ChannelMap::from_wire(&[0, -2], 2).is_err());
        assert!(ChannelMap::from_wire(&[0], 2).is_err());
    }

    #[test]
    fn edit_order_puts_zero_last() {
        let mut edits = vec![
            ChannelEdit::zero(1),
            ChannelEdit::replace(1, 3),
            ChannelEdit::replace(0, 5),
            ChannelEdit::replace(1, 0),
        ];
        edits.sort();
        assert_eq!(
            edits,
            vec![
                ChannelEdit::replace(0, 5),
                ChannelEdit::replace(1, 0),
                ChannelEdit::replace(1, 3),
                ChannelEdit::zero(1),
            ]
        );
    }

    #[test]
    fn replace_and_swap() {
        let cache = cache_from(Dims::new(1, 2, 1, 1), vec![3.0, 7.0]);
        let one = plan_to_map(&ChannelPlan::new(vec![ChannelEdit::replace(0, 1)]).unwrap(), 2).unwrap();
        assert_eq!(apply_map(&cache, &one).unwrap().data(), &[7.0, 7.0]);

        let swap = ChannelPlan::new(vec![ChannelEdit::replace(0, 1), ChannelEdit::replace(1, 0)]).unwrap();
        let out = apply_map(&cache, &plan_to_map(&swap, 2).unwrap()).unwrap();
        assert_eq!(out.data(), &[7.0, 3.0]);
        // input untouched
        assert_eq!(cache.data(), &[3.0, 7.0]);
    }

    #[test]
    fn zero_edit_clears_channel() {
        let cache = cache_from(Dims::new(2, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let map = plan_to_map(&ChannelPlan::new(vec![ChannelEdit::zero(0)]).unwrap(), 2).unwrap();
        assert_eq!(
            apply_map(&cache, &map).unwrap().data(),
            &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 7.0, 8.0]
        );
        assert!(matches!(
            apply_map(&cache, &ChannelMap::identity(3)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn plan_file_round_trip() {
        let plan = ChannelPlan::new(vec![ChannelEdit::zero(3), ChannelEdit::replace(0, 2)]).unwrap();
        let json = serde_json::to_string(&plan.to_file(4)).unwrap();
        assert_eq!(
            json,
            r#"{"channels":4,"edits":[{"op":"replace","i":0,"j":2},{"op":"zero","i":3}]}"#
        );
        let back: PlanFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_plan().unwrap(), (plan, 4));
        let bad: PlanFile = serde_json::from_str(r#"{"channels":2,"edits":[{"op":"replace","i":0,"j":5}]}"#).unwrap();
        assert!(bad.into_plan().is_err());
    }

    fn arb_case() -> impl Strategy<Value = (FeatureCache, Vec<ChannelEdit>)> {
        (1usize..3, 2usize..7, 1usize..3, 1usize..3).prop_flat_map(|(d, c, h, w)| {
            let dims = Dims::new(d, c, h, w);
            let data = proptest::collection::vec(-100.0f32..100.0, dims.len());
            // at most one edit per channel: donor == c+C means zero, == c means untouched
            let picks = proptest::collection::vec(0usize..(2 * c + 1), c);
            (data, picks).prop_map(move |(data, picks)| {
                let edits = picks
                    .into_iter()
                    .enumerate()
                    .filter_map(|(ch, p)| match p {
                        p if p == 2 * c => Some(ChannelEdit::zero(ch)),
                        p if p >= c || p == ch => None,
                        p => Some(ChannelEdit::replace(ch, p)),
                    })
                    .collect();
                (cache_from(dims, data), edits)
            })
        })
    }

    proptest! {
        #[test]
        fn identity_is_bitwise_noop((cache, _) in arb_case()) {
            let out = apply_map(&cache, &ChannelMap::identity(cache.dims().channels)).unwrap();
            prop_assert_eq!(out, cache);
        }

        #[test]
        fn matches_elementwise_construction((cache, edits) in arb_case(), rot in 0usize..8) {
            let dims = cache.dims();
            let plan = ChannelPlan::new(edits.clone()).unwrap();
            let map = plan_to_map(&plan, dims.channels).unwrap();
            let out = apply_map(&cache, &map).unwrap();

            // Oracle: X'[d][c][p] built element by element from the edit list.
            let donor_of = |c: usize| edits.iter().find(|e| e.channel() == c).map(|e| e.donor());
            let plane = dims.plane_len();
            for d in 0..dims.images {
                for c in 0..dims.channels {
                    for p in 0..plane {
                        let want = match donor_of(c) {
                            None => cache.plane(d, c)[p],
                            Some(Some(j)) => cache.plane(d, j)[p],
                            Some(None) => 0.0,
                        };
                        prop_assert_eq!(out.plane(d, c)[p].to_bits(), want.to_bits());
                    }
                }
            }

            // permuting the edits changes nothing
            let mut shuffled = edits.clone();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
            }
            let map2 = plan_to_map(&ChannelPlan::new(shuffled).unwrap(), dims.channels).unwrap();
            prop_assert_eq!(&map2, &map);
            prop_assert_eq!(apply_map(&cache, &map2).unwrap(), out);
        }
    }
}
