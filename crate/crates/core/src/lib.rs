//! Parameter-free adaptation of frozen vision models by channel replacement.
//!
//! Given cached encoder features and a scorer, [`search::run_search`] finds
//! the set of channel replacement pairs `(i, j)` (channel `i` takes the
//! feature map of channel `j`) that maximizes the downstream metric:
//! a single-pair sweep, a top-N cut, then exhaustive enumeration of the
//! top-N subsets.

pub mod error;
pub mod feature_store;
pub mod fixtures;
pub mod metrics;
pub mod remap;
pub mod rng;
pub mod scorer;
pub mod search;

pub use error::{Error, Result};
pub use feature_store::{
    read_cache, subsample, write_cache, Dims, FeatureCache, GroundTruth, GroundTruthKind, ImageRecord,
};
pub use metrics::{Mask, Metric};
pub use remap::{apply_map, plan_to_map, ChannelEdit, ChannelMap, ChannelPlan, PlanFile};
pub use scorer::{Score, Scorer};
pub use search::{run_search, run_search_split, PairSweepTable, SearchConfig, SearchResult, TopNSet};
