//! Synthetic caches with planted redundant channels, and an exhaustive
//! subset oracle.
//!
//! Every image gets a rectangular foreground blob; `s` is +1 on the blob and
//! -1 elsewhere. Each planted pair `k` owns three channels that share the
//! head weight `w_k` and are expressed in units of `1/w_k`:
//!
//! ```text
//! effective   e_k = (s + z_k + ε_k) / w_k       z_k ~ N(0, interference²), ε_k ~ N(0, effective_noise²)
//! redundant   r_k = e_k + σ_k·n_k / w_k         n_k ~ N(0, 1)
//! compensator q_k = -2·z_k / w_k
//! ```
//!
//! Each pair adds `2s + 2ε_k + σ_k·n_k` to the logit; replacing `r_k` by
//! `e_k` removes the `σ_k` noise. Any other donor for `r_k` leaves an
//! uncancelled interference term. Remaining channels hold unit noise and
//! get weight 0.
//!
//! Because the head sums channels, swapping donors between two pairs would
//! cancel the interference just as well if all pairs shared a weight. With
//! `w_k = head_weight·(1 + k/√2)` the coefficient of `z_m` vanishes only
//! when the weights of the pairs reading `e_m` sum to `w_m`, and no subset
//! of these weights sums to another one, so only the planted assignment
//! cancels every `z_k`.
//!
//! With the default interference (8.0) and `σ ≥ SIGMA_THRESHOLD` on 8×8
//! rasters, the two-phase search recovers the planted plan exactly; the
//! acceptance suite checks this on a battery of seeds.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::feature_store::{Dims, FeatureCache, GroundTruth, ImageRecord};
use crate::metrics::Mask;
use crate::remap::{plan_to_map, ChannelEdit, ChannelMap, ChannelPlan};
use crate::rng::{self, SeededRng};
use crate::scorer::{LinearSegHead, Scorer, SegmentationScorer};
use crate::search::{prefer, ScoredPlan};

/// Lowest corruption level at which planted recovery is expected.
pub const SIGMA_THRESHOLD: f32 = 3.0;

/// Upper bound on candidates for [`brute_force_best`].
pub const MAX_BRUTE_FORCE_CANDIDATES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedPair {
    pub redundant: usize,
    pub effective: usize,
    pub sigma: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub images: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub planted: Vec<PlantedPair>,
    pub head_weight: f64,
    pub interference: f32,
    pub effective_noise: f32,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(images: usize, channels: usize, height: usize, width: usize, seed: u64) -> Self {
        FixtureSpec {
            images,
            channels,
            height,
            width,
            planted: Vec::new(),
            head_weight: 1.0,
            interference: 8.0,
            effective_noise: 0.05,
            seed,
        }
    }

    pub fn plant(mut self, redundant: usize, effective: usize, sigma: f32) -> Self {
        self.planted.push(PlantedPair {
            redundant,
            effective,
            sigma,
        });
        self
    }

    /// Plants `pairs` pairs on seeded random channels, all with corruption `sigma`.
    pub fn with_random_pairs(mut self, pairs: usize, sigma: f32) -> Self {
        let mut rng = rng::seeded(self.seed ^ 0x5eed_c4a7_7e15_0000);
        let mut order: Vec<usize> = (0..self.channels).collect();
        for k in (1..order.len()).rev() {
            let j = rng::below(&mut rng, k as u64 + 1) as usize;
            order.swap(k, j);
        }
        self.planted = (0..pairs.min(self.channels / 2))
            .map(|k| PlantedPair {
                redundant: order[2 * k],
                effective: order[2 * k + 1],
                sigma,
            })
            .collect();
        self
    }

    fn validate(&self) -> Result<Vec<usize>> {
        let invalid = |reason: String| Error::invariant("fixture spec", reason);
        if self.images < 1 || self.channels < 2 || self.height < 1 || self.width < 1 {
            return Err(invalid("all dimensions must be positive and C >= 2".into()));
        }
        let mut used = vec![false; self.channels];
        for p in &self.planted {
            for c in [p.redundant, p.effective] {
                if c >= self.channels {
                    return Err(invalid(format!("planted channel {c} out of range")));
                }
                if used[c] {
                    return Err(invalid(format!("planted channel {c} used twice")));
                }
                used[c] = true;
            }
            if !(p.sigma.is_finite() && p.sigma >= 0.0) {
                return Err(invalid(format!("corruption level {} must be finite and >= 0", p.sigma)));
            }
        }
        if !(self.interference.is_finite() && self.effective_noise.is_finite()) {
            return Err(invalid("noise levels must be finite".into()));
        }
        if !(self.head_weight.is_finite() && self.head_weight > 0.0) {
            return Err(invalid("head weight must be finite and positive".into()));
        }
        let free: Vec<usize> = (0..self.channels).filter(|&c| !used[c]).collect();
        if free.len() < self.planted.len() {
            return Err(invalid(format!(
                "{} planted pairs need {} channels, have {}",
                self.planted.len(),
                3 * self.planted.len(),
                self.channels
            )));
        }
        // compensators: lowest free channels, one per pair
        Ok(free[..self.planted.len()].to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub cache: FeatureCache,
    pub head: LinearSegHead,
    pub expected_best: ChannelPlan,
    /// `score(expected_best) - score(identity)`, measured by rescoring.
    pub expected_margin: f64,
    pub baseline: f64,
    pub compensators: Vec<usize>,
}

/// Head weight of the `k`-th planted pair.
pub fn pair_weight(head_weight: f64, k: usize) -> f64 {
    head_weight * (1.0 + k as f64 * std::f64::consts::FRAC_1_SQRT_2)
}

fn gaussian(rng: &mut SeededRng, scale: f32) -> f32 {
    let n: f64 = StandardNormal.sample(rng);
    scale * n as f32
}

fn blob(rng: &mut SeededRng, height: usize, width: usize) -> Mask {
    let extent = |rng: &mut SeededRng, n: usize| {
        let lo = (n / 4).max(1);
        let hi = (3 * n / 4).max(lo);
        let len = lo + rng::below(rng, (hi - lo + 1) as u64) as usize;
        let start = rng::below(rng, (n - len + 1) as u64) as usize;
        start..start + len
    };
    let rows = extent(rng, height);
    let cols = extent(rng, width);
    let pixels = (0..height * width)
        .map(|p| rows.contains(&(p / width)) && cols.contains(&(p % width)))
        .collect();
    Mask::new(height, width, pixels).expect("sized to fit")
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    let compensators = spec.validate()?;
    let dims = Dims::new(spec.images, spec.channels, spec.height, spec.width);
    let plane = dims.plane_len();
    let mut rng = rng::seeded(spec.seed);

    let mut planted_channels = vec![false; spec.channels];
    for (p, &q) in spec.planted.iter().zip(&compensators) {
        planted_channels[p.redundant] = true;
        planted_channels[p.effective] = true;
        planted_channels[q] = true;
    }

    let mut data = vec![0.0f32; dims.len()];
    let mut manifest = Vec::with_capacity(spec.images);
    for d in 0..spec.images {
        let mask = blob(&mut rng, spec.height, spec.width);
        let signal: Vec<f32> = mask.pixels().iter().map(|&f| if f { 1.0 } else { -1.0 }).collect();
        let base = d * dims.image_len();
        let mut put = |c: usize, values: &[f32]| {
            data[base + c * plane..base + (c + 1) * plane].copy_from_slice(values);
        };
        for (k, (p, &q)) in spec.planted.iter().zip(&compensators).enumerate() {
            let unit = (1.0 / pair_weight(spec.head_weight, k)) as f32;
            let mut eff = Vec::with_capacity(plane);
            let mut red = Vec::with_capacity(plane);
            let mut comp = Vec::with_capacity(plane);
            for &s in &signal {
                let z = gaussian(&mut rng, spec.interference);
                let e = unit * (s + z + gaussian(&mut rng, spec.effective_noise));
                eff.push(e);
                red.push(e + unit * gaussian(&mut rng, p.sigma));
                comp.push(unit * (-2.0 * z));
            }
            put(p.effective, &eff);
            put(p.redundant, &red);
            put(q, &comp);
        }
        for c in (0..spec.channels).filter(|&c| !planted_channels[c]) {
            let noise: Vec<f32> = (0..plane).map(|_| gaussian(&mut rng, 1.0)).collect();
            put(c, &noise);
        }
        manifest.push(ImageRecord::new(format!("fx{d:04}"), GroundTruth::BinaryMask(mask)));
    }
    let cache = FeatureCache::new(dims, data, manifest)?;

    let mut weights = vec![0.0; spec.channels];
    for (k, (p, &q)) in spec.planted.iter().zip(&compensators).enumerate() {
        let w = pair_weight(spec.head_weight, k);
        for c in [p.redundant, p.effective, q] {
            weights[c] = w;
        }
    }
    let head = LinearSegHead { weights, bias: 0.0 };

    let expected_best = ChannelPlan::new(
        spec.planted
            .iter()
            .map(|p| ChannelEdit::replace(p.redundant, p.effective))
            .collect(),
    )?;
    let scorer = SegmentationScorer::new(&cache, head.clone())?;
    let baseline = scorer.score(&ChannelMap::identity(spec.channels), None)?.aggregate;
    let planted_score = scorer
        .score(&plan_to_map(&expected_best, spec.channels)?, None)?
        .aggregate;

    Ok(Fixture {
        expected_margin: planted_score - baseline,
        baseline,
        cache,
        head,
        expected_best,
        compensators,
    })
}

/// Exhaustively scores every valid subset of `candidates` with at most
/// `max_size` edits and returns the preferred one (the empty plan scores
/// the baseline). Ties: higher score, fewer edits, smaller edit list.
pub fn brute_force_best(scorer: &dyn Scorer, candidates: &[ChannelEdit], max_size: usize) -> Result<ScoredPlan> {
    if candidates.len() > MAX_BRUTE_FORCE_CANDIDATES {
        return Err(Error::TooManyCandidates {
            count: candidates.len(),
            limit: MAX_BRUTE_FORCE_CANDIDATES,
        });
    }
    let channels = scorer.channels();
    let baseline = scorer.score(&ChannelMap::identity(channels), None)?.aggregate;
    let mut best = ScoredPlan {
        plan: ChannelPlan::empty(),
        score: baseline,
    };
    let mut chosen: Vec<ChannelEdit> = Vec::new();
    visit(scorer, candidates, 0, max_size, &mut chosen, &mut best)?;
    Ok(best)
}

fn visit(
    scorer: &dyn Scorer,
    candidates: &[ChannelEdit],
    from: usize,
    max_size: usize,
    chosen: &mut Vec<ChannelEdit>,
    best: &mut ScoredPlan,
) -> Result<()> {
    for idx in from..candidates.len() {
        let edit = candidates[idx];
        if chosen.len() >= max_size || chosen.iter().any(|c| c.channel() == edit.channel()) {
            continue;
        }
        chosen.push(edit);

        // Build the map by hand rather than through plan_to_map.
        let channels = scorer.channels();
        let mut wire: Vec<i64> = (0..channels as i64).collect();
        for e in chosen.iter() {
            wire[e.channel()] = e.donor().map_or(-1, |j| j as i64);
        }
        let map = ChannelMap::from_wire(&wire, channels)?;
        let score = scorer.score(&map, None)?.aggregate;
        let mut sorted = chosen.clone();
        sorted.sort();
        let plan = ChannelPlan::new(sorted)?;
        if prefer(score, &plan, best.score, &best.plan) {
            *best = ScoredPlan { plan, score };
        }

        visit(scorer, candidates, idx + 1, max_size, chosen, best)?;
        chosen.pop();
    }
    Ok(())
}
