use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use chsurgeon::fixtures::{brute_force_best, generate, FixtureSpec};
use chsurgeon::scorer::{CountingScorer, SegmentationScorer};
use chsurgeon::search::{enumerate_combinations, pair_sweep, select_top_n, zero_ablation_sweep};
use chsurgeon::{run_search, ChannelEdit, ChannelMap, Metric, Score, Scorer, SearchConfig};
use proptest::prelude::*;

/// Closed-form scorer: a hash of the map, quantized to `levels` values so
/// that ties are common.
struct HashScorer {
    channels: usize,
    salt: u64,
    levels: u64,
}

impl Scorer for HashScorer {
    fn channels(&self) -> usize {
        self.channels
    }

    fn images(&self) -> usize {
        1
    }

    fn metric(&self) -> Metric {
        Metric::MeanIou
    }

    fn score(&self, map: &ChannelMap, _images: Option<&[usize]>) -> chsurgeon::Result<Score> {
        let mut h = DefaultHasher::new();
        self.salt.hash(&mut h);
        map.to_wire().hash(&mut h);
        let v = (h.finish() % self.levels) as f64 / self.levels as f64;
        Ok(Score::new(v, vec![v]))
    }
}

fn config(top_n: usize) -> SearchConfig {
    SearchConfig {
        top_n,
        ..SearchConfig::default()
    }
}

/// Number of non-empty subsets that touch every channel at most once.
fn valid_subsets(edits: &[ChannelEdit]) -> u64 {
    let mut per_channel: BTreeMap<usize, u64> = BTreeMap::new();
    for e in edits {
        *per_channel.entry(e.channel()).or_default() += 1;
    }
    per_channel.values().map(|n| n + 1).product::<u64>() - 1
}

#[test]
fn call_ledger_matches_counting_wrapper() {
    for channels in [4usize, 8, 16] {
        for top_n in [2usize, 4, 6] {
            for salt in 0..3 {
                let scorer = CountingScorer::new(HashScorer {
                    channels,
                    salt,
                    levels: 5,
                });
                let result = run_search(&scorer, &config(top_n)).unwrap();
                let expected = 1 + (channels * (channels - 1)) as u64 + valid_subsets(&result.top_n.edits());
                assert_eq!(scorer.calls(), expected);
                assert_eq!(result.scorer_calls.total(), expected);
                assert_eq!(result.scorer_calls.baseline, 1);
                assert_eq!(result.scorer_calls.sweep, (channels * (channels - 1)) as u64);
            }
        }
    }
}

#[test]
fn zero_edits_add_one_call_per_channel() {
    let scorer = CountingScorer::new(HashScorer {
        channels: 5,
        salt: 9,
        levels: 1000,
    });
    let cfg = SearchConfig {
        allow_zero_edits: true,
        ..config(4)
    };
    let result = run_search(&scorer, &cfg).unwrap();
    assert_eq!(result.table.entries.len(), 5 * 4 + 5);
    assert_eq!(scorer.calls(), 1 + 25 + valid_subsets(&result.top_n.edits()));
}

#[test]
fn results_do_not_depend_on_parallelism() {
    let fx = generate(&FixtureSpec::new(20, 8, 8, 8, 3).with_random_pairs(2, 5.0)).unwrap();
    let scorer = SegmentationScorer::new(&fx.cache, fx.head.clone()).unwrap();
    let reports: Vec<String> = [1usize, 2, 4, 8]
        .iter()
        .map(|&p| {
            let cfg = SearchConfig {
                parallelism: p,
                ..config(6)
            };
            run_search(&scorer, &cfg).unwrap().to_json()
        })
        .collect();
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn zero_ablation_of_unused_and_signal_channels() {
    let fx = generate(&FixtureSpec::new(10, 6, 8, 8, 4).plant(0, 1, 5.0)).unwrap();
    let scorer = SegmentationScorer::new(&fx.cache, fx.head.clone()).unwrap();
    let table = zero_ablation_sweep(&scorer, 2).unwrap();
    assert_eq!(table.entries.len(), 6);
    for (c, w) in fx.head.weights.iter().enumerate() {
        let delta = table.delta(&ChannelEdit::zero(c)).unwrap();
        if *w == 0.0 {
            assert_eq!(delta, 0.0, "channel {c}");
        }
    }
    // The effective channel carries signal that nothing else replaces.
    assert!(table.delta(&ChannelEdit::zero(1)).unwrap() < 0.0);
}

#[test]
fn restricted_optimum_never_beats_unrestricted() {
    // With three channels every edit fits into the brute-force oracle.
    for seed in 0..10 {
        let fx = generate(&FixtureSpec::new(6, 3, 6, 6, seed).plant(0, 1, 4.0)).unwrap();
        let scorer = SegmentationScorer::new(&fx.cache, fx.head.clone()).unwrap();
        let result = run_search(&scorer, &config(3)).unwrap();
        let all: Vec<ChannelEdit> = (0..3)
            .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| ChannelEdit::replace(i, j)))
            .collect();
        let full = brute_force_best(&scorer, &all, 3).unwrap();
        assert!(result.best_score <= full.score);
        eprintln!(
            "seed {seed}: restricted {:.6} unrestricted {:.6} gap {:.3e}",
            result.best_score,
            full.score,
            full.score - result.best_score
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumeration_matches_brute_force(
        channels in 2usize..=8,
        top_n in 1usize..=6,
        salt in any::<u64>(),
        levels in prop::sample::select(vec![3u64, 17, 1 << 40]),
    ) {
        let scorer = HashScorer { channels, salt, levels };
        let cfg = config(top_n);
        let table = pair_sweep(&scorer, &cfg).unwrap();
        let top = select_top_n(&table, top_n);
        let fast = enumerate_combinations(&scorer, &top, table.baseline, &cfg).unwrap();
        let slow = brute_force_best(&scorer, &top.edits(), top_n).unwrap();
        prop_assert_eq!(&fast.best_plan, &slow.plan);
        prop_assert_eq!(fast.best_score.to_bits(), slow.score.to_bits());
    }
}
