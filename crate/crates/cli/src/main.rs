//! `chsurgeon`: sweep, search, apply and evaluate channel replacement plans.
//!
//! Exit codes: 0 success, 2 bad arguments or incompatible inputs, 3 I/O or
//! file-format errors, 4 scorer or adapter failures. stdout carries JSON
//! only; logs go to stderr (level from `CHSURGEON_LOG`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use chsurgeon::fixtures::{generate, FixtureSpec};
use chsurgeon::metrics::DepthMetrics;
use chsurgeon::scorer::{builtin_scorer, ExternalScorerPool, HeadFile, DEFAULT_DEPTH_FLOOR};
use chsurgeon::search::{nominal_call_count, pair_sweep, zero_ablation_sweep};
use chsurgeon::{
    apply_map, plan_to_map, read_cache, run_search_split, subsample, write_cache, ChannelMap, ChannelPlan, Error,
    FeatureCache, Metric, PlanFile, Scorer, SearchConfig,
};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "chsurgeon", version, about = "Parameter-free channel replacement search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every single edit against the baseline.
    Sweep(SweepArgs),
    /// Sweep, keep the top N edits, then score every combination of them.
    Search(SearchArgs),
    /// Write a cache with a plan applied to its features.
    Apply(ApplyArgs),
    /// Score a cache, optionally under a plan.
    Eval(EvalArgs),
    /// Synthetic fixtures with planted redundant channels.
    #[command(subcommand)]
    Fixtures(FixturesCommand),
}

#[derive(Subcommand)]
enum FixturesCommand {
    /// Write a fixture cache, its head and the expected plan.
    Emit(EmitArgs),
}

#[derive(Args)]
struct ScorerArgs {
    /// Feature cache (FEATC01 container with a `.json` manifest beside it).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Head weight file for the built-in scorer.
    #[arg(long, conflicts_with = "adapter", required_unless_present = "adapter")]
    head: Option<PathBuf>,
    /// Command line of an external scorer adapter, run through `sh -c`.
    #[arg(long)]
    adapter: Option<String>,
    /// Worker count; with --adapter, the number of adapter processes.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score a seeded uniform sample of this many images instead of all.
    #[arg(long)]
    images: Option<usize>,
    /// Depth predictions are clamped to at least this value.
    #[arg(long, default_value_t = DEFAULT_DEPTH_FLOOR)]
    depth_floor: f64,
    /// Seconds to wait for each adapter reply.
    #[arg(long, default_value_t = 300)]
    timeout: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    out: PathBuf,
    /// Zero each channel instead of replacing it (C entries).
    #[arg(long)]
    zero_ablation: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Result JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-size CSV; defaults to the result path with a `.csv` extension.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = chsurgeon::search::DEFAULT_TOP_N)]
    top_n: usize,
    /// Also consider zeroing channels.
    #[arg(long)]
    zero_ablation: bool,
    /// Score combinations on this cache instead of the search cache.
    #[arg(long)]
    eval_cache: Option<PathBuf>,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Also write the printed JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    images: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    pairs: usize,
    #[arg(long, default_value_t = 4.0)]
    sigma: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match (&err, err.root()) {
            (_, Error::Protocol(_) | Error::AdapterCrashed(_) | Error::Timeout(_)) => 4,
            (Error::Scoring { .. }, _) => 4,
            (
                _,
                Error::InvalidConfig(_)
                | Error::KindMismatch { .. }
                | Error::WeightLengthMismatch { .. }
                | Error::LabelOutOfRange { .. }
                | Error::IndexOutOfRange { .. }
                | Error::DuplicateSource(_)
                | Error::IdentityPair(_)
                | Error::CountOutOfRange { .. }
                | Error::TooManyCandidates { .. },
            ) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHSURGEON_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Sweep(args) => cmd_sweep(args),
        Command::Search(args) => cmd_search(args),
        Command::Apply(args) => cmd_apply(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Fixtures(FixturesCommand::Emit(args)) => cmd_emit(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// A loaded cache, or the adapter pool standing in for one.
enum Source {
    Builtin {
        cache: FeatureCache,
        head: HeadFile,
        floor: f64,
    },
    Adapter(ExternalScorerPool),
}

impl Source {
    fn open(args: &ScorerArgs) -> CliResult<Self> {
        if args.jobs == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        if let Some(cmd) = &args.adapter {
            if args.images.is_some() {
                return Err(Failure::usage("--images needs the built-in scorer"));
            }
            let pool = ExternalScorerPool::spawn(cmd, args.jobs, Duration::from_secs(args.timeout))?;
            if let Some(path) = &args.cache {
                let cache = read_cache(path)?;
                if cache.dims().channels != pool.channels() {
                    return Err(Failure::usage(format!(
                        "adapter reports {} channels, cache has {}",
                        pool.channels(),
                        cache.dims().channels
                    )));
                }
            }
            return Ok(Source::Adapter(pool));
        }
        let cache_path = args
            .cache
            .as_deref()
            .ok_or_else(|| Failure::usage("--cache is required with --head"))?;
        let head_path = args.head.as_deref().expect("clap requires --head without --adapter");
        let mut cache = read_cache(cache_path)?;
        if let Some(n) = args.images {
            cache = subsample(&cache, n, args.seed)?;
        }
        let head = HeadFile::load(head_path)?;
        // Surface kind or shape mismatches before any work starts.
        builtin_scorer(&cache, head.clone(), args.depth_floor)?;
        Ok(Source::Builtin {
            cache,
            head,
            floor: args.depth_floor,
        })
    }

    fn scorer(&self) -> CliResult<Box<dyn Scorer + '_>> {
        match self {
            Source::Builtin { cache, head, floor } => Ok(builtin_scorer(cache, head.clone(), *floor)?),
            Source::Adapter(pool) => Ok(Box::new(pool)),
        }
    }

    fn close(self) -> CliResult {
        if let Source::Adapter(pool) = self {
            pool.close()?;
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Failure {
        code: 3,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("value serializes"));
}

fn load_plan(path: &Path, channels: usize) -> CliResult<ChannelPlan> {
    let (plan, declared) = PlanFile::load(path)?.into_plan()?;
    if declared != channels {
        return Err(Failure::usage(format!(
            "plan is for {declared} channels, cache has {channels}"
        )));
    }
    plan.check(channels)?;
    Ok(plan)
}

fn cmd_sweep(args: SweepArgs) -> CliResult {
    let source = Source::open(&args.scorer)?;
    let scorer = source.scorer()?;
    let channels = scorer.channels();
    let table = if args.zero_ablation {
        zero_ablation_sweep(scorer.as_ref(), args.scorer.jobs)?
    } else {
        let config = SearchConfig {
            parallelism: args.scorer.jobs,
            seed: args.scorer.seed,
            ..SearchConfig::default()
        };
        pair_sweep(scorer.as_ref(), &config)?
    };
    drop(scorer);
    source.close()?;
    write_json(&args.out, &table.report(channels, args.scorer.seed))?;
    info!("wrote {} entries to {}", table.entries.len(), args.out.display());
    print_json(&serde_json::json!({
        "baseline": table.baseline,
        "entries": table.entries.len(),
        "out": args.out,
        "seed": args.scorer.seed,
    }));
    Ok(())
}

fn cmd_search(args: SearchArgs) -> CliResult {
    let config = SearchConfig {
        top_n: args.top_n,
        allow_zero_edits: args.zero_ablation,
        eval_subset: None,
        parallelism: args.scorer.jobs,
        seed: args.scorer.seed,
    };
    config.validate()?;
    if args.eval_cache.is_some() && args.scorer.adapter.is_some() {
        return Err(Failure::usage("--eval-cache needs the built-in scorer"));
    }
    let source = Source::open(&args.scorer)?;
    let eval_cache = match &args.eval_cache {
        Some(path) => Some(read_cache(path)?),
        None => None,
    };
    let scorer = source.scorer()?;
    let eval_scorer = match (&eval_cache, &source) {
        (Some(cache), Source::Builtin { head, floor, .. }) => Some(builtin_scorer(cache, head.clone(), *floor)?),
        _ => None,
    };
    let result = run_search_split(scorer.as_ref(), eval_scorer.as_deref(), &config)?;
    drop(scorer);
    source.close()?;

    let csv = args.csv.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    result.write(&args.out, &csv)?;
    let report = result.report();
    print_json(&serde_json::json!({
        "baseline": report.baseline,
        "best_score": report.best_score,
        "best_plan": report.best_plan,
        "scorer_calls": {
            "baseline": report.scorer_calls.baseline,
            "sweep": report.scorer_calls.sweep,
            "combos": report.scorer_calls.combos,
            "total": report.scorer_calls.total(),
            "nominal": nominal_call_count(result.channels, result.top_n.len()).to_string(),
        },
        "out": args.out,
        "csv": csv,
        "seed": report.seed,
    }));
    Ok(())
}

fn cmd_apply(args: ApplyArgs) -> CliResult {
    let cache = read_cache(&args.cache)?;
    let plan = load_plan(&args.plan, cache.dims().channels)?;
    let map = plan_to_map(&plan, cache.dims().channels)?;
    let out = apply_map(&cache, &map)?;
    write_cache(&out, &args.out)?;
    print_json(&serde_json::json!({
        "out": args.out,
        "edits": plan.len(),
    }));
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    metric: Metric,
    aggregate: f64,
    per_image: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<DepthMetrics>,
    plan: PlanFile,
    seed: u64,
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let source = Source::open(&args.scorer)?;
    let scorer = source.scorer()?;
    let channels = scorer.channels();
    let plan = match &args.plan {
        Some(path) => load_plan(path, channels)?,
        None => ChannelPlan::empty(),
    };
    let map = if plan.is_empty() {
        ChannelMap::identity(channels)
    } else {
        plan_to_map(&plan, channels)?
    };
    let score = scorer.score(&map, None).map_err(|e| {
        Failure::from(chsurgeon::Error::Scoring {
            context: "evaluation".into(),
            source: Box::new(e),
        })
    })?;
    let report = EvalReport {
        metric: scorer.metric(),
        aggregate: score.aggregate,
        per_image: score.per_image,
        depth: score.depth,
        plan: plan.to_file(channels),
        seed: args.scorer.seed,
    };
    drop(scorer);
    source.close()?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(&report);
    Ok(())
}

fn cmd_emit(args: EmitArgs) -> CliResult {
    let spec = FixtureSpec::new(args.images, args.channels, args.height, args.width, args.seed)
        .with_random_pairs(args.pairs, args.sigma);
    let fixture = generate(&spec)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure {
        code: 3,
        message: format!("cannot create {}: {e}", args.out.display()),
    })?;
    let cache_path = args.out.join("cache.featc");
    let head_path = args.out.join("head.json");
    let expected_path = args.out.join("expected.json");
    write_cache(&fixture.cache, &cache_path)?;
    HeadFile::Linear(fixture.head.clone()).save(&head_path)?;
    write_json(
        &expected_path,
        &serde_json::json!({
            "expected_best": fixture.expected_best.to_file(args.channels),
            "expected_margin": fixture.expected_margin,
            "baseline": fixture.baseline,
            "planted": spec.planted.iter().map(|p| serde_json::json!({
                "redundant": p.redundant,
                "effective": p.effective,
                "sigma": p.sigma,
            })).collect::<Vec<_>>(),
            "compensators": fixture.compensators,
            "seed": args.seed,
        }),
    )?;
    print_json(&serde_json::json!({
        "cache": cache_path,
        "head": head_path,
        "expected": expected_path,
        "seed": args.seed,
    }));
    Ok(())
}
