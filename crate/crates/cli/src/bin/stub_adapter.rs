//! Reference scorer adapter for protocol tests.
//!
//! With `--cache` and `--head` it serves the built-in scorer over stdio.
//! Otherwise it serves a closed-form score derived from a hash of the map;
//! the identity map scores `--baseline` on every image.
//!
//! `--fault` makes the first score reply misbehave.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use chsurgeon::scorer::{
    builtin_scorer, AdapterMessage, EngineMessage, HeadFile, DEFAULT_DEPTH_FLOOR, PROTOCOL_VERSION,
};
use chsurgeon::{read_cache, ChannelMap, FeatureCache, Metric, Scorer};
use clap::{Parser, ValueEnum};

#[derive(Parser)]
#[command(name = "chsurgeon-stub-adapter", version)]
struct Args {
    #[arg(long, requires = "head")]
    cache: Option<PathBuf>,
    #[arg(long, requires = "cache")]
    head: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    images: usize,
    #[arg(long, default_value_t = 0.5)]
    baseline: f64,
    #[arg(long)]
    fault: Option<Fault>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Reply with the wrong request id.
    WrongId,
    /// Reply with a line that is not JSON.
    Garbage,
    /// Exit without replying.
    Crash,
    /// Never reply.
    Hang,
    /// Reply with a `ready` message.
    WrongType,
    /// Reply with too few per-image values.
    ShortReply,
}

struct HashScorer {
    channels: usize,
    images: usize,
    baseline: f64,
}

impl HashScorer {
    fn value(&self, map: &ChannelMap, image: usize) -> f64 {
        if map.is_identity() {
            return self.baseline;
        }
        let mut h = DefaultHasher::new();
        map.to_wire().hash(&mut h);
        image.hash(&mut h);
        (h.finish() >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn reply(out: &mut impl Write, msg: &AdapterMessage) -> io::Result<()> {
    writeln!(out, "{}", serde_json::to_string(msg).expect("message serializes"))?;
    out.flush()
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("stub adapter: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(args: Args) -> Result<(), String> {
    let cache: Option<FeatureCache> = match &args.cache {
        Some(path) => Some(read_cache(path).map_err(|e| e.to_string())?),
        None => None,
    };
    let builtin: Option<Box<dyn Scorer + '_>> = match (&cache, &args.head) {
        (Some(cache), Some(head)) => {
            let head = HeadFile::load(head).map_err(|e| e.to_string())?;
            Some(builtin_scorer(cache, head, DEFAULT_DEPTH_FLOOR).map_err(|e| e.to_string())?)
        }
        _ => None,
    };
    let hash = HashScorer {
        channels: args.channels,
        images: args.images,
        baseline: args.baseline,
    };
    let (channels, images, metric) = match &builtin {
        Some(s) => (s.channels(), s.images(), s.metric()),
        None => (hash.channels, hash.images, Metric::MeanIou),
    };

    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut fault = args.fault;
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| e.to_string())?;
        let msg: EngineMessage = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                let err = AdapterMessage::Error {
                    id: None,
                    message: format!("unreadable request: {e}"),
                };
                reply(&mut out, &err).map_err(|e| e.to_string())?;
                continue;
            }
        };
        let response = match msg {
            EngineMessage::Hello { version } if version == PROTOCOL_VERSION => AdapterMessage::Ready {
                channels,
                images,
                metric,
            },
            EngineMessage::Hello { version } => AdapterMessage::Error {
                id: None,
                message: format!("unsupported protocol version {version}"),
            },
            EngineMessage::Bye => return Ok(()),
            EngineMessage::Score {
                id,
                map,
                images: subset,
            } => {
                match fault.take() {
                    Some(Fault::Crash) => std::process::exit(3),
                    Some(Fault::Hang) => loop {
                        std::thread::park();
                    },
                    Some(Fault::Garbage) => {
                        writeln!(out, "this is not json").map_err(|e| e.to_string())?;
                        out.flush().map_err(|e| e.to_string())?;
                        continue;
                    }
                    Some(Fault::WrongType) => {
                        reply(
                            &mut out,
                            &AdapterMessage::Ready {
                                channels,
                                images,
                                metric,
                            },
                        )
                        .map_err(|e| e.to_string())?;
                        continue;
                    }
                    Some(Fault::WrongId) => {
                        let bad = AdapterMessage::Result {
                            id: id + 1,
                            aggregate: 0.0,
                            per_image: vec![0.0; subset.as_ref().map_or(images, Vec::len)],
                        };
                        reply(&mut out, &bad).map_err(|e| e.to_string())?;
                        continue;
                    }
                    Some(Fault::ShortReply) => {
                        let bad = AdapterMessage::Result {
                            id,
                            aggregate: 0.0,
                            per_image: Vec::new(),
                        };
                        reply(&mut out, &bad).map_err(|e| e.to_string())?;
                        continue;
                    }
                    None => {}
                }
                score(&builtin, &hash, id, &map, subset.as_deref(), channels, images)
            }
        };
        reply(&mut out, &response).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn score(
    builtin: &Option<Box<dyn Scorer + '_>>,
    hash: &HashScorer,
    id: u64,
    wire: &[i64],
    subset: Option<&[usize]>,
    channels: usize,
    images: usize,
) -> AdapterMessage {
    let error = |message: String| AdapterMessage::Error { id: Some(id), message };
    let map = match ChannelMap::from_wire(wire, channels) {
        Ok(m) => m,
        Err(e) => return error(e.to_string()),
    };
    if let Some(bad) = subset.and_then(|s| s.iter().find(|&&i| i >= images)) {
        return error(format!("image index {bad} out of range for {images} images"));
    }
    match builtin {
        Some(scorer) => match scorer.score(&map, subset) {
            Ok(s) => AdapterMessage::Result {
                id,
                aggregate: s.aggregate,
                per_image: s.per_image,
            },
            Err(e) => error(e.to_string()),
        },
        None => {
            let all: Vec<usize> = (0..images).collect();
            let per_image: Vec<f64> = subset.unwrap_or(&all).iter().map(|&i| hash.value(&map, i)).collect();
            let aggregate = per_image.iter().sum::<f64>() / per_image.len().max(1) as f64;
            AdapterMessage::Result {
                id,
                aggregate,
                per_image,
            }
        }
    }
}
