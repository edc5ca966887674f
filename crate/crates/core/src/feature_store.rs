//! Persistence for cached encoder feature maps.
//!
//! A cache is a `D×C×H×W` tensor of `f32` values laid out `[d][c][h][w]`,
//! plus one ground-truth record per image. On disk it is a `FEATC01`
//! container holding the tensor and a JSON manifest sidecar (`<path>.json`)
//! pointing at per-image ground-truth files:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  "FEATC01\0"
//! 8       4     D      (u32 LE)
//! 12      4     C
//! 16      4     H
//! 20      4     W
//! 24      4     dtype  (0 = f32)
//! 28      4     reserved (0)
//! 32      4·N   values, f32 LE, [d][c][h][w]
//! ```
//!
//! Masks are stored as binary PGM (`P5`, maxval 255, nonzero = foreground).
//! Depth maps reuse the container with `D = 1, C = 1`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::rng;

pub const MAGIC: &[u8; 8] = b"FEATC01\0";
pub const HEADER_LEN: usize = 32;
pub const DTYPE_F32: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub images: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(images: usize, channels: usize, height: usize, width: usize) -> Self {
        Dims {
            images,
            channels,
            height,
            width,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.plane_len()
    }

    pub fn len(&self) -> usize {
        self.images * self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthKind {
    BinaryMask,
    DepthMap,
    ClassLabel,
}

impl fmt::Display for GroundTruthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroundTruthKind::BinaryMask => "binary_mask",
            GroundTruthKind::DepthMap => "depth_map",
            GroundTruthKind::ClassLabel => "class_label",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    BinaryMask(Mask),
    /// Row-major `H×W` depths, all finite and positive.
    DepthMap(Vec<f32>),
    ClassLabel(u32),
}

impl GroundTruth {
    pub fn kind(&self) -> GroundTruthKind {
        match self {
            GroundTruth::BinaryMask(_) => GroundTruthKind::BinaryMask,
            GroundTruth::DepthMap(_) => GroundTruthKind::DepthMap,
            GroundTruth::ClassLabel(_) => GroundTruthKind::ClassLabel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub ground_truth: GroundTruth,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, ground_truth: GroundTruth) -> Self {
        ImageRecord {
            id: id.into(),
            ground_truth,
        }
    }
}

/// Validated, immutable feature tensor with its per-image annotations.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dims: Dims,
    data: Vec<f32>,
    manifest: Vec<ImageRecord>,
}

impl PartialEq for FeatureCache {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.manifest == other.manifest
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FeatureCache {
    pub fn new(dims: Dims, data: Vec<f32>, manifest: Vec<ImageRecord>) -> Result<Self> {
        let cache = FeatureCache { dims, data, manifest };
        cache.validate()?;
        Ok(cache)
    }

    fn validate(&self) -> Result<()> {
        let Dims {
            images,
            channels,
            height,
            width,
        } = self.dims;
        if images < 1 {
            return Err(Error::invariant("dims.images", "D must be at least 1"));
        }
        if channels < 2 {
            return Err(Error::invariant("dims.channels", "C must be at least 2"));
        }
        if height < 1 || width < 1 {
            return Err(Error::invariant("dims.height/width", "H and W must be at least 1"));
        }
        if self.data.len() != self.dims.len() {
            return Err(Error::invariant(
                "data",
                format!("length {} != D·C·H·W = {}", self.data.len(), self.dims.len()),
            ));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invariant(
                "data",
                format!("non-finite value {} at flat index {pos}", self.data[pos]),
            ));
        }
        if self.manifest.len() != images {
            return Err(Error::ManifestMismatch {
                expected: images,
                actual: self.manifest.len(),
            });
        }
        let mut seen = HashSet::new();
        for rec in &self.manifest {
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::invariant(
                    "manifest.id",
                    format!("duplicate image id {:?}", rec.id),
                ));
            }
            match &rec.ground_truth {
                GroundTruth::BinaryMask(m) => {
                    if m.height() != height || m.width() != width {
                        return Err(Error::invariant(
                            "manifest.ground_truth",
                            format!(
                                "mask for {:?} is {}x{}, features are {height}x{width}",
                                rec.id,
                                m.height(),
                                m.width()
                            ),
                        ));
                    }
                }
                GroundTruth::DepthMap(d) => {
                    if d.len() != height * width {
                        return Err(Error::invariant(
                            "manifest.ground_truth",
                            format!(
                                "depth map for {:?} has {} pixels, expected {}",
                                rec.id,
                                d.len(),
                                height * width
                            ),
                        ));
                    }
                    if let Some(v) = d.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                        return Err(Error::invariant(
                            "manifest.ground_truth",
                            format!("depth for {:?} must be finite and positive, found {v}", rec.id),
                        ));
                    }
                }
                GroundTruth::ClassLabel(_) => {}
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn manifest(&self) -> &[ImageRecord] {
        &self.manifest
    }

    /// The `H×W` plane of channel `c` in image `d`.
    pub fn plane(&self, d: usize, c: usize) -> &[f32] {
        let plane = self.dims.plane_len();
        let start = d * self.dims.image_len() + c * plane;
        &self.data[start..start + plane]
    }

    /// Ground-truth kind shared by every image, or `None` when mixed.
    pub fn ground_truth_kind(&self) -> Option<GroundTruthKind> {
        let first = self.manifest.first()?.ground_truth.kind();
        self.manifest
            .iter()
            .all(|r| r.ground_truth.kind() == first)
            .then_some(first)
    }

    pub fn image_ids(&self) -> Vec<&str> {
        self.manifest.iter().map(|r| r.id.as_str()).collect()
    }

    pub(crate) fn from_parts_unchecked(dims: Dims, data: Vec<f32>, manifest: Vec<ImageRecord>) -> Self {
        FeatureCache { dims, data, manifest }
    }
}

// ---------------------------------------------------------------------------
// container codec
// ---------------------------------------------------------------------------

fn header_u32(value: usize, field: &'static str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::invariant(field, format!("{value} does not fit in u32")))
}

/// Serializes a tensor into container bytes. No invariant checks beyond u32 range.
pub fn encode_container(dims: Dims, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != dims.len() {
        return Err(Error::invariant(
            "data",
            format!("length {} != D·C·H·W = {}", data.len(), dims.len()),
        ));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(MAGIC);
    for (v, f) in [
        (dims.images, "dims.images"),
        (dims.channels, "dims.channels"),
        (dims.height, "dims.height"),
        (dims.width, "dims.width"),
    ] {
        out.extend_from_slice(&header_u32(v, f)?.to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses container bytes, checking magic, dtype and payload length.
pub fn decode_container(bytes: &[u8]) -> Result<(Dims, Vec<f32>)> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::malformed(
            "container header",
            format!("{} bytes, need {HEADER_LEN}", bytes.len()),
        ));
    }
    let field = |k: usize| {
        let at = 8 + 4 * k;
        u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
    };
    let dims = Dims::new(
        field(0) as usize,
        field(1) as usize,
        field(2) as usize,
        field(3) as usize,
    );
    let dtype = field(4);
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let count = dims
        .images
        .checked_mul(dims.channels)
        .and_then(|n| n.checked_mul(dims.height))
        .and_then(|n| n.checked_mul(dims.width))
        .ok_or_else(|| Error::malformed("container header", "dimension product overflows"))?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::malformed("container header", "dimension product overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::malformed(
            "container payload",
            format!(
                "{} trailing bytes after {expected} bytes of values",
                payload.len() - expected
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

// ---------------------------------------------------------------------------
// PGM masks
// ---------------------------------------------------------------------------

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.pixels().iter().map(|&p| if p { 255u8 } else { 0 }));
    out
}

/// Parses a binary (`P5`) PGM with maxval ≤ 255. Nonzero pixels are foreground.
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::malformed("pgm", "unexpected end of header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::malformed("pgm", "expected P5 magic"));
    }
    let mut number = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse::<usize>()
            .map_err(|_| Error::malformed("pgm", format!("bad {what} {t:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::malformed("pgm", format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes
        .get(pos + 1..)
        .ok_or_else(|| Error::malformed("pgm", "missing raster"))?;
    if raster.len() != width * height {
        return Err(Error::malformed(
            "pgm",
            format!("raster has {} bytes, expected {}", raster.len(), width * height),
        ));
    }
    Mask::new(height, width, raster.iter().map(|&b| b != 0).collect())
}

// ---------------------------------------------------------------------------
// manifest sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    images: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    kind: GroundTruthKind,
    gt: GtRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum GtRef {
    Label(u32),
    File(String),
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn gt_dir_name(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cache".to_owned());
    format!("{name}.gt")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes the container at `path`, the manifest at `<path>.json`, and
/// ground-truth rasters under `<path>.gt/`. Output is deterministic.
pub fn write_cache(cache: &FeatureCache, path: &Path) -> Result<()> {
    cache.validate()?;
    let container = encode_container(cache.dims, &cache.data)?;

    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let gt_dir_rel = gt_dir_name(path);
    let needs_dir = cache
        .manifest
        .iter()
        .any(|r| !matches!(r.ground_truth, GroundTruth::ClassLabel(_)));
    if needs_dir {
        let dir = parent.join(&gt_dir_rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let mut entries = Vec::with_capacity(cache.manifest.len());
    for (d, rec) in cache.manifest.iter().enumerate() {
        let gt = match &rec.ground_truth {
            GroundTruth::ClassLabel(label) => GtRef::Label(*label),
            GroundTruth::BinaryMask(mask) => {
                let rel = format!("{gt_dir_rel}/{d:05}.pgm");
                write_file(&parent.join(&rel), &encode_pgm(mask))?;
                GtRef::File(rel)
            }
            GroundTruth::DepthMap(depth) => {
                let rel = format!("{gt_dir_rel}/{d:05}.featc");
                let dims = Dims::new(1, 1, cache.dims.height, cache.dims.width);
                write_file(&parent.join(&rel), &encode_container(dims, depth)?)?;
                GtRef::File(rel)
            }
        };
        entries.push(ManifestEntry {
            id: rec.id.clone(),
            kind: rec.ground_truth.kind(),
            gt,
        });
    }
    let manifest =
        serde_json::to_vec_pretty(&ManifestFile { images: entries }).map_err(|e| Error::malformed("manifest", e))?;

    write_file(path, &container)?;
    write_file(&manifest_path(path), &manifest)
}

pub fn read_cache(path: &Path) -> Result<FeatureCache> {
    let bytes = read_file(path)?;
    let (dims, data) = decode_container(&bytes)?;
    if dims.is_empty() {
        return Err(Error::invariant("dims", "all dimensions must be at least 1"));
    }

    let mpath = manifest_path(path);
    let manifest: ManifestFile =
        serde_json::from_slice(&read_file(&mpath)?).map_err(|e| Error::malformed("manifest", e))?;
    if manifest.images.len() != dims.images {
        return Err(Error::ManifestMismatch {
            expected: dims.images,
            actual: manifest.images.len(),
        });
    }

    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(dims.images);
    for entry in manifest.images {
        let ground_truth = match (entry.kind, entry.gt) {
            (GroundTruthKind::ClassLabel, GtRef::Label(label)) => GroundTruth::ClassLabel(label),
            (GroundTruthKind::BinaryMask, GtRef::File(rel)) => {
                GroundTruth::BinaryMask(decode_pgm(&read_file(&parent.join(rel))?)?)
            }
            (GroundTruthKind::DepthMap, GtRef::File(rel)) => {
                let (ddims, depth) = decode_container(&read_file(&parent.join(&rel))?)?;
                if ddims.images != 1 || ddims.channels != 1 {
                    return Err(Error::malformed(
                        "depth ground truth",
                        format!("{rel} must hold a single 1-channel raster"),
                    ));
                }
                if (ddims.height, ddims.width) != (dims.height, dims.width) {
                    return Err(Error::invariant(
                        "manifest.ground_truth",
                        format!("depth map {rel} is {}x{}", ddims.height, ddims.width),
                    ));
                }
                GroundTruth::DepthMap(depth)
            }
            (kind, _) => {
                return Err(Error::malformed(
                    "manifest",
                    format!("image {:?}: gt reference does not fit kind {kind}", entry.id),
                ))
            }
        };
        records.push(ImageRecord::new(entry.id, ground_truth));
    }
    FeatureCache::new(dims, data, records)
}

/// Uniformly draws `count` images without replacement, keeping their original order.
pub fn subsample(cache: &FeatureCache, count: usize, seed: u64) -> Result<FeatureCache> {
    let available = cache.dims.images;
    if count < 1 || count > available {
        return Err(Error::CountOutOfRange { count, available });
    }
    let picked = rng::sample_indices(&mut rng::seeded(seed), available, count);
    Ok(select_images(cache, &picked))
}

pub(crate) fn select_images(cache: &FeatureCache, picked: &[usize]) -> FeatureCache {
    let per = cache.dims.image_len();
    let mut data = Vec::with_capacity(picked.len() * per);
    let mut manifest = Vec::with_capacity(picked.len());
    for &d in picked {
        data.extend_from_slice(&cache.data[d * per..(d + 1) * per]);
        manifest.push(cache.manifest[d].clone());
    }
    FeatureCache::from_parts_unchecked(
        Dims {
            images: picked.len(),
            ..cache.dims
        },
        data,
        manifest,
    )
}
