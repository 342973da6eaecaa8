//! Tile manifests, splitting, transforms, the synthetic paired-artifact
//! corpus and unpaired batch streams.
//!
//! A manifest is a UTF-8 text file: two header lines (`tile_size=…`,
//! `class_names=…`), then one record per line as tab-separated `key=value`
//! pairs with `-` marking absent optionals. Records reference 8-bit RGB PNG
//! tiles. The layout is streamable, diffable and append-friendly.

mod batches;
mod split;
mod synth;
mod transform;

pub use batches::{make_batches, BatchStream};
pub use split::split_manifest;
pub use synth::{synthesize_corpus, RenderParams};
pub use transform::{
    augment, denormalize, eval_transform, load_tile, normalize, resize_bilinear, save_tile,
};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The seven artifact classes, in label order.
pub const CLASS_NAMES: [&str; 7] = [
    "pen_marker",
    "ink",
    "blur",
    "air_bubble",
    "tissue_fold",
    "dust",
    "filament",
];

pub const NUM_CLASSES: usize = 7;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("record `{id}`: label on clean tile")]
    LabelOnClean { id: String },
    #[error("record `{id}`: artifact tile without label")]
    MissingLabel { id: String },
    #[error("record `{id}`: label {label} outside [0,6]")]
    LabelOutOfRange { id: String, label: usize },
    #[error("record `{id}`: paired_clean_id `{pair}` not found")]
    DanglingPair { id: String, pair: String },
    #[error("record `{id}`: paired_clean_id `{pair}` is not a clean tile")]
    PairNotClean { id: String, pair: String },
    #[error("record `{id}`: paired_clean_id `{pair}` has a different source_id")]
    PairSourceMismatch { id: String, pair: String },
    #[error("record `{id}`: image file missing: {path}")]
    MissingImage { id: String, path: PathBuf },
    #[error("manifest must list exactly 7 class names, got {0}")]
    BadClassNames(usize),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("stratum `{0}` has fewer than 2 records and cannot be split")]
    StratumTooSmall(String),
    #[error("domain {0} has no records")]
    EmptyDomain(Domain),
    #[error("image is {h}×{w} but the transform needs at least {need}×{need}")]
    ImageTooSmall { h: usize, w: usize, need: usize },
    #[error("unknown artifact class index {0}")]
    UnknownClass(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Unpaired image domains: A holds artifact tiles, B clean tissue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "A_artifact")]
    Artifact,
    #[serde(rename = "B_clean")]
    Clean,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Artifact => "A_artifact",
            Domain::Clean => "B_clean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "x10")]
    X10,
    #[serde(rename = "x40")]
    X40,
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Magnification::X10 => "x10",
            Magnification::X40 => "x40",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One labelled tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub domain: Domain,
    /// Artifact class, present exactly when `domain` is [`Domain::Artifact`].
    pub label: Option<usize>,
    pub magnification: Magnification,
    /// Slide or synthetic-scene identifier; paired tiles share it.
    pub source_id: String,
    pub split: Split,
    /// Id of the ground-truth clean tile (synthetic corpus only).
    pub paired_clean_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<TileRecord>,
    pub class_names: Vec<String>,
    pub tile_size: usize,
}

impl Manifest {
    /// Checks every structural invariant; `check_files` additionally stats
    /// each referenced image (existence only, no decode).
    pub fn validate(&self, check_files: bool) -> Result<(), DataError> {
        if self.class_names.len() != NUM_CLASSES {
            return Err(DataError::BadClassNames(self.class_names.len()));
        }
        let mut by_id: HashMap<&str, &TileRecord> = HashMap::new();
        for r in &self.records {
            if by_id.insert(&r.id, r).is_some() {
                return Err(DataError::DuplicateId(r.id.clone()));
            }
        }
        for r in &self.records {
            match (r.domain, r.label) {
                (Domain::Clean, Some(_)) => {
                    return Err(DataError::LabelOnClean { id: r.id.clone() })
                }
                (Domain::Artifact, None) => {
                    return Err(DataError::MissingLabel { id: r.id.clone() })
                }
                (Domain::Artifact, Some(l)) if l >= NUM_CLASSES => {
                    return Err(DataError::LabelOutOfRange {
                        id: r.id.clone(),
                        label: l,
                    })
                }
                _ => {}
            }
            if let Some(pair) = &r.paired_clean_id {
                let Some(target) = by_id.get(pair.as_str()) else {
                    return Err(DataError::DanglingPair {
                        id: r.id.clone(),
                        pair: pair.clone(),
                    });
                };
                if target.domain != Domain::Clean {
                    return Err(DataError::PairNotClean {
                        id: r.id.clone(),
                        pair: pair.clone(),
                    });
                }
                if target.source_id != r.source_id {
                    return Err(DataError::PairSourceMismatch {
                        id: r.id.clone(),
                        pair: pair.clone(),
                    });
                }
            }
            if check_files && !r.image_path.exists() {
                return Err(DataError::MissingImage {
                    id: r.id.clone(),
                    path: r.image_path.clone(),
                });
            }
        }
        Ok(())
    }

    /// Record counts per (domain, split).
    pub fn counts(&self) -> BTreeMap<(Domain, Split), usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry((r.domain, r.split)).or_insert(0) += 1;
        }
        counts
    }

    pub fn records_in(&self, domain: Domain, split: Split) -> Vec<&TileRecord> {
        self.records
            .iter()
            .filter(|r| r.domain == domain && r.split == split)
            .collect()
    }

    pub fn find(&self, id: &str) -> Option<&TileRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

fn opt_str(v: &Option<String>) -> &str {
    v.as_deref().unwrap_or("-")
}

fn record_line(r: &TileRecord, base: &Path) -> String {
    let path = r
        .image_path
        .strip_prefix(base)
        .unwrap_or(&r.image_path)
        .display();
    let label = r.label.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
    format!(
        "id={}\timage_path={}\tdomain={}\tlabel={}\tmagnification={}\tsource_id={}\tsplit={}\tpaired_clean_id={}",
        r.id, path, r.domain, label, r.magnification, r.source_id, r.split,
        opt_str(&r.paired_clean_id)
    )
}

/// Writes a manifest; image paths are stored relative to the manifest's
/// directory when possible.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "tile_size={}", manifest.tile_size).map_err(io)?;
    writeln!(out, "class_names={}", manifest.class_names.join(",")).map_err(io)?;
    for r in &manifest.records {
        writeln!(out, "{}", record_line(r, base)).map_err(io)?;
    }
    Ok(())
}

fn parse_record(line: &str, lineno: usize, base: &Path) -> Result<TileRecord, DataError> {
    let err = |msg: String| DataError::Parse { line: lineno, msg };
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for token in line.split('\t') {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, got `{token}`")))?;
        if fields.insert(k, v).is_some() {
            return Err(err(format!("duplicate field `{k}`")));
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| err(format!("missing field `{k}`")))
    };
    let opt = |v: &str| {
        if v == "-" || v.is_empty() {
            None
        } else {
            Some(v.to_string())
        }
    };
    let domain = match get("domain")? {
        "A_artifact" => Domain::Artifact,
        "B_clean" => Domain::Clean,
        other => return Err(err(format!("unknown domain `{other}`"))),
    };
    let magnification = match get("magnification")? {
        "x10" => Magnification::X10,
        "x40" => Magnification::X40,
        other => return Err(err(format!("unknown magnification `{other}`"))),
    };
    let split = match get("split")? {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(err(format!("unknown split `{other}`"))),
    };
    let label = match get("label")? {
        "-" | "" => None,
        v => Some(
            v.parse::<usize>()
                .map_err(|_| err(format!("bad label `{v}`")))?,
        ),
    };
    let raw_path = PathBuf::from(get("image_path")?);
    let image_path = if raw_path.is_absolute() {
        raw_path
    } else {
        base.join(raw_path)
    };
    Ok(TileRecord {
        id: get("id")?.to_string(),
        image_path,
        domain,
        label,
        magnification,
        source_id: get("source_id")?.to_string(),
        split,
        paired_clean_id: opt(get("paired_clean_id")?),
    })
}

/// Loads and fully validates a manifest, stat-checking referenced images.
pub fn load_manifest(path: &Path) -> Result<Manifest, DataError> {
    load_manifest_with(path, true)
}

/// Loads a manifest; file stat-checks are optional.
pub fn load_manifest_with(path: &Path, check_files: bool) -> Result<Manifest, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    let file = std::fs::File::open(path).map_err(io)?;
    let reader = std::io::BufReader::new(file);
    let mut tile_size: Option<usize> = None;
    let mut class_names: Option<Vec<String>> = None;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io)?;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(v) = line.strip_prefix("tile_size=") {
            tile_size = Some(v.parse().map_err(|_| DataError::Parse {
                line: lineno,
                msg: format!("bad tile_size `{v}`"),
            })?);
            continue;
        }
        if let Some(v) = line.strip_prefix("class_names=") {
            class_names = Some(v.split(',').map(|s| s.trim().to_string()).collect());
            continue;
        }
        records.push(parse_record(line, lineno, &base)?);
    }
    let manifest = Manifest {
        records,
        class_names: class_names
            .unwrap_or_else(|| CLASS_NAMES.iter().map(|s| s.to_string()).collect()),
        tile_size: tile_size.ok_or_else(|| DataError::Parse {
            line: 0,
            msg: "missing tile_size header".into(),
        })?,
    };
    manifest.validate(check_files)?;
    Ok(manifest)
}

/// Augmentation recipe: independent horizontal/vertical flips, a random
/// crop and a bilinear resize. Evaluation swaps the random crop for a
/// centred one and drops the flips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub crop_size: usize,
    pub out_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            crop_size: 256,
            out_size: 128,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, tile_size: usize) -> Result<(), DataError> {
        if self.crop_size > tile_size {
            return Err(DataError::Invalid(format!(
                "crop_size {} exceeds tile_size {tile_size}",
                self.crop_size
            )));
        }
        if self.out_size > self.crop_size {
            return Err(DataError::Invalid(format!(
                "out_size {} exceeds crop_size {}",
                self.out_size, self.crop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_h_prob) || !(0.0..=1.0).contains(&self.flip_v_prob) {
            return Err(DataError::Invalid(
                "flip probabilities must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Recipe for the synthetic paired-artifact corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_scenes: usize,
    /// Artifact classes to render, as indices into [`CLASS_NAMES`].
    pub classes: Vec<usize>,
    pub tile_size: usize,
    pub seed: u64,
    pub params: RenderParams,
}

impl SyntheticSpec {
    pub fn new(n_scenes: usize, classes: Vec<usize>, tile_size: usize, seed: u64) -> Self {
        SyntheticSpec {
            n_scenes,
            classes,
            tile_size,
            seed,
            params: RenderParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_scenes == 0 {
            return Err(DataError::Invalid("n_scenes must be at least 1".into()));
        }
        if self.classes.is_empty() {
            return Err(DataError::Invalid("classes must be nonempty".into()));
        }
        if let Some(&bad) = self.classes.iter().find(|&&c| c >= NUM_CLASSES) {
            return Err(DataError::UnknownClass(bad));
        }
        if self.tile_size < 16 {
            return Err(DataError::Invalid("tile_size must be at least 16".into()));
        }
        Ok(())
    }
}

/// One unpaired training batch. Images are NCHW tensors in `[-1,1]`;
/// domain-A and domain-B samples are drawn independently.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images_a: Array4<f32>,
    /// Artifact class per domain-A sample; present when every sampled
    /// record carries a label.
    pub labels_a: Option<Vec<usize>>,
    pub images_b: Array4<f32>,
    /// Ground-truth clean tiles of the domain-A samples (synthetic corpus).
    pub clean_targets_a: Option<Array4<f32>>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.images_a.shape()[0]
    }
}
