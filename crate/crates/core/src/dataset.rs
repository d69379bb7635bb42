//! Domain types and file ingestion for proposal-level detection data.
//!
//! Datasets are JSON-lines files, one image per line:
//!
//! ```json
//! {"id": "img1", "class": "car", "status": "regular", "split": "train",
//!  "width": 640, "height": 480, "global_feature": null,
//!  "proposals": [{"box": [x1, y1, x2, y2], "feature": [..], "score": 1.5}]}
//! ```
//!
//! `split` is optional and defaults to `test`. Boxes straddling the image
//! border are clamped on ingestion; proposals degenerate after clamping are
//! dropped with a warning, and records left without any valid proposal are
//! rejected with a warning. Features are stored as `f32` (they are bulky),
//! scores as `f64` (they drive the math).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Axis-aligned box in pixel coordinates, `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        BoundingBox {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoundingBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    fn clamp_to(&self, width: f64, height: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Regular,
    Irregular,
    Other,
    Unlabeled,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Regular => "regular",
            Status::Irregular => "irregular",
            Status::Other => "other",
            Status::Unlabeled => "unlabeled",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

fn default_split() -> Split {
    Split::Test
}

/// A candidate object region with an optional feature and detection score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub feature: Option<Vec<f32>>,
    #[serde(default)]
    pub score: Option<f64>,
}

/// One image: identity, label, dimensions and its proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub class: String,
    pub status: Status,
    #[serde(default = "default_split")]
    pub split: Split,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub global_feature: Option<Vec<f32>>,
    pub proposals: Vec<Proposal>,
}

impl ImageRecord {
    /// Maximum proposal score, if scores are present.
    pub fn max_score(&self) -> Option<f64> {
        self.proposals
            .iter()
            .filter_map(|p| p.score)
            .fold(None, |acc, s| Some(acc.map_or(s, |m: f64| m.max(s))))
    }
}

/// A full dataset for one target class.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Target class of the regular/irregular records.
    pub class_name: String,
    /// Feature dimensionality, once any record carries features.
    pub feature_dim: Option<usize>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &ImageRecord> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &ImageRecord> {
        self.split(Split::Test)
    }
}

/// Non-fatal ingestion events.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadWarning {
    /// A proposal was degenerate (after clamping) and was dropped.
    DroppedProposal { id: String, index: usize },
    /// A record ended up with zero valid proposals and was rejected.
    DroppedRecord { id: String },
}

impl fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadWarning::DroppedProposal { id, index } => {
                write!(f, "record {id}: dropped degenerate proposal #{index}")
            }
            LoadWarning::DroppedRecord { id } => {
                write!(f, "record {id}: rejected, no valid proposals")
            }
        }
    }
}

/// Loads a JSON-lines dataset, enforcing all record invariants.
///
/// Boxes are clamped to the image bounds; degenerate proposals and
/// proposal-less records are dropped and reported in the warning list.
/// Feature-dimension mismatches and irregular records in the train split are
/// hard errors.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<LoadWarning>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut feature_dim: Option<usize> = None;
    let mut class_name: Option<String> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;

        if !(record.width.is_finite() && record.width > 0.0)
            || !(record.height.is_finite() && record.height > 0.0)
        {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("record {}: non-positive image dimensions", record.id),
            });
        }
        if !seen_ids.insert(record.id.clone()) {
            return Err(Error::DuplicateId {
                id: record.id.clone(),
            });
        }
        if record.split == Split::Train && !matches!(record.status, Status::Regular | Status::Other)
        {
            return Err(Error::TrainSplitStatus {
                id: record.id.clone(),
                status: record.status.to_string(),
            });
        }

        if let Some(gf) = &record.global_feature {
            check_dim(&mut feature_dim, gf.len(), &record.id)?;
        }

        let mut kept = Vec::with_capacity(record.proposals.len());
        for (index, mut prop) in record.proposals.drain(..).enumerate() {
            if let Some(feat) = &prop.feature {
                check_dim(&mut feature_dim, feat.len(), &record.id)?;
            }
            prop.bbox = prop.bbox.clamp_to(record.width, record.height);
            if prop.bbox.is_valid() {
                kept.push(prop);
            } else {
                warnings.push(LoadWarning::DroppedProposal {
                    id: record.id.clone(),
                    index,
                });
            }
        }
        record.proposals = kept;

        if record.proposals.is_empty() {
            warnings.push(LoadWarning::DroppedRecord {
                id: record.id.clone(),
            });
            continue;
        }

        if class_name.is_none() && matches!(record.status, Status::Regular | Status::Irregular) {
            class_name = Some(record.class.clone());
        }
        records.push(record);
    }

    for w in &warnings {
        log::warn!("{w}");
    }

    Ok((
        DatasetManifest {
            class_name: class_name.unwrap_or_default(),
            feature_dim,
            records,
        },
        warnings,
    ))
}

fn check_dim(feature_dim: &mut Option<usize>, got: usize, id: &str) -> Result<()> {
    match *feature_dim {
        None => {
            *feature_dim = Some(got);
            Ok(())
        }
        Some(expected) if expected == got => Ok(()),
        Some(expected) => Err(Error::FeatureDimMismatch {
            id: id.to_string(),
            expected,
            got,
        }),
    }
}

/// Writes a manifest as JSON-lines, one record per line.
pub fn save_dataset(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for record in &manifest.records {
        let line = serde_json::to_string(record).expect("record serialization cannot fail");
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes per-image scores as CSV with header `id,score`, scores with 9
/// significant digits. Saving what `load_scores` read back is byte-identical.
pub fn save_scores(records: &[(String, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    for (id, _) in records {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId { id: id.clone() });
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "id,score").map_err(|e| Error::io(path.display().to_string(), e))?;
    for (id, score) in records {
        writeln!(w, "{id},{score:.8e}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a score CSV written by [`save_scores`].
pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if lineno == 0 {
            if line.trim() != "id,score" {
                return Err(Error::Parse {
                    line: 1,
                    msg: "expected header `id,score`".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (id, score) = line.rsplit_once(',').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: "expected `id,score` row".into(),
        })?;
        let score: f64 = score.parse().map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: format!("bad score: {e}"),
        })?;
        out.push((id.to_string(), score));
    }
    Ok(out)
}
