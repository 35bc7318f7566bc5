//! Annotation and image ingestion, ground-truth rasterization, result files.
//!
//! Annotation documents are JSON:
//!
//! ```json
//! {
//!   "image_path": "case_001.pgm",
//!   "width": 200, "height": 320,
//!   "region": "cervical",
//!   "vertebrae": [
//!     { "label": "C3", "polygon": [[90.0, 60.5], [131.0, 62.0], [129.5, 80.0], [88.0, 79.0]] }
//!   ]
//! }
//! ```
//!
//! Coordinates are pixels with the origin at the top-left corner, x to the
//! right and y downwards. Landmark polygons and four-corner quads are both
//! plain ordered vertex lists.

mod output;
mod pgm;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::{Region, VertebraLevel};
use crate::backends::PatchClass;
use crate::geometry::{rasterize_polygon, BinaryMask, GeometryError, GrayImage, Point2};

pub use output::{
    load_chain_doc, load_predictions, mask_file_name, write_metrics_csv, write_outputs, ChainDoc,
    InstanceRecord, OutputError, CHAIN_SUFFIX,
};
pub use pgm::{decode_pgm, encode_pgm, PgmError};

/// File extension of annotation documents.
pub const ANNOTATION_EXT: &str = "ann";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unknown vertebra label '{0}'")]
    UnknownLabel(String),
    #[error(transparent)]
    Image(#[from] PgmError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedVertebra {
    pub label: VertebraLevel,
    pub polygon: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationDoc {
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub region: Region,
    pub vertebrae: Vec<AnnotatedVertebra>,
    /// Non-fatal issues found while loading, such as clamped vertices.
    pub warnings: Vec<String>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    image_path: String,
    width: usize,
    height: usize,
    region: Region,
    vertebrae: Vec<RawVertebra>,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawVertebra {
    label: String,
    polygon: Vec<[f64; 2]>,
}

impl AnnotationDoc {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let raw: RawDoc = serde_json::from_str(text).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => DataError::Schema(e.to_string()),
            _ => DataError::Parse(e.to_string()),
        })?;
        if raw.width == 0 || raw.height == 0 {
            return Err(DataError::Schema("image dimensions must be positive".into()));
        }
        let mut seen = HashSet::new();
        let mut warnings = Vec::new();
        let mut vertebrae = Vec::with_capacity(raw.vertebrae.len());
        for v in raw.vertebrae {
            let label: VertebraLevel = v
                .label
                .parse()
                .map_err(|_| DataError::UnknownLabel(v.label.clone()))?;
            if !seen.insert(label) {
                return Err(DataError::Schema(format!("duplicate label {label}")));
            }
            if v.polygon.len() < 3 {
                return Err(DataError::Schema(format!(
                    "{label}: polygon needs at least 3 vertices, got {}",
                    v.polygon.len()
                )));
            }
            let mut clamped = false;
            let polygon = v
                .polygon
                .iter()
                .map(|&[x, y]| {
                    if !(x.is_finite() && y.is_finite()) {
                        return Err(DataError::Schema(format!("{label}: non-finite vertex")));
                    }
                    let cx = x.clamp(0.0, raw.width as f64);
                    let cy = y.clamp(0.0, raw.height as f64);
                    clamped |= cx != x || cy != y;
                    Ok(Point2::new(cx, cy))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if clamped {
                let msg = format!("{label}: vertices clamped to image bounds");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            vertebrae.push(AnnotatedVertebra { label, polygon });
        }
        Ok(Self {
            image_path: raw.image_path,
            width: raw.width,
            height: raw.height,
            region: raw.region,
            vertebrae,
            warnings,
        })
    }

    pub fn to_json(&self) -> String {
        let raw = RawDoc {
            image_path: self.image_path.clone(),
            width: self.width,
            height: self.height,
            region: self.region,
            vertebrae: self
                .vertebrae
                .iter()
                .map(|v| RawVertebra {
                    label: v.label.to_string(),
                    polygon: v.polygon.iter().map(|p| [p.x, p.y]).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("annotation serializes")
    }
}

pub fn load_annotations(path: &Path) -> Result<AnnotationDoc, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    AnnotationDoc::parse(&text)
}

pub fn save_annotations(doc: &AnnotationDoc, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, doc.to_json() + "\n").map_err(|e| DataError::io(path, e))
}

pub fn load_image(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    Ok(decode_pgm(&bytes)?)
}

pub fn save_image(img: &GrayImage, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| DataError::io(path, e))
}

/// One ground-truth vertebra.
#[derive(Debug, Clone, PartialEq)]
pub struct GtVertebra {
    pub label: VertebraLevel,
    pub polygon: Vec<Point2>,
    pub mask: BinaryMask,
    pub class: PatchClass,
}

/// Rasterized ground truth of one image, superior to inferior.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub region: Region,
    pub vertebrae: Vec<GtVertebra>,
}

impl GroundTruth {
    pub fn find(&self, label: VertebraLevel) -> Option<&GtVertebra> {
        self.vertebrae.iter().find(|v| v.label == label)
    }
}

pub fn class_for_level(label: VertebraLevel) -> PatchClass {
    match label.spine_end() {
        Some(end) => PatchClass::SpineEnd(end),
        None => PatchClass::Regular,
    }
}

/// Rasterized ground truth plus the entries that could not be rasterized.
#[derive(Debug, Clone)]
pub struct RasterizedGt {
    pub gt: GroundTruth,
    pub skipped: Vec<(VertebraLevel, GeometryError)>,
}

/// Rasterizes every annotated polygon. Degenerate polygons are skipped with a warning.
pub fn rasterize_gt(doc: &AnnotationDoc) -> RasterizedGt {
    let mut vertebrae = Vec::with_capacity(doc.vertebrae.len());
    let mut skipped = Vec::new();
    for v in &doc.vertebrae {
        match rasterize_polygon(&v.polygon, doc.width, doc.height) {
            Ok(mask) if !mask.is_empty() => vertebrae.push(GtVertebra {
                label: v.label,
                polygon: v.polygon.clone(),
                mask,
                class: class_for_level(v.label),
            }),
            Ok(_) => {
                log::warn!("{}: polygon covers no pixel center, skipped", v.label);
                skipped.push((v.label, GeometryError::EmptyMask));
            }
            Err(e) => {
                log::warn!("{}: {e}, skipped", v.label);
                skipped.push((v.label, e));
            }
        }
    }
    vertebrae.sort_by_key(|v| v.label);
    RasterizedGt {
        gt: GroundTruth {
            width: doc.width,
            height: doc.height,
            region: doc.region,
            vertebrae,
        },
        skipped,
    }
}

/// Sorted `(id, path)` pairs for files named `<id>.<ext>` in `dir`.
pub fn list_by_extension(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>, DataError> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) && path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}
