//! Chain documents, mask rasters and the metrics CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pgm::{decode_pgm, encode_pgm};
use crate::backends::PatchClass;
use crate::eval::LevelRow;
use crate::geometry::{Axis, BinaryMask, Point2};
use crate::pipeline::{Origin, PipelineConfig, SpineChain, Termination};

pub const CHAIN_SUFFIX: &str = ".chain.json";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub label: String,
    pub origin: Origin,
    pub centroid: Point2,
    pub class: PatchClass,
    pub confidence: f64,
    pub area: usize,
    /// Mask raster file name, relative to the chain document.
    pub mask: String,
}

/// Serialized form of one image's [`SpineChain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDoc {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub config: PipelineConfig,
    pub axis: Option<Axis>,
    pub up_termination: Option<Termination>,
    pub down_termination: Option<Termination>,
    pub anchored: bool,
    pub failure: Option<String>,
    pub instances: Vec<InstanceRecord>,
}

pub fn mask_file_name(image_id: &str, label: &str) -> String {
    format!("{image_id}_{label}.pgm")
}

impl ChainDoc {
    pub fn from_chain(
        image_id: &str,
        dims: (usize, usize),
        chain: &SpineChain,
        cfg: &PipelineConfig,
    ) -> Self {
        let instances = chain
            .instances
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let label = inst.label.map(|l| l.to_string()).unwrap_or_else(|| format!("I{i}"));
                InstanceRecord {
                    mask: mask_file_name(image_id, &label),
                    label,
                    origin: inst.origin,
                    centroid: inst.centroid,
                    class: inst.class,
                    confidence: inst.confidence,
                    area: inst.mask.area(),
                }
            })
            .collect();
        Self {
            image: image_id.to_string(),
            width: dims.0,
            height: dims.1,
            config: cfg.clone(),
            axis: chain.axis,
            up_termination: chain.up_termination,
            down_termination: chain.down_termination,
            anchored: chain.anchored,
            failure: chain.failure.clone(),
            instances,
        }
    }
}

/// Writes `<id>.chain.json`, one `<id>_<label>.pgm` per instance and, when
/// rows are given, `<id>.metrics.csv`. Existing files are overwritten.
pub fn write_outputs(
    image_id: &str,
    dims: (usize, usize),
    chain: &SpineChain,
    cfg: &PipelineConfig,
    rows: Option<&[LevelRow]>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, OutputError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let doc = ChainDoc::from_chain(image_id, dims, chain, cfg);
    let mut written = Vec::new();
    for (record, inst) in doc.instances.iter().zip(&chain.instances) {
        let path = out_dir.join(&record.mask);
        std::fs::write(&path, encode_pgm(&inst.mask.to_image(dims.0, dims.1))).map_err(io_err(&path))?;
        written.push(path);
    }
    let path = out_dir.join(format!("{image_id}{CHAIN_SUFFIX}"));
    let json = serde_json::to_string_pretty(&doc).expect("chain serializes") + "\n";
    std::fs::write(&path, json).map_err(io_err(&path))?;
    written.push(path);
    if let Some(rows) = rows {
        let path = out_dir.join(format!("{image_id}.metrics.csv"));
        write_metrics_csv(rows, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_chain_doc(path: &Path) -> Result<ChainDoc, OutputError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| OutputError::Invalid {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Loads the instance masks referenced by a chain document in `dir`.
pub fn load_predictions(doc: &ChainDoc, dir: &Path) -> Result<Vec<BinaryMask>, OutputError> {
    doc.instances
        .iter()
        .map(|rec| {
            let path = dir.join(&rec.mask);
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            let img = decode_pgm(&bytes).map_err(|e| OutputError::Invalid {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            if (img.width, img.height) != (doc.width, doc.height) {
                return Err(OutputError::Invalid {
                    path,
                    msg: "mask size differs from image size".into(),
                });
            }
            Ok(BinaryMask::from_image(&img).cropped())
        })
        .collect()
}

fn format_metrics_csv(rows: &[LevelRow]) -> String {
    let mut s = String::from("level,pct_identified,located_dsc,overall_dsc,count\n");
    for r in rows {
        let located = if r.located_defined {
            format!("{:.6}", r.located_dsc)
        } else {
            format!("{:.6} (undefined)", r.located_dsc)
        };
        let _ = writeln!(
            s,
            "{},{:.6},{},{:.6},{}",
            r.level, r.pct_identified, located, r.overall_dsc, r.count
        );
    }
    s
}

/// Writes rows as given; callers append the summary row themselves.
pub fn write_metrics_csv(rows: &[LevelRow], path: &Path) -> Result<(), OutputError> {
    std::fs::write(path, format_metrics_csv(rows)).map_err(io_err(path))
}
