//! Inference interfaces consumed by the pipeline.
//!
//! The pipeline never talks to a model directly. It asks a [`Detector`] for
//! candidate vertebra masks, a [`Segmenter`] for a logit mask around a prompt
//! point, a [`Classifier`] for the class of a patch, and a [`PointPredictor`]
//! for the next centroid of the walk. Ground-truth oracles live in
//! [`crate::phantom`], the child-process adapter in [`crate::extproto`].

pub mod mlp;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::SpineEnd;
use crate::geometry::{BinaryMask, GrayImage, Offset, Patch, Point2};

pub use mlp::{MlpError, MlpPredictor, MlpWeights, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("backend failure: {0}")]
pub struct BackendError(pub String);

impl BackendError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCandidate {
    pub mask: BinaryMask,
    pub confidence: f64,
}

/// Output of the patch classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchClass {
    Background,
    Regular,
    SpineEnd(SpineEnd),
}

impl PatchClass {
    pub fn spine_end(self) -> Option<SpineEnd> {
        match self {
            PatchClass::SpineEnd(e) => Some(e),
            _ => None,
        }
    }
}

/// Pre-sigmoid segmentation output aligned to a patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMask {
    pub width: usize,
    pub height: usize,
    pub offset: Offset,
    pub values: Vec<f32>,
}

impl LogitMask {
    pub fn filled(width: usize, height: usize, offset: Offset, value: f32) -> Self {
        Self {
            width,
            height,
            offset,
            values: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub trait Detector: Send + Sync {
    fn detect(&self, image: &GrayImage) -> Result<Vec<DetectionCandidate>, BackendError>;
}

pub trait Segmenter: Send + Sync {
    /// `prompt` is in patch-local coordinates.
    fn segment(&self, patch: &Patch, prompt: Point2) -> Result<LogitMask, BackendError>;
}

pub trait Classifier: Send + Sync {
    /// `center` is in image coordinates; `patch` is the window around it.
    fn classify(&self, patch: &Patch, center: Point2) -> Result<PatchClass, BackendError>;
}

pub trait PointPredictor: Send + Sync {
    /// `walk` holds the last three centroids, oldest first.
    fn predict_next(&self, walk: [Point2; 3], dims: (usize, usize)) -> Result<Point2, BackendError>;
}

/// `c3 + (c3 - c2)`.
pub fn linear_extrapolate(_c1: Point2, c2: Point2, c3: Point2) -> Point2 {
    c3 + (c3 - c2)
}

/// Constant-step baseline predictor.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearExtrapolator;

impl PointPredictor for LinearExtrapolator {
    fn predict_next(&self, walk: [Point2; 3], _dims: (usize, usize)) -> Result<Point2, BackendError> {
        Ok(linear_extrapolate(walk[0], walk[1], walk[2]))
    }
}

/// The full set of models one pipeline run needs.
#[derive(Clone)]
pub struct Backends {
    pub detector: Arc<dyn Detector>,
    pub segmenter: Arc<dyn Segmenter>,
    pub classifier: Arc<dyn Classifier>,
    pub predictor: Arc<dyn PointPredictor>,
}

impl Backends {
    /// Uses one object for detection, segmentation and classification.
    pub fn from_shared<B>(models: Arc<B>, predictor: Arc<dyn PointPredictor>) -> Self
    where
        B: Detector + Segmenter + Classifier + 'static,
    {
        Self {
            detector: models.clone(),
            segmenter: models.clone(),
            classifier: models,
            predictor,
        }
    }
}
