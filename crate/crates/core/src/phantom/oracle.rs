//! Ground-truth stand-ins for the detector, segmenter and classifier.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PhantomImage;
use crate::backends::{
    BackendError, Backends, Classifier, DetectionCandidate, Detector, LinearExtrapolator, LogitMask,
    PatchClass, Segmenter,
};
use crate::dataio::GroundTruth;
use crate::geometry::{centroid, BinaryMask, GrayImage, Patch, Point2};

/// Logit magnitude: `sigmoid(±10)` is far from any sensible threshold.
pub const ORACLE_LOGIT: f32 = 10.0;

/// Corruption applied by the oracle detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoise {
    /// Probability that a vertebra is missing from the detections.
    pub dropout_prob: f64,
    /// Number of spurious low-confidence blobs.
    pub false_positives: usize,
    /// Detector centroid displacement as a fraction of the vertebra's bounding-box long side.
    pub centroid_jitter: f64,
    pub seed: u64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            dropout_prob: 0.0,
            false_positives: 0,
            centroid_jitter: 0.0,
            seed: 0,
        }
    }
}

impl OracleNoise {
    pub fn is_noiseless(&self) -> bool {
        self.dropout_prob == 0.0 && self.false_positives == 0 && self.centroid_jitter == 0.0
    }
}

/// Detector, segmenter and classifier answering from ground truth.
///
/// With dropout, a random run of three anatomically consecutive vertebrae is
/// always detected at confidence 1.0 while every other survivor scores below
/// 0.95, so seed selection never bridges a gap left by a dropped vertebra.
#[derive(Debug, Clone)]
pub struct OracleSet {
    gt: GroundTruth,
    centroids: Vec<Point2>,
    capture_radius: f64,
    noise: OracleNoise,
}

impl OracleSet {
    pub fn new(gt: GroundTruth, noise: OracleNoise) -> Self {
        let centroids: Vec<Point2> = gt
            .vertebrae
            .iter()
            .map(|v| centroid(&v.mask).unwrap_or(Point2::new(f64::NAN, f64::NAN)))
            .collect();
        // one vertebra spacing: mean distance between anatomical neighbours
        let capture_radius = if centroids.len() >= 2 {
            centroids.windows(2).map(|w| w[0].distance(w[1])).sum::<f64>()
                / (centroids.len() - 1) as f64
        } else {
            gt.vertebrae
                .first()
                .map_or(0.0, |v| v.mask.bbox_long_side() as f64)
        };
        Self {
            gt,
            centroids,
            capture_radius,
            noise,
        }
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.gt
    }

    pub fn capture_radius(&self) -> f64 {
        self.capture_radius
    }

    pub fn with_capture_radius(mut self, r: f64) -> Self {
        self.capture_radius = r;
        self
    }

    /// Index of the vertebra a prompt at global point `p` selects.
    pub fn target_for(&self, p: Point2) -> Option<usize> {
        let (x, y) = p.pixel();
        if let Some(i) = self.gt.vertebrae.iter().position(|v| v.mask.contains(x, y)) {
            return Some(i);
        }
        self.centroids
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.distance(p)))
            .filter(|&(_, d)| d < self.capture_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    fn jitter(&self, mask: &BinaryMask, rng: &mut ChaCha8Rng) -> BinaryMask {
        if self.noise.centroid_jitter == 0.0 {
            return mask.clone();
        }
        let magnitude = self.noise.centroid_jitter * mask.bbox_long_side() as f64;
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dx = (magnitude * angle.cos()).round() as i64;
        let dy = (magnitude * angle.sin()).round() as i64;
        mask.translated(dx, dy).clip_to(self.gt.width, self.gt.height).cropped()
    }
}

impl Detector for OracleSet {
    fn detect(&self, _image: &GrayImage) -> Result<Vec<DetectionCandidate>, BackendError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise.seed);
        let n = self.gt.vertebrae.len();
        let p = self.noise.dropout_prob;
        let protected = if p > 0.0 && p < 1.0 && n >= 3 {
            let start = rng.random_range(0..=n - 3);
            start..start + 3
        } else {
            0..0
        };
        let mut out = Vec::with_capacity(n + self.noise.false_positives);
        for (i, v) in self.gt.vertebrae.iter().enumerate() {
            let confidence = if p == 0.0 || protected.contains(&i) {
                1.0
            } else if rng.random::<f64>() < p {
                continue;
            } else {
                rng.random_range(0.6..0.95)
            };
            let mask = self.jitter(&v.mask, &mut rng);
            if !mask.is_empty() {
                out.push(DetectionCandidate { mask, confidence });
            }
        }
        let (w, h) = (self.gt.width as i64, self.gt.height as i64);
        for _ in 0..self.noise.false_positives {
            let side = 4.min(w).min(h);
            let x0 = rng.random_range(0..=w - side);
            let y0 = rng.random_range(0..=h - side);
            let mask = BinaryMask::from_pixels(
                (y0..y0 + side).flat_map(|y| (x0..x0 + side).map(move |x| (x, y))),
            );
            out.push(DetectionCandidate {
                mask,
                confidence: rng.random_range(0.05..=0.5),
            });
        }
        Ok(out)
    }
}

impl Segmenter for OracleSet {
    fn segment(&self, patch: &Patch, prompt: Point2) -> Result<LogitMask, BackendError> {
        let (pw, ph) = (patch.image.width, patch.image.height);
        let mut logits = LogitMask::filled(pw, ph, patch.offset, -ORACLE_LOGIT);
        let Some(target) = self.target_for(patch.to_global(prompt)) else {
            return Ok(logits);
        };
        let o = patch.offset;
        for (x, y) in self.gt.vertebrae[target].mask.pixels() {
            let (lx, ly) = (x - o.x, y - o.y);
            if lx >= 0 && ly >= 0 && (lx as usize) < pw && (ly as usize) < ph {
                logits.values[ly as usize * pw + lx as usize] = ORACLE_LOGIT;
            }
        }
        Ok(logits)
    }
}

impl Classifier for OracleSet {
    fn classify(&self, _patch: &Patch, center: Point2) -> Result<PatchClass, BackendError> {
        let (x, y) = center.pixel();
        Ok(self
            .gt
            .vertebrae
            .iter()
            .find(|v| v.mask.contains(x, y))
            .map_or(PatchClass::Background, |v| v.class))
    }
}

/// Oracle backends for `phantom`, with the linear extrapolator as predictor.
pub fn make_oracles(phantom: &PhantomImage, noise: OracleNoise) -> Backends {
    Backends::from_shared(
        Arc::new(OracleSet::new(phantom.ground_truth.clone(), noise)),
        Arc::new(LinearExtrapolator),
    )
}
