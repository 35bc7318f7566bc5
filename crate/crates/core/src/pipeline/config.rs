use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::anatomy::Region;

/// Thresholds and sizes for one pipeline run.
///
/// Serialized as a flat key-value document; every key is optional and falls
/// back to the default below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Detector candidates below this confidence are discarded.
    pub confidence_threshold: f64,
    /// A new mask overlapping the previous vertebra above this IoU ends the walk.
    pub iou_threshold: f64,
    /// Probability threshold applied after the sigmoid.
    pub sigmoid_threshold: f64,
    /// Patch side as a multiple of the estimated vertebra extent.
    pub patch_scale: f64,
    pub smoothing_sigma: f64,
    pub resmooth_threshold: f64,
    pub max_steps_per_direction: usize,
    pub region: Region,
    /// Set for scans where the superior end has larger image y.
    pub flip_superior: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.6,
            iou_threshold: 0.1,
            sigmoid_threshold: 0.9,
            patch_scale: 2.0,
            smoothing_sigma: 2.0,
            resmooth_threshold: 0.5,
            max_steps_per_direction: 12,
            region: Region::Cervical,
            flip_superior: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let ratios = [
            ("confidence_threshold", self.confidence_threshold),
            ("iou_threshold", self.iou_threshold),
            ("sigmoid_threshold", self.sigmoid_threshold),
            ("resmooth_threshold", self.resmooth_threshold),
        ];
        for (name, v) in ratios {
            if !(v > 0.0 && v < 1.0) {
                return Err(PipelineError::InvalidConfig(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        if !(self.patch_scale > 1.0 && self.patch_scale.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!(
                "patch_scale must exceed 1, got {}",
                self.patch_scale
            )));
        }
        if !(self.smoothing_sigma >= 0.0 && self.smoothing_sigma.is_finite()) {
            return Err(PipelineError::InvalidConfig("smoothing_sigma must be non-negative".into()));
        }
        if self.max_steps_per_direction < 1 {
            return Err(PipelineError::InvalidConfig("max_steps_per_direction must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(s).map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Logit value equivalent to `sigmoid_threshold` in probability space.
    pub fn logit_threshold(&self) -> f64 {
        (self.sigmoid_threshold / (1.0 - self.sigmoid_threshold)).ln()
    }
}
