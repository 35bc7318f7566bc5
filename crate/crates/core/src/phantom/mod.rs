//! Synthetic spine radiographs with exact ground truth.
//!
//! Vertebrae are placed along a sinusoidal centerline
//! `x(y) = x0 + A·sin(2πy/λ + φ)`, each one a rectangle aligned with the local
//! tangent and rounded by the same Gaussian smooth-and-rethreshold operator
//! the pipeline applies to its masks, iterated to a fixed point. The stored
//! annotation polygon is the pixel-edge outline of that rounded shape, so
//! rasterizing it gives back the ground-truth mask exactly.

mod oracle;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anatomy::{Region, SpineEnd, VertebraLevel};
use crate::dataio::{
    class_for_level, save_annotations, save_image, AnnotatedVertebra, AnnotationDoc, DataError,
    GroundTruth, GtVertebra,
};
use crate::geometry::{
    intersection_count, mask_outline, rasterize_polygon, BinaryMask, GrayImage, Offset, Point2,
};
use crate::pipeline::{gaussian_kernel, smooth_mask};

pub use oracle::{make_oracles, OracleNoise, OracleSet, ORACLE_LOGIT};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("spine does not fit the image: {0}")]
    SpecOverflow(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub n_vertebrae: usize,
    pub vertebra_width: f64,
    pub vertebra_height: f64,
    /// Center-to-center distance along y.
    pub spacing: f64,
    pub curvature_amplitude: f64,
    pub curvature_wavelength: f64,
    /// Phase of the centerline sinusoid, radians.
    pub curvature_phase: f64,
    pub background_level: f64,
    /// Vertebra brightness above background.
    pub intensity_gap: f64,
    pub intensity_noise_sigma: f64,
    pub region: Region,
    pub spine_end_top: Option<SpineEnd>,
    pub spine_end_bottom: Option<SpineEnd>,
    /// Sigma of the rounding operator; match the pipeline's smoothing sigma.
    pub rounding_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_width: 200,
            image_height: 320,
            n_vertebrae: 7,
            vertebra_width: 40.0,
            vertebra_height: 22.0,
            spacing: 34.0,
            curvature_amplitude: 0.0,
            curvature_wavelength: 400.0,
            curvature_phase: 0.0,
            background_level: 80.0,
            intensity_gap: 60.0,
            intensity_noise_sigma: 10.0,
            region: Region::Cervical,
            spine_end_top: Some(SpineEnd::C2),
            spine_end_bottom: None,
            rounding_sigma: 2.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// A lumbar spine ending in S1 at the bottom.
    pub fn lumbar() -> Self {
        Self {
            region: Region::Lumbar,
            spine_end_top: None,
            spine_end_bottom: Some(SpineEnd::S1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.n_vertebrae < 3 {
            return bad(format!("need at least 3 vertebrae, got {}", self.n_vertebrae));
        }
        if !(self.vertebra_width > 0.0 && self.vertebra_height > 0.0) {
            return bad("vertebra size must be positive".into());
        }
        if !(self.spacing > self.vertebra_height) {
            return bad(format!(
                "spacing {} must exceed vertebra height {}",
                self.spacing, self.vertebra_height
            ));
        }
        if !(self.curvature_wavelength > 0.0) {
            return bad("curvature_wavelength must be positive".into());
        }
        if self.intensity_noise_sigma < 0.0 || self.rounding_sigma < 0.0 {
            return bad("sigmas must be non-negative".into());
        }
        if self.spine_end_top == Some(SpineEnd::S1) || self.spine_end_bottom == Some(SpineEnd::C2) {
            return bad("C2 can only be the top end and S1 only the bottom end".into());
        }
        if let Some(end) = self.spine_end_top.or(self.spine_end_bottom) {
            if end.level().region() != self.region {
                return bad(format!("{end:?} does not belong to the {:?} region", self.region));
            }
        }
        self.labels().map(|_| ())
    }

    /// Level names top to bottom.
    pub fn labels(&self) -> Result<Vec<VertebraLevel>, PhantomError> {
        let seq = self.region.sequence();
        let available: &[VertebraLevel] = match self.region {
            Region::Cervical if self.spine_end_top.is_some() => seq,
            Region::Cervical => &seq[1..],
            Region::Lumbar if self.spine_end_bottom.is_some() => seq,
            Region::Lumbar => &seq[..seq.len() - 1],
        };
        if self.n_vertebrae > available.len() {
            return Err(PhantomError::InvalidSpec(format!(
                "{} vertebrae do not fit the {:?} sequence ({} levels available)",
                self.n_vertebrae,
                self.region,
                available.len()
            )));
        }
        let n = self.n_vertebrae;
        Ok(match self.region {
            Region::Cervical => available[..n].to_vec(),
            Region::Lumbar => available[available.len() - n..].to_vec(),
        })
    }

    /// Same spec with amplitude drawn from `[0, curvature_amplitude]` and a random phase.
    pub fn sample_variant(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            curvature_amplitude: rng.random_range(0.0..=1.0) * self.curvature_amplitude,
            curvature_phase: rng.random_range(0.0..std::f64::consts::TAU),
            seed,
            ..self.clone()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PhantomError> {
        let spec: Self = toml::from_str(s).map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    fn centerline_x(&self, y: f64) -> f64 {
        let k = std::f64::consts::TAU / self.curvature_wavelength;
        self.image_width as f64 / 2.0 + self.curvature_amplitude * (k * y + self.curvature_phase).sin()
    }

    fn centerline_slope(&self, y: f64) -> f64 {
        let k = std::f64::consts::TAU / self.curvature_wavelength;
        self.curvature_amplitude * k * (k * y + self.curvature_phase).cos()
    }

    /// Vertebra centers in polygon coordinates, top to bottom.
    pub fn centers(&self) -> Vec<Point2> {
        let span = (self.n_vertebrae - 1) as f64 * self.spacing;
        let y0 = (self.image_height as f64 - span) / 2.0;
        (0..self.n_vertebrae)
            .map(|i| {
                let y = y0 + i as f64 * self.spacing;
                Point2::new(self.centerline_x(y), y)
            })
            .collect()
    }

    fn rectangle(&self, center: Point2) -> Vec<Point2> {
        let slope = self.centerline_slope(center.y);
        let norm = (1.0 + slope * slope).sqrt();
        // along the spine and across it
        let along = Point2::new(slope / norm, 1.0 / norm);
        let across = Point2::new(1.0 / norm, -slope / norm);
        let (hw, hh) = (self.vertebra_width / 2.0, self.vertebra_height / 2.0);
        vec![
            center - across * hw - along * hh,
            center + across * hw - along * hh,
            center + across * hw + along * hh,
            center - across * hw + along * hh,
        ]
    }
}

/// Iterates smooth-and-rethreshold until the mask no longer changes.
pub fn round_mask(mask: &BinaryMask, sigma: f64) -> BinaryMask {
    if sigma <= 0.0 {
        return mask.clone();
    }
    let pad = gaussian_kernel(sigma).len() as i64 / 2 + 1;
    let o = mask.offset();
    let mut framed = BinaryMask::new(
        mask.width() + 2 * pad as usize,
        mask.height() + 2 * pad as usize,
        Offset::new(o.x - pad, o.y - pad),
    );
    for (x, y) in mask.pixels() {
        framed.set_global(x, y, true);
    }
    for _ in 0..200 {
        let next = smooth_mask(&framed, sigma, 0.5);
        if next == framed {
            break;
        }
        framed = next;
    }
    framed.cropped()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomImage {
    pub spec: PhantomSpec,
    pub image: GrayImage,
    pub ground_truth: GroundTruth,
}

impl PhantomImage {
    /// Mean long side of the ground-truth bounding boxes.
    pub fn vertebra_size(&self) -> f64 {
        let v = &self.ground_truth.vertebrae;
        v.iter().map(|g| g.mask.bbox_long_side() as f64).sum::<f64>() / v.len() as f64
    }

    pub fn annotation(&self, image_path: &str) -> AnnotationDoc {
        AnnotationDoc {
            image_path: image_path.to_string(),
            width: self.ground_truth.width,
            height: self.ground_truth.height,
            region: self.ground_truth.region,
            vertebrae: self
                .ground_truth
                .vertebrae
                .iter()
                .map(|v| AnnotatedVertebra {
                    label: v.label,
                    polygon: v.polygon.clone(),
                })
                .collect(),
            warnings: Vec::new(),
        }
    }

    /// Writes `<id>.pgm` and `<id>.ann` into `dir`, creating it if needed.
    pub fn export(&self, dir: &Path, id: &str) -> Result<(), PhantomError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let image_name = format!("{id}.pgm");
        save_image(&self.image, &dir.join(&image_name))?;
        save_annotations(
            &self.annotation(&image_name),
            &dir.join(format!("{id}.{}", crate::dataio::ANNOTATION_EXT)),
        )?;
        Ok(())
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomImage, PhantomError> {
    spec.validate()?;
    let labels = spec.labels()?;
    let (w, h) = (spec.image_width, spec.image_height);

    let mut vertebrae = Vec::with_capacity(labels.len());
    for (label, center) in labels.iter().zip(spec.centers()) {
        let rect = spec.rectangle(center);
        if rect
            .iter()
            .any(|p| p.x < 1.0 || p.y < 1.0 || p.x > (w - 1) as f64 || p.y > (h - 1) as f64)
        {
            return Err(PhantomError::SpecOverflow(format!("{label} extends past the image border")));
        }
        let raw = rasterize_polygon(&rect, w, h)
            .map_err(|e| PhantomError::InvalidSpec(format!("{label}: {e}")))?;
        let mask = round_mask(&raw, spec.rounding_sigma);
        if mask.is_empty() {
            return Err(PhantomError::InvalidSpec(format!("{label} vanished when rounded")));
        }
        let polygon = mask_outline(&mask).ok_or_else(|| {
            PhantomError::InvalidSpec(format!("{label}: rounded mask is not row-convex"))
        })?;
        vertebrae.push(GtVertebra {
            label: *label,
            polygon,
            mask,
            class: class_for_level(*label),
        });
    }
    for i in 0..vertebrae.len() {
        for j in i + 1..vertebrae.len() {
            if intersection_count(&vertebrae[i].mask, &vertebrae[j].mask) > 0 {
                return Err(PhantomError::InvalidSpec(format!(
                    "{} and {} overlap",
                    vertebrae[i].label, vertebrae[j].label
                )));
            }
        }
    }

    let mut field = vec![spec.background_level; w * h];
    for v in &vertebrae {
        for (x, y) in v.mask.pixels() {
            field[y as usize * w + x as usize] += spec.intensity_gap;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.intensity_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.intensity_noise_sigma).expect("valid sigma");
        for v in field.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let data = field.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();

    Ok(PhantomImage {
        spec: spec.clone(),
        image: GrayImage::from_raw(w, h, data).expect("sized"),
        ground_truth: GroundTruth {
            width: w,
            height: h,
            region: spec.region,
            vertebrae,
        },
    })
}
