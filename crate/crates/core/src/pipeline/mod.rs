//! The segmentation state machine.
//!
//! One image goes through four stages:
//!
//! 1. **Seeds**: detector candidates above the confidence threshold are
//!    ordered along their principal axis and the best consecutive triple is
//!    kept ([`select_seeds`]).
//! 2. **Initial stage**: each seed is re-segmented from a patch around its
//!    centroid ([`initial_stage`]).
//! 3. **Walk**: from the seed triple, the next centroid is predicted,
//!    segmented, checked for overlap with the previous vertebra and classified,
//!    in both directions along the axis ([`walk`], [`inductive_step`]).
//! 4. **Post-processing**: retained logit masks are binarized, smoothed and
//!    labeled from the detected spine ends ([`binarize_and_smooth`],
//!    [`assign_labels`]).

mod config;
mod labels;
mod post;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends, DetectionCandidate, LogitMask, PatchClass};
use crate::geometry::{
    self, centroid, extract_patch, iou, principal_axis, sort_by_projection, Axis, BinaryMask,
    GeometryError, GrayImage, Point2,
};

pub use config::PipelineConfig;
pub use labels::{ascending_is_inferior, assign_labels, Label};
pub use post::{binarize, binarize_and_smooth, gaussian_kernel, sigmoid, smooth_mask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("insufficient seeds: {found} candidates above the confidence threshold, need 3")]
    InsufficientSeeds { found: usize },
    #[error("seed segmentation produced an empty mask")]
    EmptySegmentation,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("conflicting anchors: {0}")]
    ConflictingAnchors(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    InducedUp,
    InducedDown,
}

/// Walk direction along the seed axis: `Up` towards decreasing projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    fn origin(self) -> Origin {
        match self {
            Direction::Up => Origin::InducedUp,
            Direction::Down => Origin::InducedDown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Overlap,
    Background,
    SpineEnd,
    StepCap,
    Bounds,
    NonProgressing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertebraInstance {
    pub mask: BinaryMask,
    pub logits: LogitMask,
    pub centroid: Point2,
    pub class: PatchClass,
    pub origin: Origin,
    pub label: Option<Label>,
    /// Detector confidence for seeds, 1.0 for induced instances.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpineChain {
    /// Ordered by ascending projection on `axis`.
    pub instances: Vec<VertebraInstance>,
    pub axis: Option<Axis>,
    pub up_termination: Option<Termination>,
    pub down_termination: Option<Termination>,
    pub anchored: bool,
    /// Why the image produced no chain, if it did not.
    pub failure: Option<String>,
}

impl SpineChain {
    pub fn failed(reason: impl Into<String>) -> Self {
        Self {
            instances: Vec::new(),
            axis: None,
            up_termination: None,
            down_termination: None,
            anchored: false,
            failure: Some(reason.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continue(VertebraInstance),
    TerminateOverlap,
    TerminateBackground,
    TerminateSpineEnd(VertebraInstance),
    TerminateBounds,
    TerminateNonProgressing,
}

/// The chosen seed triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSelection {
    /// Centroids in ascending projection order.
    pub points: [Point2; 3],
    /// Indices into the candidate list, same order as `points`.
    pub indices: [usize; 3],
    pub confidences: [f64; 3],
    pub axis: Axis,
}

/// Keeps candidates at or above the confidence threshold, orders their
/// centroids along the principal axis and returns the consecutive triple with
/// the highest mean confidence (first one on ties).
pub fn select_seeds(
    candidates: &[DetectionCandidate],
    cfg: &PipelineConfig,
) -> Result<SeedSelection, PipelineError> {
    let kept: Vec<(usize, Point2, f64)> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.confidence >= cfg.confidence_threshold)
        .filter_map(|(i, c)| centroid(&c.mask).ok().map(|p| (i, p, c.confidence)))
        .collect();
    if kept.len() < 3 {
        return Err(PipelineError::InsufficientSeeds { found: kept.len() });
    }
    let points: Vec<Point2> = kept.iter().map(|k| k.1).collect();
    let axis = principal_axis(&points)?;
    let order = sort_by_projection(&points, &axis);

    // Float sums of equal-mean triples can differ in the last bits depending on
    // summation order; treat those as ties so the earliest triple wins.
    const TIE_EPS: f64 = 1e-12;
    let mut best = 0;
    let mut best_sum = f64::NEG_INFINITY;
    for start in 0..order.len() - 2 {
        let sum: f64 = order[start..start + 3].iter().map(|&i| kept[i].2).sum();
        if sum > best_sum + TIE_EPS {
            best_sum = sum;
            best = start;
        }
    }
    let pick = |j: usize| kept[order[best + j]];
    Ok(SeedSelection {
        points: [pick(0).1, pick(1).1, pick(2).1],
        indices: [pick(0).0, pick(1).0, pick(2).0],
        confidences: [pick(0).2, pick(1).2, pick(2).2],
        axis,
    })
}

/// Seed instances plus the sizes the walk needs.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialStage {
    /// Ascending projection order.
    pub seeds: [VertebraInstance; 3],
    pub axis: Axis,
    /// Mean bounding-box long side of the three seed masks.
    pub extent: f64,
    pub patch_size: usize,
}

fn patch_size_for(extent: f64, cfg: &PipelineConfig) -> usize {
    ((cfg.patch_scale * extent).round() as usize).max(1)
}

fn segment_at(
    image: &GrayImage,
    at: Point2,
    patch_size: usize,
    backends: &Backends,
    cfg: &PipelineConfig,
) -> Result<(LogitMask, BinaryMask), PipelineError> {
    let patch = extract_patch(image, at, patch_size);
    let logits = backends.segmenter.segment(&patch, patch.to_local(at))?;
    if logits.width != patch.image.width || logits.height != patch.image.height {
        return Err(BackendError::new(format!(
            "segmenter returned {}x{} logits for a {}x{} patch",
            logits.width, logits.height, patch.image.width, patch.image.height
        ))
        .into());
    }
    let mask = binarize(&logits, cfg.sigmoid_threshold).clip_to(image.width, image.height);
    Ok((logits, mask))
}

fn classify_at(
    image: &GrayImage,
    at: Point2,
    patch_size: usize,
    backends: &Backends,
) -> Result<PatchClass, BackendError> {
    let patch = extract_patch(image, at, patch_size);
    backends.classifier.classify(&patch, at)
}

/// Detects, selects seeds and segments them.
///
/// Seeds are also classified, so a spine end among them can anchor the labels
/// and stop the walk in its direction. A seed the classifier calls background
/// is kept as a regular vertebra.
pub fn initial_stage(
    image: &GrayImage,
    backends: &Backends,
    cfg: &PipelineConfig,
) -> Result<InitialStage, PipelineError> {
    let candidates = backends.detector.detect(image)?;
    let sel = select_seeds(&candidates, cfg)?;
    let detector_extent = sel
        .indices
        .iter()
        .map(|&i| candidates[i].mask.bbox_long_side() as f64)
        .sum::<f64>()
        / 3.0;
    let patch_size = patch_size_for(detector_extent, cfg);

    let mut seeds = Vec::with_capacity(3);
    for (k, &p) in sel.points.iter().enumerate() {
        let (logits, mask) = segment_at(image, p, patch_size, backends, cfg)?;
        let c = centroid(&mask).map_err(|_| PipelineError::EmptySegmentation)?;
        let class = match classify_at(image, c, patch_size, backends)? {
            PatchClass::Background => PatchClass::Regular,
            other => other,
        };
        seeds.push(VertebraInstance {
            mask,
            logits,
            centroid: c,
            class,
            origin: Origin::Seed,
            label: None,
            confidence: sel.confidences[k],
        });
    }
    let extent = seeds.iter().map(|s| s.mask.bbox_long_side() as f64).sum::<f64>() / 3.0;
    let seeds: [VertebraInstance; 3] = seeds.try_into().expect("three seeds");
    Ok(InitialStage {
        seeds,
        axis: sel.axis,
        extent,
        patch_size: patch_size_for(extent, cfg),
    })
}

/// Everything an inductive step reads besides the walk state.
pub struct StepContext<'a> {
    pub image: &'a GrayImage,
    pub backends: &'a Backends,
    pub cfg: &'a PipelineConfig,
    pub axis: &'a Axis,
    pub patch_size: usize,
}

/// Predicts, segments and vets the next vertebra of a walk.
///
/// The checks run in this order: prediction outside the image (`Bounds`),
/// empty mask (`NonProgressing`), IoU with the previous vertebra above the
/// threshold (`Overlap`), centroid not moving past the previous one along the
/// axis (`NonProgressing`), then the classifier decides.
pub fn inductive_step(
    last3: [Point2; 3],
    prev: &VertebraInstance,
    direction: Direction,
    ctx: &StepContext<'_>,
) -> Result<StepOutcome, PipelineError> {
    let image = ctx.image;
    let dims = (image.width, image.height);
    let predicted = ctx.backends.predictor.predict_next(last3, dims)?;
    if !predicted.is_finite() || !image.contains_point(predicted) {
        return Ok(StepOutcome::TerminateBounds);
    }
    let (logits, mask) = segment_at(image, predicted, ctx.patch_size, ctx.backends, ctx.cfg)?;
    let Ok(c) = centroid(&mask) else {
        return Ok(StepOutcome::TerminateNonProgressing);
    };
    if iou(&mask, &prev.mask) > ctx.cfg.iou_threshold {
        return Ok(StepOutcome::TerminateOverlap);
    }
    let (new_p, prev_p) = (ctx.axis.project(c), ctx.axis.project(prev.centroid));
    let progressed = match direction {
        Direction::Down => new_p > prev_p,
        Direction::Up => new_p < prev_p,
    };
    if !progressed {
        return Ok(StepOutcome::TerminateNonProgressing);
    }
    let class = classify_at(image, c, ctx.patch_size, ctx.backends)?;
    let instance = VertebraInstance {
        mask,
        logits,
        centroid: c,
        class,
        origin: direction.origin(),
        label: None,
        confidence: 1.0,
    };
    Ok(match class {
        PatchClass::Background => StepOutcome::TerminateBackground,
        PatchClass::SpineEnd(_) => StepOutcome::TerminateSpineEnd(instance),
        PatchClass::Regular => StepOutcome::Continue(instance),
    })
}

/// Repeats [`inductive_step`] from the seed triple until a termination or the step cap.
///
/// Returned instances are in walk order. If the outermost seed in this
/// direction is already a spine end, the walk stops without stepping.
pub fn walk(
    direction: Direction,
    seeds: &[VertebraInstance; 3],
    ctx: &StepContext<'_>,
) -> Result<(Vec<VertebraInstance>, Termination), PipelineError> {
    let ordered: Vec<&VertebraInstance> = match direction {
        Direction::Down => seeds.iter().collect(),
        Direction::Up => seeds.iter().rev().collect(),
    };
    if ordered[2].class.spine_end().is_some() {
        return Ok((Vec::new(), Termination::SpineEnd));
    }
    let mut triple = [ordered[0].centroid, ordered[1].centroid, ordered[2].centroid];
    let mut added: Vec<VertebraInstance> = Vec::new();
    for _ in 0..ctx.cfg.max_steps_per_direction {
        let prev = added.last().unwrap_or(ordered[2]);
        let outcome = inductive_step(triple, prev, direction, ctx)?;
        let next = match outcome {
            StepOutcome::Continue(inst) => inst,
            StepOutcome::TerminateSpineEnd(inst) => {
                added.push(inst);
                return Ok((added, Termination::SpineEnd));
            }
            StepOutcome::TerminateOverlap => return Ok((added, Termination::Overlap)),
            StepOutcome::TerminateBackground => return Ok((added, Termination::Background)),
            StepOutcome::TerminateBounds => return Ok((added, Termination::Bounds)),
            StepOutcome::TerminateNonProgressing => {
                return Ok((added, Termination::NonProgressing))
            }
        };
        triple = [triple[1], triple[2], next.centroid];
        added.push(next);
    }
    Ok((added, Termination::StepCap))
}

/// Full pipeline for one image.
///
/// Seed or seed-segmentation failures yield an empty chain with `failure`
/// set; backend failures are returned as errors.
pub fn run_image(
    image: &GrayImage,
    backends: &Backends,
    cfg: &PipelineConfig,
) -> Result<SpineChain, PipelineError> {
    cfg.validate()?;
    if image.is_empty() {
        return Ok(SpineChain::failed("empty image"));
    }
    let init = match initial_stage(image, backends, cfg) {
        Ok(init) => init,
        Err(e @ (PipelineError::InsufficientSeeds { .. }
        | PipelineError::EmptySegmentation
        | PipelineError::Geometry(_))) => return Ok(SpineChain::failed(e.to_string())),
        Err(e) => return Err(e),
    };
    let ctx = StepContext {
        image,
        backends,
        cfg,
        axis: &init.axis,
        patch_size: init.patch_size,
    };
    let (up, up_term) = walk(Direction::Up, &init.seeds, &ctx)?;
    let (down, down_term) = walk(Direction::Down, &init.seeds, &ctx)?;

    let mut instances = Vec::with_capacity(up.len() + 3 + down.len());
    instances.extend(up.into_iter().rev());
    instances.extend(init.seeds);
    instances.extend(down);

    let mut dropped = 0;
    let instances: Vec<VertebraInstance> = instances
        .into_iter()
        .filter_map(|mut inst| {
            let smoothed = binarize_and_smooth(&inst.logits, cfg)
                .clip_to(image.width, image.height)
                .cropped();
            match centroid(&smoothed) {
                Ok(c) => {
                    inst.mask = smoothed;
                    inst.centroid = c;
                    Some(inst)
                }
                Err(_) => {
                    dropped += 1;
                    None
                }
            }
        })
        .collect();
    if dropped > 0 {
        log::warn!("{dropped} instance(s) vanished after smoothing");
    }

    let chain = SpineChain {
        anchored: instances.iter().any(|i| i.class.spine_end().is_some()),
        instances,
        axis: Some(init.axis),
        up_termination: Some(up_term),
        down_termination: Some(down_term),
        failure: None,
    };
    match assign_labels(chain.clone(), cfg) {
        Ok(labeled) => Ok(labeled),
        Err(e @ PipelineError::ConflictingAnchors(_)) => {
            let mut fallback = chain;
            for (i, inst) in fallback.instances.iter_mut().enumerate() {
                inst.label = Some(Label::Relative(i));
            }
            fallback.failure = Some(e.to_string());
            Ok(fallback)
        }
        Err(e) => Err(e),
    }
}

/// Checks the chain invariants: strictly increasing projections and
/// consecutive IoU at most `iou_threshold`.
pub fn chain_is_consistent(chain: &SpineChain, cfg: &PipelineConfig) -> bool {
    let Some(axis) = chain.axis else {
        return chain.instances.is_empty();
    };
    chain.instances.windows(2).all(|w| {
        axis.project(w[0].centroid) < axis.project(w[1].centroid)
            && geometry::iou(&w[0].mask, &w[1].mask) <= cfg.iou_threshold
    })
}

#[cfg(test)]
mod tests;
