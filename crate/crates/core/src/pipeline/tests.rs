use std::sync::Arc;

use super::*;
use crate::anatomy::{Region, SpineEnd, VertebraLevel};
use crate::backends::{Classifier, Detector, LinearExtrapolator, Segmenter};
use crate::geometry::{dice, Offset, Patch};
use crate::phantom::{generate, OracleNoise, OracleSet, PhantomSpec};

fn square(x0: i64, y0: i64, side: i64) -> BinaryMask {
    BinaryMask::from_pixels((y0..y0 + side).flat_map(|y| (x0..x0 + side).map(move |x| (x, y))))
}

/// Fixed answers regardless of input.
struct Scripted {
    candidates: Vec<DetectionCandidate>,
    segment: Option<BinaryMask>,
    class: PatchClass,
}

impl Detector for Scripted {
    fn detect(&self, _: &GrayImage) -> Result<Vec<DetectionCandidate>, BackendError> {
        Ok(self.candidates.clone())
    }
}

impl Segmenter for Scripted {
    fn segment(&self, patch: &Patch, _: Point2) -> Result<LogitMask, BackendError> {
        let (w, h) = (patch.image.width, patch.image.height);
        let mut l = LogitMask::filled(w, h, patch.offset, -10.0);
        if let Some(m) = &self.segment {
            for y in 0..h {
                for x in 0..w {
                    if m.contains(x as i64 + patch.offset.x, y as i64 + patch.offset.y) {
                        l.values[y * w + x] = 10.0;
                    }
                }
            }
        }
        Ok(l)
    }
}

impl Classifier for Scripted {
    fn classify(&self, _: &Patch, _: Point2) -> Result<PatchClass, BackendError> {
        Ok(self.class)
    }
}

fn scripted(segment: Option<BinaryMask>, class: PatchClass) -> Backends {
    Backends::from_shared(
        Arc::new(Scripted {
            candidates: Vec::new(),
            segment,
            class,
        }),
        Arc::new(LinearExtrapolator),
    )
}

fn candidate_at(y: i64, confidence: f64) -> DetectionCandidate {
    DetectionCandidate {
        mask: square(40, y, 10),
        confidence,
    }
}

#[test]
fn seeds_pick_best_consecutive_triple() {
    let confs = [0.5, 0.9, 0.8, 0.7, 0.95];
    let cands: Vec<_> = confs.iter().enumerate().map(|(i, &c)| candidate_at(20 * i as i64, c)).collect();
    let sel = select_seeds(&cands, &PipelineConfig::default()).unwrap();
    assert_eq!(sel.indices, [2, 3, 4]);
    assert_eq!(sel.confidences, [0.8, 0.7, 0.95]);
}

#[test]
fn seeds_follow_projection_not_input_order() {
    let cands = vec![candidate_at(60, 0.9), candidate_at(0, 0.7), candidate_at(20, 0.9), candidate_at(40, 0.9)];
    let sel = select_seeds(&cands, &PipelineConfig::default()).unwrap();
    assert_eq!(sel.indices, [2, 3, 0]);
    assert!(sel.points[0].y < sel.points[1].y && sel.points[1].y < sel.points[2].y);
}

#[test]
fn seeds_need_three_survivors() {
    let cfg = PipelineConfig::default();
    let three = vec![candidate_at(0, 0.6), candidate_at(20, 0.61), candidate_at(40, 0.99), candidate_at(60, 0.2)];
    assert_eq!(select_seeds(&three, &cfg).unwrap().indices, [0, 1, 2]);
    let two = vec![candidate_at(0, 0.9), candidate_at(20, 0.59), candidate_at(40, 0.9)];
    assert_eq!(select_seeds(&two, &cfg), Err(PipelineError::InsufficientSeeds { found: 2 }));
}

fn instance(mask: BinaryMask, class: PatchClass) -> VertebraInstance {
    VertebraInstance {
        centroid: centroid(&mask).unwrap(),
        logits: LogitMask::filled(1, 1, Offset::ZERO, 0.0),
        mask,
        class,
        origin: Origin::Seed,
        label: None,
        confidence: 1.0,
    }
}

const DOWN: Axis = Axis {
    origin: Point2 { x: 0.0, y: 0.0 },
    direction: Point2 { x: 0.0, y: 1.0 },
};

/// Three 10×10 vertebrae at y = 40, 70, 100 and the step that follows them.
fn step_with(backends: &Backends, image: &GrayImage) -> StepOutcome {
    let cfg = PipelineConfig::default();
    let prev = instance(square(45, 100, 10), PatchClass::Regular);
    let ctx = StepContext {
        image,
        backends,
        cfg: &cfg,
        axis: &DOWN,
        patch_size: 80,
    };
    let last3 = [Point2::new(49.5, 44.5), Point2::new(49.5, 74.5), prev.centroid];
    inductive_step(last3, &prev, Direction::Down, &ctx).unwrap()
}

#[test]
fn step_identical_mask_is_overlap() {
    let img = GrayImage::new(100, 200);
    let b = scripted(Some(square(45, 100, 10)), PatchClass::Regular);
    assert_eq!(step_with(&b, &img), StepOutcome::TerminateOverlap);
}

#[test]
fn step_background_rejects_mask() {
    let img = GrayImage::new(100, 200);
    let b = scripted(Some(square(45, 130, 10)), PatchClass::Background);
    assert_eq!(step_with(&b, &img), StepOutcome::TerminateBackground);
}

#[test]
fn step_spine_end_keeps_instance() {
    let img = GrayImage::new(100, 200);
    let b = scripted(Some(square(45, 130, 10)), PatchClass::SpineEnd(SpineEnd::S1));
    match step_with(&b, &img) {
        StepOutcome::TerminateSpineEnd(inst) => {
            assert_eq!(inst.class, PatchClass::SpineEnd(SpineEnd::S1));
            assert_eq!(inst.origin, Origin::InducedDown);
            assert_eq!(inst.centroid, Point2::new(49.5, 134.5));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn step_regular_continues() {
    let img = GrayImage::new(100, 200);
    let b = scripted(Some(square(45, 130, 10)), PatchClass::Regular);
    assert!(matches!(step_with(&b, &img), StepOutcome::Continue(_)));
}

#[test]
fn step_empty_or_backwards_mask_is_non_progressing() {
    let img = GrayImage::new(100, 200);
    assert_eq!(step_with(&scripted(None, PatchClass::Regular), &img), StepOutcome::TerminateNonProgressing);
    // disjoint from prev but behind it along the axis
    let behind = scripted(Some(square(45, 115, 4).translated(0, -40)), PatchClass::Regular);
    assert_eq!(step_with(&behind, &GrayImage::new(100, 200)), StepOutcome::TerminateNonProgressing);
}

#[test]
fn step_prediction_outside_image_is_bounds() {
    let img = GrayImage::new(100, 125);
    let b = scripted(Some(square(45, 130, 10)), PatchClass::Regular);
    assert_eq!(step_with(&b, &img), StepOutcome::TerminateBounds);
}

fn three_seeds() -> [VertebraInstance; 3] {
    [
        instance(square(45, 40, 10), PatchClass::Regular),
        instance(square(45, 70, 10), PatchClass::Regular),
        instance(square(45, 100, 10), PatchClass::Regular),
    ]
}

#[test]
fn walk_with_zero_steps_hits_cap() {
    let img = GrayImage::new(100, 200);
    let b = scripted(Some(square(45, 130, 10)), PatchClass::Regular);
    let cfg = PipelineConfig {
        max_steps_per_direction: 0,
        ..Default::default()
    };
    let ctx = StepContext {
        image: &img,
        backends: &b,
        cfg: &cfg,
        axis: &DOWN,
        patch_size: 80,
    };
    let (added, term) = walk(Direction::Down, &three_seeds(), &ctx).unwrap();
    assert!(added.is_empty());
    assert_eq!(term, Termination::StepCap);
}

#[test]
fn walk_with_stuck_segmenter_overlaps_immediately() {
    let img = GrayImage::new(100, 200);
    let b = scripted(Some(square(45, 100, 10)), PatchClass::Regular);
    let cfg = PipelineConfig::default();
    let ctx = StepContext {
        image: &img,
        backends: &b,
        cfg: &cfg,
        axis: &DOWN,
        patch_size: 80,
    };
    let (added, term) = walk(Direction::Down, &three_seeds(), &ctx).unwrap();
    assert!(added.is_empty());
    assert_eq!(term, Termination::Overlap);
}

#[test]
fn walk_stops_at_a_spine_end_seed() {
    let img = GrayImage::new(100, 200);
    let b = scripted(Some(square(45, 10, 10)), PatchClass::Regular);
    let cfg = PipelineConfig::default();
    let ctx = StepContext {
        image: &img,
        backends: &b,
        cfg: &cfg,
        axis: &DOWN,
        patch_size: 80,
    };
    let mut seeds = three_seeds();
    seeds[0].class = PatchClass::SpineEnd(SpineEnd::C2);
    let (added, term) = walk(Direction::Up, &seeds, &ctx).unwrap();
    assert!(added.is_empty());
    assert_eq!(term, Termination::SpineEnd);
}

#[test]
fn no_detections_gives_failed_chain() {
    let b = scripted(Some(square(45, 10, 10)), PatchClass::Regular);
    let chain = run_image(&GrayImage::new(100, 200), &b, &PipelineConfig::default()).unwrap();
    assert!(chain.instances.is_empty());
    assert!(chain.failure.unwrap().contains("insufficient seeds"));
}

#[test]
fn all_negative_logits_is_empty_segmentation() {
    let b = Backends::from_shared(
        Arc::new(Scripted {
            candidates: vec![candidate_at(20, 0.9), candidate_at(50, 0.9), candidate_at(80, 0.9)],
            segment: None,
            class: PatchClass::Regular,
        }),
        Arc::new(LinearExtrapolator),
    );
    let img = GrayImage::new(100, 200);
    let err = initial_stage(&img, &b, &PipelineConfig::default()).unwrap_err();
    assert_eq!(err, PipelineError::EmptySegmentation);
    let chain = run_image(&img, &b, &PipelineConfig::default()).unwrap();
    assert!(chain.failure.is_some());
}

#[test]
fn invalid_config_is_rejected() {
    let b = scripted(None, PatchClass::Regular);
    let cfg = PipelineConfig {
        iou_threshold: 1.5,
        ..Default::default()
    };
    assert!(matches!(
        run_image(&GrayImage::new(10, 10), &b, &cfg),
        Err(PipelineError::InvalidConfig(_))
    ));
}

fn chain_of(classes: &[PatchClass], axis: Axis) -> SpineChain {
    let instances = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| instance(square(45, 30 * i as i64, 10), c))
        .collect();
    SpineChain {
        instances,
        axis: Some(axis),
        up_termination: None,
        down_termination: None,
        anchored: false,
        failure: None,
    }
}

fn label_names(chain: &SpineChain) -> Vec<String> {
    chain.instances.iter().map(|i| i.label.unwrap().to_string()).collect()
}

const R: PatchClass = PatchClass::Regular;

#[test]
fn lumbar_labels_from_s1() {
    let cfg = PipelineConfig {
        region: Region::Lumbar,
        ..Default::default()
    };
    let mut classes = vec![R; 6];
    classes.push(PatchClass::SpineEnd(SpineEnd::S1));
    let chain = assign_labels(chain_of(&classes, DOWN), &cfg).unwrap();
    assert_eq!(label_names(&chain), ["T12", "L1", "L2", "L3", "L4", "L5", "S1"]);
    assert!(chain.anchored);
}

#[test]
fn cervical_labels_from_c2() {
    let mut classes = vec![PatchClass::SpineEnd(SpineEnd::C2)];
    classes.extend([R; 6]);
    let chain = assign_labels(chain_of(&classes, DOWN), &PipelineConfig::default()).unwrap();
    assert_eq!(label_names(&chain), ["C2", "C3", "C4", "C5", "C6", "C7", "T1"]);
}

#[test]
fn labels_past_the_sequence_are_out_of_range() {
    let mut classes = vec![PatchClass::SpineEnd(SpineEnd::C2)];
    classes.extend([R; 7]);
    let chain = assign_labels(chain_of(&classes, DOWN), &PipelineConfig::default()).unwrap();
    let last = chain.instances.last().unwrap().label.unwrap();
    assert_eq!(last, Label::Below(1));
    assert!(last.is_out_of_range());
    let cfg = PipelineConfig {
        region: Region::Lumbar,
        ..Default::default()
    };
    let mut classes = vec![R; 8];
    classes.push(PatchClass::SpineEnd(SpineEnd::S1));
    let chain = assign_labels(chain_of(&classes, DOWN), &cfg).unwrap();
    assert_eq!(label_names(&chain)[..3], ["above2", "above1", "T12"]);
}

#[test]
fn unanchored_labels_are_relative() {
    let chain = assign_labels(chain_of(&[R; 4], DOWN), &PipelineConfig::default()).unwrap();
    assert_eq!(label_names(&chain), ["V0", "V1", "V2", "V3"]);
    assert!(!chain.anchored);
}

#[test]
fn labels_are_order_equivariant() {
    let mut classes = vec![R; 5];
    classes[0] = PatchClass::SpineEnd(SpineEnd::C2);
    let forward = assign_labels(chain_of(&classes, DOWN), &PipelineConfig::default()).unwrap();
    let mut rev = chain_of(&classes, DOWN);
    rev.instances.reverse();
    rev.axis = Some(DOWN.reversed());
    let backward = assign_labels(rev, &PipelineConfig::default()).unwrap();
    for inst in &forward.instances {
        let twin = backward.instances.iter().find(|b| b.centroid == inst.centroid).unwrap();
        assert_eq!(twin.label, inst.label);
    }
    // relative labels too
    let f = assign_labels(chain_of(&[R; 4], DOWN), &PipelineConfig::default()).unwrap();
    let mut r = chain_of(&[R; 4], DOWN);
    r.instances.reverse();
    r.axis = Some(DOWN.reversed());
    let b = assign_labels(r, &PipelineConfig::default()).unwrap();
    for inst in &f.instances {
        let twin = b.instances.iter().find(|b| b.centroid == inst.centroid).unwrap();
        assert_eq!(twin.label, inst.label);
    }
}

#[test]
fn flip_superior_reverses_anchor_side() {
    let cfg = PipelineConfig {
        flip_superior: true,
        ..Default::default()
    };
    let mut classes = vec![R; 7];
    classes[6] = PatchClass::SpineEnd(SpineEnd::C2);
    let chain = assign_labels(chain_of(&classes, DOWN), &cfg).unwrap();
    assert_eq!(label_names(&chain), ["T1", "C7", "C6", "C5", "C4", "C3", "C2"]);
}

#[test]
fn conflicting_anchors() {
    let mut classes = vec![R; 5];
    classes[0] = PatchClass::SpineEnd(SpineEnd::C2);
    classes[2] = PatchClass::SpineEnd(SpineEnd::C2);
    let err = assign_labels(chain_of(&classes, DOWN), &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, PipelineError::ConflictingAnchors(_)));
    // S1 cannot anchor a cervical chain
    let mut classes = vec![R; 4];
    classes[3] = PatchClass::SpineEnd(SpineEnd::S1);
    assert!(assign_labels(chain_of(&classes, DOWN), &PipelineConfig::default()).is_err());
}

fn oracle_backends(spec: &PhantomSpec) -> (crate::phantom::PhantomImage, Backends) {
    let p = generate(spec).unwrap();
    let b = crate::phantom::make_oracles(&p, OracleNoise::default());
    (p, b)
}

#[test]
fn oracle_run_recovers_every_vertebra() {
    for (spec, region) in [
        (PhantomSpec::default(), Region::Cervical),
        (PhantomSpec::lumbar(), Region::Lumbar),
    ] {
        let spec = PhantomSpec {
            curvature_amplitude: 20.0,
            ..spec
        }
        .sample_variant(11);
        let (p, b) = oracle_backends(&spec);
        let cfg = PipelineConfig {
            region,
            ..Default::default()
        };
        let chain = run_image(&p.image, &b, &cfg).unwrap();
        assert!(chain.failure.is_none());
        assert!(chain.anchored);
        assert!(chain_is_consistent(&chain, &cfg));
        assert_eq!(chain.instances.len(), 7);
        for (inst, gt) in chain.instances.iter().zip(&p.ground_truth.vertebrae) {
            assert_eq!(inst.label, Some(Label::Level(gt.label)));
            assert_eq!(dice(&inst.mask, &gt.mask).unwrap(), 1.0);
            assert_eq!(inst.centroid, centroid(&inst.mask).unwrap());
        }
        assert_eq!(chain, run_image(&p.image, &b, &cfg).unwrap());
    }
}

#[test]
fn initial_stage_reproduces_adjacent_ground_truth() {
    let (p, b) = oracle_backends(&PhantomSpec::lumbar());
    let init = initial_stage(&p.image, &b, &PipelineConfig::default()).unwrap();
    let gt = &p.ground_truth.vertebrae;
    let first = gt.iter().position(|v| v.mask.same_pixels(&init.seeds[0].mask)).unwrap();
    for k in 1..3 {
        assert!(gt[first + k].mask.same_pixels(&init.seeds[k].mask));
    }
    assert!(init.seeds.iter().all(|s| s.origin == Origin::Seed));
}

/// Detector reporting only a chosen range of ground-truth vertebrae.
struct Subset(OracleSet, std::ops::Range<usize>);

impl Detector for Subset {
    fn detect(&self, _: &GrayImage) -> Result<Vec<DetectionCandidate>, BackendError> {
        Ok(self.0.ground_truth().vertebrae[self.1.clone()]
            .iter()
            .map(|v| DetectionCandidate {
                mask: v.mask.clone(),
                confidence: 1.0,
            })
            .collect())
    }
}

#[test]
fn walks_from_middle_seeds_reach_both_ends() {
    let p = generate(&PhantomSpec::lumbar()).unwrap();
    let oracle = Arc::new(OracleSet::new(p.ground_truth.clone(), OracleNoise::default()));
    let b = Backends {
        detector: Arc::new(Subset((*oracle).clone(), 2..5)),
        segmenter: oracle.clone(),
        classifier: oracle,
        predictor: Arc::new(LinearExtrapolator),
    };
    let cfg = PipelineConfig {
        region: Region::Lumbar,
        ..Default::default()
    };
    let init = initial_stage(&p.image, &b, &cfg).unwrap();
    let ctx = StepContext {
        image: &p.image,
        backends: &b,
        cfg: &cfg,
        axis: &init.axis,
        patch_size: init.patch_size,
    };
    let (down, down_term) = walk(Direction::Down, &init.seeds, &ctx).unwrap();
    assert_eq!(down.len(), 2);
    assert_eq!(down_term, Termination::SpineEnd);
    assert_eq!(down[1].class, PatchClass::SpineEnd(SpineEnd::S1));
    let (up, up_term) = walk(Direction::Up, &init.seeds, &ctx).unwrap();
    assert_eq!(up.len(), 2);
    assert!(matches!(
        up_term,
        Termination::Overlap | Termination::Background | Termination::NonProgressing | Termination::Bounds
    ));
    assert!(up.iter().all(|i| i.origin == Origin::InducedUp));
    let chain = run_image(&p.image, &b, &cfg).unwrap();
    assert_eq!(
        chain.instances.iter().map(|i| i.label.unwrap().level().unwrap()).collect::<Vec<_>>(),
        [
            VertebraLevel::T12,
            VertebraLevel::L1,
            VertebraLevel::L2,
            VertebraLevel::L3,
            VertebraLevel::L4,
            VertebraLevel::L5,
            VertebraLevel::S1
        ]
    );
}

#[test]
fn jittered_seeds_are_captured() {
    let p = generate(&PhantomSpec::default()).unwrap();
    let noise = OracleNoise {
        centroid_jitter: 0.25,
        seed: 9,
        ..Default::default()
    };
    let b = crate::phantom::make_oracles(&p, noise);
    let init = initial_stage(&p.image, &b, &PipelineConfig::default()).unwrap();
    for s in &init.seeds {
        assert!(p.ground_truth.vertebrae.iter().any(|v| v.mask.same_pixels(&s.mask)));
    }
}
