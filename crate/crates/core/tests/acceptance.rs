//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Runs without the libtest harness so the report lines are always printed.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinefm::anatomy::VertebraLevel;
use spinefm::backends::mlp::{train, MlpWeights, Sample, TrainConfig, HIDDEN, INPUTS};
use spinefm::backends::{
    BackendError, Backends, Classifier, DetectionCandidate, Detector, LinearExtrapolator, LogitMask,
    PatchClass, Segmenter,
};
use spinefm::cli::{cmd_phantom, cmd_run, PhantomArgs, RunArgs};
use spinefm::dataio::{GroundTruth, GtVertebra};
use spinefm::eval::{match_predictions, weighted_average, MatchPair, MatchResult, MetricsAccumulator};
use spinefm::geometry::{
    centroid, dice, iou, principal_axis, sort_by_projection, BinaryMask, GrayImage, Offset, Patch, Point2,
};
use spinefm::phantom::{generate, make_oracles, OracleNoise, PhantomSpec};
use spinefm::pipeline::{
    binarize, run_image, walk, Direction, PipelineConfig, StepContext, Termination, VertebraInstance,
    Origin, select_seeds, PipelineError,
};
use spinefm::anatomy::Region;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Alternates cervical and lumbar phantoms with curvature up to half a vertebra width.
fn phantom_spec(i: u64) -> PhantomSpec {
    let base = if i % 2 == 0 { PhantomSpec::default() } else { PhantomSpec::lumbar() };
    PhantomSpec {
        curvature_amplitude: 0.5 * base.vertebra_width,
        ..base
    }
    .sample_variant(1000 + i)
}

fn cfg_for(spec: &PhantomSpec) -> PipelineConfig {
    PipelineConfig {
        region: spec.region,
        ..Default::default()
    }
}

fn phantom_end_to_end() -> Outcome {
    let start = Instant::now();
    let (mut total, mut matched, mut exact) = (0, 0, 0);
    for i in 0..100 {
        let spec = phantom_spec(i);
        let p = generate(&spec).map_err(|e| e.to_string())?;
        let b = make_oracles(&p, OracleNoise::default());
        let chain = run_image(&p.image, &b, &cfg_for(&spec)).map_err(|e| e.to_string())?;
        let m = match_predictions(&chain, &p.ground_truth, 0.5);
        total += p.ground_truth.vertebrae.len();
        matched += m.pairs.len();
        exact += m.pairs.iter().filter(|pair| pair.dice == 1.0).count();
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        matched == total && exact == total && secs < 60.0,
        format!("{matched}/{total} identified, {exact} with Dice exactly 1.0, {secs:.2} s"),
    )
}

fn robust_end_to_end() -> Outcome {
    let (mut total, mut matched, mut dice_sum) = (0, 0, 0.0);
    for i in 0..100 {
        let spec = phantom_spec(i);
        let p = generate(&spec).map_err(|e| e.to_string())?;
        let noise = OracleNoise {
            dropout_prob: 0.3,
            centroid_jitter: 0.25,
            false_positives: 0,
            seed: 77 + i,
        };
        let b = make_oracles(&p, noise);
        let chain = run_image(&p.image, &b, &cfg_for(&spec)).map_err(|e| e.to_string())?;
        let m = match_predictions(&chain, &p.ground_truth, 0.5);
        total += p.ground_truth.vertebrae.len();
        matched += m.pairs.len();
        dice_sum += m.pairs.iter().map(|pair| pair.dice).sum::<f64>();
    }
    let pct = 100.0 * matched as f64 / total as f64;
    let mean = dice_sum / matched.max(1) as f64;
    check(
        pct >= 95.0 && mean >= 0.99,
        format!("{pct:.2}% identified, mean Dice of identified {mean:.5}"),
    )
}

fn square_at(c: Point2, side: i64) -> BinaryMask {
    let (cx, cy) = c.pixel();
    let h = side / 2;
    BinaryMask::from_pixels((cy - h..cy - h + side).flat_map(|y| (cx - h..cx - h + side).map(move |x| (x, y))))
}

fn logits_from(mask: &BinaryMask, patch: &Patch) -> LogitMask {
    let (w, h) = (patch.image.width, patch.image.height);
    let mut l = LogitMask::filled(w, h, patch.offset, -10.0);
    for y in 0..h {
        for x in 0..w {
            if mask.contains(x as i64 + patch.offset.x, y as i64 + patch.offset.y) {
                l.values[y * w + x] = 10.0;
            }
        }
    }
    l
}

/// Returns a fixed mask for every prompt and counts calls.
struct Stuck {
    mask: BinaryMask,
    calls: AtomicUsize,
}

impl Segmenter for Stuck {
    fn segment(&self, patch: &Patch, _: Point2) -> Result<LogitMask, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(logits_from(&self.mask, patch))
    }
}

/// Segments a small square wherever it is prompted.
struct Follow;

impl Segmenter for Follow {
    fn segment(&self, patch: &Patch, prompt: Point2) -> Result<LogitMask, BackendError> {
        Ok(logits_from(&square_at(patch.to_global(prompt), 8), patch))
    }
}

struct AlwaysRegular;

impl Classifier for AlwaysRegular {
    fn classify(&self, _: &Patch, _: Point2) -> Result<PatchClass, BackendError> {
        Ok(PatchClass::Regular)
    }
}

struct Fixed(Vec<DetectionCandidate>);

impl Detector for Fixed {
    fn detect(&self, _: &GrayImage) -> Result<Vec<DetectionCandidate>, BackendError> {
        Ok(self.0.clone())
    }
}

/// Random answers: the pipeline must still terminate within its step budget.
struct Chaos(u64);

impl Segmenter for Chaos {
    fn segment(&self, patch: &Patch, prompt: Point2) -> Result<LogitMask, BackendError> {
        let g = patch.to_global(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ (g.x.to_bits().rotate_left(7) ^ g.y.to_bits()));
        let off = Point2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let side = rng.random_range(0..12);
        Ok(logits_from(&square_at(g + off, side), patch))
    }
}

impl Classifier for Chaos {
    fn classify(&self, _: &Patch, c: Point2) -> Result<PatchClass, BackendError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ c.x.to_bits() ^ c.y.to_bits().rotate_left(13));
        Ok(match rng.random_range(0..10) {
            0 => PatchClass::Background,
            _ => PatchClass::Regular,
        })
    }
}

fn seeds_at(ys: [f64; 3]) -> [VertebraInstance; 3] {
    ys.map(|y| {
        let mask = square_at(Point2::new(50.0, y), 8);
        VertebraInstance {
            centroid: centroid(&mask).unwrap(),
            logits: LogitMask::filled(1, 1, Offset::ZERO, 0.0),
            mask,
            class: PatchClass::Regular,
            origin: Origin::Seed,
            label: None,
            confidence: 1.0,
        }
    })
}

fn termination() -> Outcome {
    let image = GrayImage::new(100, 1000);
    let cfg = PipelineConfig::default();
    let seeds = seeds_at([450.0, 465.0, 480.0]);
    let axis = principal_axis(&seeds.iter().map(|s| s.centroid).collect::<Vec<_>>()).unwrap();

    // segmenter stuck on the previous mask
    let stuck = Arc::new(Stuck {
        mask: seeds[2].mask.clone(),
        calls: AtomicUsize::new(0),
    });
    let b = Backends {
        detector: Arc::new(Fixed(Vec::new())),
        segmenter: stuck.clone(),
        classifier: Arc::new(AlwaysRegular),
        predictor: Arc::new(LinearExtrapolator),
    };
    let ctx = StepContext {
        image: &image,
        backends: &b,
        cfg: &cfg,
        axis: &axis,
        patch_size: 40,
    };
    let (added, term) = walk(Direction::Down, &seeds, &ctx).map_err(|e| e.to_string())?;
    let stuck_ok = added.is_empty() && term == Termination::Overlap && stuck.calls.load(Ordering::SeqCst) == 1;

    // always-regular classifier, segmenter following the drifting prediction
    let candidates: Vec<DetectionCandidate> = seeds
        .iter()
        .map(|s| DetectionCandidate {
            mask: s.mask.clone(),
            confidence: 0.9,
        })
        .collect();
    let b = Backends {
        detector: Arc::new(Fixed(candidates.clone())),
        segmenter: Arc::new(Follow),
        classifier: Arc::new(AlwaysRegular),
        predictor: Arc::new(LinearExtrapolator),
    };
    let chain = run_image(&image, &b, &cfg).map_err(|e| e.to_string())?;
    let cap = 3 + 2 * cfg.max_steps_per_direction;
    let drift_ok = chain.up_termination == Some(Termination::StepCap)
        && chain.down_termination == Some(Termination::StepCap)
        && chain.instances.len() == cap;

    // random backends under random step budgets
    let mut worst = 0;
    let mut bounded = true;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PipelineConfig {
            max_steps_per_direction: rng.random_range(1..20),
            ..Default::default()
        };
        let chaos = Arc::new(Chaos(seed));
        let b = Backends {
            detector: Arc::new(Fixed(candidates.clone())),
            segmenter: chaos.clone(),
            classifier: chaos,
            predictor: Arc::new(LinearExtrapolator),
        };
        let chain = run_image(&image, &b, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max(chain.instances.len());
        bounded &= chain.instances.len() <= 3 + 2 * cfg.max_steps_per_direction;
    }
    check(
        stuck_ok && drift_ok && bounded,
        format!(
            "stuck segmenter: {} added, {term:?} after {} call(s); drift: {} instances ({:?}/{:?}); 200 random runs bounded: {bounded} (max {worst})",
            added.len(),
            stuck.calls.load(Ordering::SeqCst),
            chain.instances.len(),
            chain.up_termination,
            chain.down_termination
        ),
    )
}

fn dummy_gt(levels: &[VertebraLevel]) -> GroundTruth {
    GroundTruth {
        width: 1,
        height: 1,
        region: Region::Lumbar,
        vertebrae: levels
            .iter()
            .map(|&label| GtVertebra {
                label,
                polygon: Vec::new(),
                mask: BinaryMask::new(0, 0, Offset::ZERO),
                class: PatchClass::Regular,
            })
            .collect(),
    }
}

fn metric_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut pooled_err: f64 = 0.0;
    for _ in 0..300 {
        let mut acc = MetricsAccumulator::new();
        let (mut count, mut matched, mut dice_sum) = (0usize, 0usize, 0.0f64);
        for _ in 0..rng.random_range(1..20) {
            let levels: Vec<VertebraLevel> = VertebraLevel::ALL
                .iter()
                .copied()
                .filter(|_| rng.random_bool(0.6))
                .collect();
            let gt = dummy_gt(&levels);
            let mut result = MatchResult::default();
            for (p, &label) in levels.iter().enumerate() {
                if rng.random_bool(0.7) {
                    let d = rng.random_range(0.5..=1.0);
                    result.pairs.push(MatchPair { label, prediction: p, dice: d });
                    matched += 1;
                    dice_sum += d;
                } else {
                    result.unmatched_gt.push(label);
                }
            }
            count += levels.len();
            acc.add(&gt, &result);
        }
        let rows = acc.rows();
        for r in &rows {
            worst = worst.max((r.overall_dsc - r.located_dsc * r.pct_identified / 100.0).abs());
        }
        if let Some(all) = weighted_average(&rows) {
            worst = worst.max((all.overall_dsc - all.located_dsc * all.pct_identified / 100.0).abs());
            let brute_overall = dice_sum / count as f64;
            let brute_pct = 100.0 * matched as f64 / count as f64;
            let brute_located = if matched > 0 { dice_sum / matched as f64 } else { 0.0 };
            pooled_err = pooled_err
                .max((all.overall_dsc - brute_overall).abs())
                .max((all.pct_identified - brute_pct).abs() / 100.0)
                .max((all.located_dsc - brute_located).abs());
        }
    }
    check(
        worst <= 1e-12 && pooled_err <= 1e-12,
        format!("max identity residual {worst:.1e}, max pooled-vs-brute-force error {pooled_err:.1e} over 300 datasets"),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    let density = rng.random_range(0.0..1.0);
    let bits = (0..w * h).map(|_| rng.random_bool(density)).collect();
    let off = Offset::new(rng.random_range(-3..4), rng.random_range(-3..4));
    BinaryMask::from_bits(w, h, off, bits).unwrap()
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut max_rel: f64 = 0.0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let a = random_mask(&mut rng, w, h);
        let (w2, h2) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let b = random_mask(&mut rng, w2, h2);
        // brute force over the union of both grids
        let (mut na, mut nb, mut inter) = (0usize, 0usize, 0usize);
        let (mut sx, mut sy) = (0.0f64, 0.0f64);
        for y in -10i64..50 {
            for x in -10i64..50 {
                let (ia, ib) = (a.contains(x, y), b.contains(x, y));
                na += ia as usize;
                nb += ib as usize;
                inter += (ia && ib) as usize;
                if ia {
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        let union = na + nb - inter;
        let brute_iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        if iou(&a, &b) != brute_iou {
            mismatches += 1;
        }
        match dice(&a, &b) {
            Ok(d) => {
                if d != 2.0 * inter as f64 / (na + nb) as f64 {
                    mismatches += 1;
                }
                max_rel = max_rel.max((d - 2.0 * brute_iou / (1.0 + brute_iou)).abs());
            }
            Err(_) if na + nb == 0 => {}
            Err(_) => mismatches += 1,
        }
        match centroid(&a) {
            Ok(c) if na > 0 => {
                if c != Point2::new(sx / na as f64, sy / na as f64) {
                    mismatches += 1;
                }
            }
            Err(_) if na == 0 => {}
            _ => mismatches += 1,
        }
    }
    check(
        mismatches == 0 && max_rel <= 1e-12,
        format!("{mismatches} mismatches vs brute force on 1000 pairs, max |dice - 2iou/(1+iou)| = {max_rel:.1e}"),
    )
}

fn linear_rule_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let c1 = [rng.random_range(0.25..0.75), rng.random_range(0.2..0.5)];
            let d = [rng.random_range(-0.03..0.03), rng.random_range(0.05..0.12)];
            let c2 = [c1[0] + d[0], c1[1] + d[1]];
            let e = [d[0] + rng.random_range(-0.01..0.01), d[1] + rng.random_range(-0.01..0.01)];
            let c3 = [c2[0] + e[0], c2[1] + e[1]];
            Sample {
                input: [c1[0], c1[1], c2[0], c2[1], c3[0], c3[1]],
                target: [2.0 * c3[0] - c2[0], 2.0 * c3[1] - c2[1]],
            }
        })
        .collect()
}

fn mlp_gradient_and_training() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    for draw in 0..20 {
        let mut w = MlpWeights::init_uniform(100 + draw);
        for p in w.params_mut() {
            *p *= 5.0;
        }
        // ReLU is not differentiable at 0: keep every hidden pre-activation
        // clear of the kink by more than any finite-difference step can move it
        let mut samples: Vec<Sample> = Vec::new();
        while samples.len() < 4 {
            let s = Sample {
                input: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                target: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            };
            let near_kink = (0..HIDDEN).any(|j| {
                let z = w.b1[j] + (0..INPUTS).map(|i| w.w1[j * INPUTS + i] * s.input[i]).sum::<f64>();
                z.abs() < 1e-4
            });
            if !near_kink {
                samples.push(s);
            }
        }
        let (_, grad) = w.loss_and_gradient(&samples);
        let analytic: Vec<f64> = grad.params().copied().collect();
        for (k, a) in analytic.iter().enumerate() {
            let orig = *w.params().nth(k).unwrap();
            *w.params_mut().nth(k).unwrap() = orig + h;
            let up = w.mse(&samples);
            *w.params_mut().nth(k).unwrap() = orig - h;
            let down = w.mse(&samples);
            *w.params_mut().nth(k).unwrap() = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    let train_set = linear_rule_samples(&mut rng, 400);
    let held_out = linear_rule_samples(&mut rng, 200);
    let cfg = TrainConfig {
        epochs: 500,
        ..TrainConfig::default()
    };
    let trained = train(&train_set, &cfg).map_err(|e| e.to_string())?;
    let mse = trained.weights.mse(&held_out);
    check(
        max_rel < 1e-4 && mse < 1e-3,
        format!(
            "max gradient relative error {max_rel:.2e} over 20 draws; held-out MSE {mse:.2e} after {} epochs (lr {}, batch {})",
            cfg.epochs, cfg.learning_rate, cfg.batch_size
        ),
    )
}

fn binarization_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ln9 = 9f64.ln();
    let mut values: Vec<f32> = (0..20_000).map(|_| rng.random_range(-10.0f32..=10.0)).collect();
    for v in [2.1972 - 1e-6, 2.1972, 2.1972 + 1e-6, ln9 - 1e-6, ln9 + 1e-6, -10.0, 10.0] {
        values.push(v as f32);
    }
    let mut x = (ln9 as f32).to_bits() - 20;
    for _ in 0..40 {
        values.push(f32::from_bits(x));
        x += 1;
    }
    let n = values.len();
    let logits = LogitMask {
        width: n,
        height: 1,
        offset: Offset::ZERO,
        values: values.clone(),
    };
    let mask = binarize(&logits, 0.9);
    let disagreements = values
        .iter()
        .enumerate()
        .filter(|(i, &v)| mask.contains(*i as i64, 0) != ((v as f64) >= ln9))
        .count();
    check(disagreements == 0, format!("{disagreements} disagreements over {n} logits"))
}

fn seed_selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = PipelineConfig::default();
    let mut mismatches = 0;
    for set in 0..200 {
        let quantized = set % 2 == 0;
        let n = rng.random_range(0..12);
        let units: Vec<u32> = (0..n).map(|_| rng.random_range(0..=20)).collect();
        let cands: Vec<DetectionCandidate> = units
            .iter()
            .map(|&u| {
                let conf = if quantized { u as f64 / 20.0 } else { rng.random_range(0.0..1.0) };
                let c = Point2::new(rng.random_range(20.0..180.0), rng.random_range(20.0..300.0));
                DetectionCandidate {
                    mask: square_at(c, rng.random_range(1..8)),
                    confidence: conf,
                }
            })
            .collect();
        let kept: Vec<usize> = (0..n).filter(|&i| cands[i].confidence >= cfg.confidence_threshold).collect();
        let got = select_seeds(&cands, &cfg);
        if kept.len() < 3 {
            if got != Err(PipelineError::InsufficientSeeds { found: kept.len() }) {
                mismatches += 1;
            }
            continue;
        }
        let pts: Vec<Point2> = kept.iter().map(|&i| centroid(&cands[i].mask).unwrap()).collect();
        let axis = principal_axis(&pts).unwrap();
        let order: Vec<usize> = sort_by_projection(&pts, &axis).into_iter().map(|j| kept[j]).collect();
        // every consecutive triple, exact comparison of means
        let mut best: Option<(usize, f64)> = None;
        for s in 0..order.len() - 2 {
            let t = &order[s..s + 3];
            let mean = if quantized {
                t.iter().map(|&i| units[i] as f64).sum::<f64>() / 60.0
            } else {
                t.iter().map(|&i| cands[i].confidence).sum::<f64>() / 3.0
            };
            if best.is_none_or(|(_, m)| mean > m) {
                best = Some((s, mean));
            }
        }
        let s = best.unwrap().0;
        let expect = [order[s], order[s + 1], order[s + 2]];
        match got {
            Ok(sel) if sel.indices == expect => {}
            _ => mismatches += 1,
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 200 candidate sets"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let images = tmp.path().join("images");
    cmd_phantom(&PhantomArgs {
        count: 8,
        spec: None,
        seed: 3,
        curvature: Some(20.0),
        out: images.clone(),
    })
    .map_err(|e| e.to_string())?;
    let out = tmp.path().join("out");
    let run = |jobs: usize| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let _ = std::fs::remove_dir_all(&out);
        cmd_run(&RunArgs {
            images: images.clone(),
            backend: "oracle".into(),
            pp: "linear".into(),
            config: None,
            out: out.clone(),
            jobs,
            seed: 11,
            dropout: 0.3,
            false_positives: 2,
            jitter: 0.25,
            region: None,
            confidence_threshold: None,
            iou_threshold: None,
            sigmoid_threshold: None,
            patch_scale: None,
            max_steps: None,
            flip_superior: false,
        })
        .map_err(|e| e.to_string())?;
        Ok(snapshot(&out))
    };
    let a = run(1)?;
    let b = run(1)?;
    let c = run(4)?;
    check(
        a == b && a == c && a.len() > 8,
        format!("{} files; rerun identical: {}; --jobs 4 identical: {}", a.len(), a == b, a == c),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("phantom end-to-end", phantom_end_to_end),
        ("robust end-to-end", robust_end_to_end),
        ("termination", termination),
        ("metric identity", metric_identity),
        ("geometry oracles", geometry_oracles),
        ("MLP gradient check and training", mlp_gradient_and_training),
        ("binarization equivalence", binarization_equivalence),
        ("seed selection oracle", seed_selection_oracle),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
