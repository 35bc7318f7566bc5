//! Matching predictions to ground truth and the per-level identification and Dice metrics.
//!
//! For each vertebra level:
//!
//! - `pct_identified`: matched ground-truth instances over all annotated ones, in percent;
//! - `located_dsc`: mean Dice over the matched instances;
//! - `overall_dsc`: Dice summed over matched instances divided by all annotated
//!   ones, so every missed vertebra counts as zero.
//!
//! `overall_dsc = located_dsc × pct_identified / 100` holds for every row.

use std::collections::BTreeMap;

use crate::anatomy::VertebraLevel;
use crate::dataio::GroundTruth;
use crate::geometry::{dice, BinaryMask, GrayImage};
use crate::pipeline::SpineChain;

pub const DEFAULT_MIN_DICE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub label: VertebraLevel,
    pub prediction: usize,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_gt: Vec<VertebraLevel>,
    pub unmatched_pred: Vec<usize>,
}

/// Greedy one-to-one matching in descending Dice order.
///
/// Pairs with Dice below `min_dice` (or zero) are never formed. Ties are
/// broken by ground-truth order, then prediction index.
pub fn match_masks(predictions: &[&BinaryMask], gt: &GroundTruth, min_dice: f64) -> MatchResult {
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    for (g, v) in gt.vertebrae.iter().enumerate() {
        for (p, m) in predictions.iter().enumerate() {
            if let Ok(d) = dice(&v.mask, m) {
                if d > 0.0 && d >= min_dice {
                    scored.push((d, g, p));
                }
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.vertebrae.len()];
    let mut pred_used = vec![false; predictions.len()];
    let mut pairs = Vec::new();
    for (d, g, p) in scored {
        if gt_used[g] || pred_used[p] {
            continue;
        }
        gt_used[g] = true;
        pred_used[p] = true;
        pairs.push(MatchPair {
            label: gt.vertebrae[g].label,
            prediction: p,
            dice: d,
        });
    }
    MatchResult {
        pairs,
        unmatched_gt: gt
            .vertebrae
            .iter()
            .zip(&gt_used)
            .filter(|(_, &u)| !u)
            .map(|(v, _)| v.label)
            .collect(),
        unmatched_pred: (0..predictions.len()).filter(|&p| !pred_used[p]).collect(),
    }
}

pub fn match_predictions(chain: &SpineChain, gt: &GroundTruth, min_dice: f64) -> MatchResult {
    let masks: Vec<&BinaryMask> = chain.instances.iter().map(|i| &i.mask).collect();
    match_masks(&masks, gt, min_dice)
}

/// One metrics row; `level` is a level name or `all` for the pooled summary.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelRow {
    pub level: String,
    pub count: usize,
    pub matched: usize,
    pub pct_identified: f64,
    pub located_dsc: f64,
    pub overall_dsc: f64,
    /// False when nothing was matched and `located_dsc` is a placeholder 0.
    pub located_defined: bool,
}

impl LevelRow {
    fn from_sums(level: String, count: usize, matched: usize, dice_sum: f64) -> Self {
        let located_defined = matched > 0;
        Self {
            level,
            count,
            matched,
            pct_identified: if count > 0 { matched as f64 / count as f64 * 100.0 } else { 0.0 },
            located_dsc: if located_defined { dice_sum / matched as f64 } else { 0.0 },
            overall_dsc: if count > 0 { dice_sum / count as f64 } else { 0.0 },
            located_defined,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LevelSums {
    count: usize,
    matched: usize,
    dice_sum: f64,
}

/// Accumulates match results over a dataset, per level.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    levels: BTreeMap<VertebraLevel, LevelSums>,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, gt: &GroundTruth, result: &MatchResult) {
        for v in &gt.vertebrae {
            self.levels.entry(v.label).or_default().count += 1;
        }
        for pair in &result.pairs {
            let s = self.levels.entry(pair.label).or_default();
            s.matched += 1;
            s.dice_sum += pair.dice;
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for (level, s) in &other.levels {
            let e = self.levels.entry(*level).or_default();
            e.count += s.count;
            e.matched += s.matched;
            e.dice_sum += s.dice_sum;
        }
    }

    /// One row per level with at least one annotated instance, in anatomical order.
    pub fn rows(&self) -> Vec<LevelRow> {
        self.levels
            .iter()
            .filter(|(_, s)| s.count > 0)
            .map(|(l, s)| LevelRow::from_sums(l.to_string(), s.count, s.matched, s.dice_sum))
            .collect()
    }
}

/// Per-level rows for a list of `(ground truth, match result)` pairs.
pub fn per_level_metrics<'a, I>(matches: I) -> Vec<LevelRow>
where
    I: IntoIterator<Item = (&'a GroundTruth, &'a MatchResult)>,
{
    let mut acc = MetricsAccumulator::new();
    for (gt, m) in matches {
        acc.add(gt, m);
    }
    acc.rows()
}

/// Count-weighted summary row, equal to pooling every instance of every level.
///
/// Returns `None` for an empty row list.
pub fn weighted_average(rows: &[LevelRow]) -> Option<LevelRow> {
    if rows.is_empty() {
        return None;
    }
    let count: usize = rows.iter().map(|r| r.count).sum();
    let matched: usize = rows.iter().map(|r| r.matched).sum();
    if count == 0 {
        return Some(LevelRow::from_sums("all".into(), 0, 0, 0.0));
    }
    let weighted = |f: fn(&LevelRow) -> f64| {
        rows.iter().map(|r| f(r) * r.count as f64).sum::<f64>() / count as f64
    };
    let pct_identified = weighted(|r| r.pct_identified);
    let overall_dsc = weighted(|r| r.overall_dsc);
    let located_defined = matched > 0;
    Some(LevelRow {
        level: "all".into(),
        count,
        matched,
        pct_identified,
        located_dsc: if located_defined && pct_identified > 0.0 {
            overall_dsc / (pct_identified / 100.0)
        } else {
            0.0
        },
        overall_dsc,
        located_defined,
    })
}

/// Ground truth filled at gray 96 with prediction boundaries drawn at 255.
pub fn overlay(gt: &GroundTruth, predictions: &[&BinaryMask]) -> GrayImage {
    let mut img = GrayImage::new(gt.width, gt.height);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < gt.width && (y as usize) < gt.height;
    for v in &gt.vertebrae {
        for (x, y) in v.mask.pixels() {
            if inside(x, y) {
                img.set(x as usize, y as usize, 96);
            }
        }
    }
    for m in predictions {
        for (x, y) in m.pixels() {
            let edge = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(dx, dy)| !m.contains(x + dx, y + dy));
            if edge && inside(x, y) {
                img.set(x as usize, y as usize, 255);
            }
        }
    }
    img
}
