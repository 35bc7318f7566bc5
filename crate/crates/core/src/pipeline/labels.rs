//! Anatomical labeling from detected spine-end vertebrae.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{PipelineConfig, PipelineError, SpineChain};
use crate::anatomy::{Region, VertebraLevel};
use crate::geometry::Axis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Level(VertebraLevel),
    /// Beyond the superior end of the section sequence by `n` positions.
    Above(usize),
    /// Beyond the inferior end of the section sequence by `n` positions.
    Below(usize),
    /// Position counted from the most superior instance when no anchor exists.
    Relative(usize),
}

impl Label {
    pub fn is_out_of_range(self) -> bool {
        matches!(self, Label::Above(_) | Label::Below(_))
    }

    pub fn level(self) -> Option<VertebraLevel> {
        match self {
            Label::Level(l) => Some(l),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Level(l) => write!(f, "{l}"),
            Label::Above(n) => write!(f, "above{n}"),
            Label::Below(n) => write!(f, "below{n}"),
            Label::Relative(n) => write!(f, "V{n}"),
        }
    }
}

/// True when increasing projection on `axis` points to the inferior end.
pub fn ascending_is_inferior(axis: &Axis, flip_superior: bool) -> bool {
    let d = axis.direction;
    let larger_y = d.y > 0.0 || (d.y == 0.0 && d.x > 0.0);
    larger_y != flip_superior
}

/// Labels every instance of `chain` from its spine-end anchors.
///
/// With a C2 (cervical) or S1 (lumbar) instance present, labels run
/// consecutively outward from that anchor; positions past either end of the
/// section are [`Label::Above`]/[`Label::Below`]. Without an anchor labels are
/// [`Label::Relative`], counted from the superior end.
pub fn assign_labels(mut chain: SpineChain, cfg: &PipelineConfig) -> Result<SpineChain, PipelineError> {
    let n = chain.instances.len();
    let inferior_up = match &chain.axis {
        Some(axis) => ascending_is_inferior(axis, cfg.flip_superior),
        None => !cfg.flip_superior,
    };
    // position counted from the superior end
    let superior_pos = |i: usize| if inferior_up { i } else { n - 1 - i };

    let seq = cfg.region.sequence();
    let mut offset: Option<i64> = None;
    for (i, inst) in chain.instances.iter().enumerate() {
        let Some(kind) = inst.class.spine_end() else {
            continue;
        };
        let Some(seq_idx) = seq.iter().position(|&l| l == kind.level()) else {
            return Err(PipelineError::ConflictingAnchors(format!(
                "{:?} cannot anchor a {} chain",
                kind,
                region_name(cfg.region)
            )));
        };
        let implied = superior_pos(i) as i64 - seq_idx as i64;
        match offset {
            Some(o) if o != implied => {
                return Err(PipelineError::ConflictingAnchors(format!(
                    "anchors imply offsets {o} and {implied}"
                )));
            }
            _ => offset = Some(implied),
        }
    }
    chain.anchored = offset.is_some();
    for i in 0..n {
        let q = superior_pos(i) as i64;
        let label = match offset {
            None => Label::Relative(q as usize),
            Some(o) => {
                let idx = q - o;
                if idx < 0 {
                    Label::Above((-idx) as usize)
                } else if idx as usize >= seq.len() {
                    Label::Below(idx as usize - seq.len() + 1)
                } else {
                    Label::Level(seq[idx as usize])
                }
            }
        };
        chain.instances[i].label = Some(label);
    }
    Ok(chain)
}

fn region_name(r: Region) -> &'static str {
    match r {
        Region::Cervical => "cervical",
        Region::Lumbar => "lumbar",
    }
}
