//! Seed selection on a hand-made detection list: low-confidence candidates
//! are dropped, the rest are ordered along their principal axis and the most
//! confident consecutive triple wins.

use spinefm::backends::DetectionCandidate;
use spinefm::geometry::BinaryMask;
use spinefm::pipeline::{select_seeds, PipelineConfig};

fn square(x: i64, y: i64) -> BinaryMask {
    BinaryMask::from_pixels((0..8).flat_map(|dx| (0..8).map(move |dy| (x + dx, y + dy))))
}

fn main() -> anyhow::Result<()> {
    let confidences = [0.5, 0.9, 0.8, 0.7, 0.95, 0.3];
    let candidates: Vec<DetectionCandidate> = confidences
        .iter()
        .enumerate()
        .map(|(i, &confidence)| DetectionCandidate {
            mask: square(50 + 2 * i as i64, 20 + 30 * i as i64),
            confidence,
        })
        .collect();
    let cfg = PipelineConfig::default();
    println!("confidence threshold {}", cfg.confidence_threshold);
    let seeds = select_seeds(&candidates, &cfg)?;
    println!("chosen candidates {:?}", seeds.indices);
    println!("confidences      {:?}", seeds.confidences);
    for p in seeds.points {
        println!("  centroid ({:.1}, {:.1})", p.x, p.y);
    }
    Ok(())
}
