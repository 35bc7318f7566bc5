//! Logit binarization and Gaussian smoothing of masks.

use super::PipelineConfig;
use crate::backends::LogitMask;
use crate::geometry::BinaryMask;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Foreground where `sigmoid(logit) >= threshold`, on the logit grid.
pub fn binarize(logits: &LogitMask, threshold: f64) -> BinaryMask {
    let bits = logits
        .values
        .iter()
        .map(|&v| sigmoid(f64::from(v)) >= threshold)
        .collect();
    BinaryMask::from_bits(logits.width, logits.height, logits.offset, bits)
        .expect("logit mask shape")
}

/// Normalized 1-D Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolves the `{0, 1}` field with an isotropic Gaussian and re-thresholds.
///
/// Borders replicate the edge pixels, so a constant field is unchanged.
/// `sigma == 0` returns the mask as is.
pub fn smooth_mask(mask: &BinaryMask, sigma: f64, threshold: f64) -> BinaryMask {
    if sigma <= 0.0 || mask.width() == 0 || mask.height() == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width(), mask.height());
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let field: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sx = clamp(x as i64 + i as i64 - r, w);
                acc += kv * field[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut bits = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sy = clamp(y as i64 + i as i64 - r, h);
                acc += kv * tmp[sy * w + x];
            }
            bits[y * w + x] = acc >= threshold;
        }
    }
    BinaryMask::from_bits(w, h, mask.offset(), bits).expect("same shape")
}

/// Sigmoid threshold, then Gaussian smoothing and re-threshold.
pub fn binarize_and_smooth(logits: &LogitMask, cfg: &PipelineConfig) -> BinaryMask {
    smooth_mask(
        &binarize(logits, cfg.sigmoid_threshold),
        cfg.smoothing_sigma,
        cfg.resmooth_threshold,
    )
}
