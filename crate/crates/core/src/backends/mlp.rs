//! The shallow point predictor: 6 inputs (three centroids), 50 ReLU hidden
//! units, 2 outputs (the next centroid).
//!
//! Coordinates are normalized to `[0, 1]` by image width and height and fed
//! oldest-first in walk order, so one network serves both walk directions.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, PointPredictor};
use crate::geometry::Point2;

pub const INPUTS: usize = 6;
pub const HIDDEN: usize = 50;
pub const OUTPUTS: usize = 2;

const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("no training samples")]
    NoSamples,
    #[error("weight file shape mismatch: {0}")]
    Shape(String),
    #[error("weight file parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("weight file i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One training pair: three normalized centroids and the normalized next one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub input: [f64; INPUTS],
    pub target: [f64; OUTPUTS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    /// `HIDDEN × INPUTS`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `OUTPUTS × HIDDEN`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpWeights {
    pub fn zeros() -> Self {
        Self {
            w1: vec![0.0; HIDDEN * INPUTS],
            b1: vec![0.0; HIDDEN],
            w2: vec![0.0; OUTPUTS * HIDDEN],
            b2: vec![0.0; OUTPUTS],
        }
    }

    /// Uniform `[-0.1, 0.1]` initialization from a seeded generator.
    pub fn init_uniform(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros();
        for p in w.params_mut() {
            *p = rng.random_range(-INIT_RANGE..=INIT_RANGE);
        }
        w
    }

    pub const PARAM_COUNT: usize = HIDDEN * INPUTS + HIDDEN + OUTPUTS * HIDDEN + OUTPUTS;

    /// All parameters in the order `w1, b1, w2, b2`.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    fn hidden(&self, input: &[f64; INPUTS]) -> [f64; HIDDEN] {
        let mut h = [0.0; HIDDEN];
        for (j, hj) in h.iter_mut().enumerate() {
            let row = &self.w1[j * INPUTS..(j + 1) * INPUTS];
            let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + self.b1[j];
            *hj = z.max(0.0);
        }
        h
    }

    fn output(&self, h: &[f64; HIDDEN]) -> [f64; OUTPUTS] {
        let mut y = [0.0; OUTPUTS];
        for (k, yk) in y.iter_mut().enumerate() {
            let row = &self.w2[k * HIDDEN..(k + 1) * HIDDEN];
            *yk = row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + self.b2[k];
        }
        y
    }

    /// `W2 · relu(W1 · x + b1) + b2`.
    pub fn forward(&self, input: &[f64; INPUTS]) -> [f64; OUTPUTS] {
        self.output(&self.hidden(input))
    }

    /// Mean squared error over all samples and both outputs.
    pub fn mse(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = samples
            .iter()
            .map(|s| {
                let y = self.forward(&s.input);
                y.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum();
        sum / (samples.len() * OUTPUTS) as f64
    }

    /// Loss and its gradient w.r.t. every parameter, averaged over `samples`.
    pub fn loss_and_gradient(&self, samples: &[Sample]) -> (f64, MlpWeights) {
        let mut grad = MlpWeights::zeros();
        if samples.is_empty() {
            return (0.0, grad);
        }
        let scale = 1.0 / (samples.len() * OUTPUTS) as f64;
        let mut loss = 0.0;
        for s in samples {
            let h = self.hidden(&s.input);
            let y = self.output(&h);
            let mut dy = [0.0; OUTPUTS];
            for k in 0..OUTPUTS {
                let e = y[k] - s.target[k];
                loss += e * e;
                dy[k] = 2.0 * e * scale;
            }
            for k in 0..OUTPUTS {
                grad.b2[k] += dy[k];
                for j in 0..HIDDEN {
                    grad.w2[k * HIDDEN + j] += dy[k] * h[j];
                }
            }
            for j in 0..HIDDEN {
                if h[j] <= 0.0 {
                    continue;
                }
                let dz: f64 = (0..OUTPUTS).map(|k| dy[k] * self.w2[k * HIDDEN + j]).sum();
                grad.b1[j] += dz;
                for i in 0..INPUTS {
                    grad.w1[j * INPUTS + i] += dz * s.input[i];
                }
            }
        }
        (loss * scale, grad)
    }

    pub fn to_file_format(&self) -> WeightFile {
        WeightFile {
            arch: vec![INPUTS, HIDDEN, OUTPUTS],
            w1: self.w1.chunks(INPUTS).map(<[f64]>::to_vec).collect(),
            b1: self.b1.clone(),
            w2: self.w2.chunks(HIDDEN).map(<[f64]>::to_vec).collect(),
            b2: self.b2.clone(),
        }
    }

    pub fn from_file_format(f: WeightFile) -> Result<Self, MlpError> {
        if f.arch != [INPUTS, HIDDEN, OUTPUTS] {
            return Err(MlpError::Shape(format!("arch {:?}, expected [6, 50, 2]", f.arch)));
        }
        let check = |name: &str, rows: &[Vec<f64>], r: usize, c: usize| {
            if rows.len() != r || rows.iter().any(|row| row.len() != c) {
                return Err(MlpError::Shape(format!("{name} must be {r}x{c}")));
            }
            Ok(())
        };
        check("W1", &f.w1, HIDDEN, INPUTS)?;
        check("W2", &f.w2, OUTPUTS, HIDDEN)?;
        if f.b1.len() != HIDDEN || f.b2.len() != OUTPUTS {
            return Err(MlpError::Shape("bias length".into()));
        }
        let w = Self {
            w1: f.w1.concat(),
            b1: f.b1,
            w2: f.w2.concat(),
            b2: f.b2,
        };
        if w.params().any(|p| !p.is_finite()) {
            return Err(MlpError::Shape("non-finite weight".into()));
        }
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_format()).expect("weights serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, MlpError> {
        Self::from_file_format(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), MlpError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MlpError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk weight document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFile {
    pub arch: Vec<usize>,
    #[serde(rename = "W1")]
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    #[serde(rename = "W2")]
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Result of [`train`]: final weights and the full-dataset MSE after each epoch.
#[derive(Debug, Clone)]
pub struct Trained {
    pub weights: MlpWeights,
    pub initial_mse: f64,
    pub history: Vec<f64>,
}

impl Trained {
    pub fn final_mse(&self) -> f64 {
        self.history.last().copied().unwrap_or(self.initial_mse)
    }
}

/// Mini-batch gradient descent on the mean squared error. Deterministic in `cfg.seed`.
pub fn train(samples: &[Sample], cfg: &TrainConfig) -> Result<Trained, MlpError> {
    if samples.is_empty() {
        return Err(MlpError::NoSamples);
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(MlpError::InvalidHyperparameter(format!(
            "learning_rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if cfg.batch_size == 0 {
        return Err(MlpError::InvalidHyperparameter("batch_size must be positive".into()));
    }
    let mut weights = MlpWeights::init_uniform(cfg.seed);
    let initial_mse = weights.mse(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_eed0_f5a4_d1e5);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| samples[i]));
            let (_, grad) = weights.loss_and_gradient(&batch);
            for (w, g) in weights.params_mut().zip(grad.params()) {
                *w -= cfg.learning_rate * g;
            }
        }
        history.push(weights.mse(samples));
    }
    Ok(Trained {
        weights,
        initial_mse,
        history,
    })
}

fn normalize(p: Point2, dims: (usize, usize)) -> (f64, f64) {
    (p.x / dims.0 as f64, p.y / dims.1 as f64)
}

/// Encodes a walk-ordered triple as network input.
pub fn encode_input(walk: [Point2; 3], dims: (usize, usize)) -> [f64; INPUTS] {
    let mut input = [0.0; INPUTS];
    for (i, p) in walk.iter().enumerate() {
        let (x, y) = normalize(*p, dims);
        input[2 * i] = x;
        input[2 * i + 1] = y;
    }
    input
}

/// Every consecutive `(c1, c2, c3) → c4` window of a spine-ordered centroid
/// list, in both walk directions.
pub fn samples_from_chain(centroids: &[Point2], dims: (usize, usize)) -> Vec<Sample> {
    let mut out = Vec::new();
    let mut push = |w: &[Point2]| {
        let (tx, ty) = normalize(w[3], dims);
        out.push(Sample {
            input: encode_input([w[0], w[1], w[2]], dims),
            target: [tx, ty],
        });
    };
    for w in centroids.windows(4) {
        push(w);
    }
    let reversed: Vec<Point2> = centroids.iter().rev().copied().collect();
    for w in reversed.windows(4) {
        push(w);
    }
    out
}

/// Trained network wrapped as a [`PointPredictor`].
#[derive(Debug, Clone)]
pub struct MlpPredictor {
    pub weights: MlpWeights,
}

impl MlpPredictor {
    pub fn new(weights: MlpWeights) -> Self {
        Self { weights }
    }
}

impl PointPredictor for MlpPredictor {
    fn predict_next(&self, walk: [Point2; 3], dims: (usize, usize)) -> Result<Point2, BackendError> {
        if walk.iter().any(|p| !p.is_finite()) {
            return Err(BackendError::new("non-finite centroid"));
        }
        let y = self.weights.forward(&encode_input(walk, dims));
        Ok(Point2::new(y[0] * dims.0 as f64, y[1] * dims.1 as f64))
    }
}
