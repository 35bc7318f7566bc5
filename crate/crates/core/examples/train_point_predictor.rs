//! Train the centroid-predicting MLP on phantom spines and compare it with
//! linear extrapolation on unseen, more strongly curved spines.

use spinefm::backends::mlp::{samples_from_chain, train, MlpPredictor, TrainConfig};
use spinefm::backends::{LinearExtrapolator, PointPredictor};
use spinefm::geometry::{centroid, Point2};
use spinefm::phantom::{generate, PhantomSpec};

fn centroids(spec: &PhantomSpec) -> anyhow::Result<(Vec<Point2>, (usize, usize))> {
    let p = generate(spec)?;
    let cs = p
        .ground_truth
        .vertebrae
        .iter()
        .map(|v| centroid(&v.mask))
        .collect::<Result<_, _>>()?;
    Ok((cs, (p.image.width, p.image.height)))
}

fn mean_error(pp: &dyn PointPredictor, chains: &[(Vec<Point2>, (usize, usize))]) -> f64 {
    let mut errs = Vec::new();
    for (cs, dims) in chains {
        for w in cs.windows(4) {
            let pred = pp.predict_next([w[0], w[1], w[2]], *dims).expect("predictor");
            errs.push(pred.distance(w[3]));
        }
    }
    errs.iter().sum::<f64>() / errs.len() as f64
}

fn main() -> anyhow::Result<()> {
    let base = PhantomSpec {
        curvature_amplitude: 25.0,
        curvature_wavelength: 250.0,
        ..PhantomSpec::default()
    };
    let mut samples = Vec::new();
    for seed in 0..40 {
        let (cs, dims) = centroids(&base.sample_variant(seed))?;
        samples.extend(samples_from_chain(&cs, dims));
    }
    let trained = train(&samples, &TrainConfig::default())?;
    println!(
        "{} samples, mse {:.3e} -> {:.3e}",
        samples.len(),
        trained.initial_mse,
        trained.final_mse()
    );

    let test: Vec<_> = (1000..1010)
        .map(|s| centroids(&base.sample_variant(s)))
        .collect::<Result<_, _>>()?;
    let mlp = MlpPredictor::new(trained.weights);
    println!("mean error on held-out spines:");
    println!("  linear {:.2} px", mean_error(&LinearExtrapolator, &test));
    println!("  mlp    {:.2} px", mean_error(&mlp, &test));
    Ok(())
}
