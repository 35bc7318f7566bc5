//! Score the pipeline against phantom ground truth under detector noise and
//! print per-level identification rate and Dice.

use spinefm::cli::format_table;
use spinefm::eval::{match_predictions, weighted_average, MetricsAccumulator};
use spinefm::phantom::{generate, make_oracles, OracleNoise, PhantomSpec};
use spinefm::pipeline::{run_image, PipelineConfig};

fn main() -> anyhow::Result<()> {
    let base = PhantomSpec {
        curvature_amplitude: 20.0,
        ..PhantomSpec::lumbar()
    };
    let cfg = PipelineConfig {
        region: base.region,
        ..Default::default()
    };
    let mut acc = MetricsAccumulator::new();
    for seed in 0..20 {
        let p = generate(&base.sample_variant(seed))?;
        let noise = OracleNoise {
            dropout_prob: 0.3,
            false_positives: 2,
            centroid_jitter: 0.1,
            seed,
        };
        let chain = run_image(&p.image, &make_oracles(&p, noise), &cfg)?;
        acc.add(&p.ground_truth, &match_predictions(&chain, &p.ground_truth, 0.5));
    }
    let mut rows = acc.rows();
    rows.extend(weighted_average(&rows));
    print!("{}", format_table(&rows));
    Ok(())
}
