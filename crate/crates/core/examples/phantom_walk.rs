//! Generate a curved cervical phantom, segment it with noiseless oracle
//! backends and print the resulting labeled chain.
//!
//! cargo run --example phantom_walk

use spinefm::phantom::{generate, make_oracles, OracleNoise, PhantomSpec};
use spinefm::pipeline::{run_image, PipelineConfig};

fn main() -> anyhow::Result<()> {
    let spec = PhantomSpec {
        curvature_amplitude: 18.0,
        ..PhantomSpec::default()
    };
    let phantom = generate(&spec)?;
    let backends = make_oracles(&phantom, OracleNoise::default());
    let chain = run_image(&phantom.image, &backends, &PipelineConfig::default())?;

    println!("axis: {:?}", chain.axis.map(|a| a.direction));
    for inst in &chain.instances {
        println!(
            "{:>6}  {:?}  centroid ({:6.1}, {:6.1})  area {:4}  class {:?}",
            inst.label.map(|l| l.to_string()).unwrap_or_default(),
            inst.origin,
            inst.centroid.x,
            inst.centroid.y,
            inst.mask.area(),
            inst.class,
        );
    }
    println!(
        "walk stopped: up {:?}, down {:?}",
        chain.up_termination, chain.down_termination
    );
    Ok(())
}
