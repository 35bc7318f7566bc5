//! Drive the pipeline through the line-delimited JSON protocol.
//!
//! The example re-launches itself as the backend server: the child serves
//! oracle answers for one phantom on stdin/stdout, the parent talks to it
//! through `ExternalBackend` exactly as it would to a model server.

use std::sync::Arc;

use spinefm::backends::{Backends, LinearExtrapolator};
use spinefm::dataio::{load_annotations, rasterize_gt};
use spinefm::extproto::{serve, AdapterConfig, ExternalBackend};
use spinefm::phantom::{generate, OracleNoise, OracleSet, PhantomSpec};
use spinefm::pipeline::{run_image, PipelineConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if let [_, flag, ann] = args.as_slice() {
        if flag == "--serve" {
            let gt = rasterize_gt(&load_annotations(ann.as_ref())?).gt;
            let oracle = OracleSet::new(gt, OracleNoise::default());
            serve(std::io::stdin().lock(), std::io::stdout().lock(), &oracle)?;
            return Ok(());
        }
    }

    let dir = std::env::temp_dir().join(format!("spinefm-external-{}", std::process::id()));
    let phantom = generate(&PhantomSpec {
        curvature_amplitude: 12.0,
        ..PhantomSpec::default()
    })?;
    phantom.export(&dir, "demo")?;
    let me = std::env::current_exe()?;
    let command = format!("{} --serve {}", me.display(), dir.join("demo.ann").display());

    let server = ExternalBackend::spawn(&command, AdapterConfig::default())?;
    let backends = Backends::from_shared(Arc::new(server), Arc::new(LinearExtrapolator));
    let chain = run_image(&phantom.image, &backends, &PipelineConfig::default())?;
    let labels: Vec<String> = chain
        .instances
        .iter()
        .filter_map(|i| i.label.map(|l| l.to_string()))
        .collect();
    println!("labels via protocol: {}", labels.join(" "));
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
