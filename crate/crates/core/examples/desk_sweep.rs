//! Trains the desk-scale configuration at several λ values and prints
//! clustering metrics. Usage: `desk_sweep [lambda ...]`.

use std::time::Instant;

use clusterddpm::data::{synth_mixture_images, SynthSpec};
use clusterddpm::evaluation::MetricReport;
use clusterddpm::trainer::{train, NullSink, TrainConfig};

fn main() -> clusterddpm::Result<()> {
    env_logger::init();
    let lambdas: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("lambda")).collect();
    let lambdas = if lambdas.is_empty() { vec![0.0001, 0.001, 0.01, 0.1, 0.5] } else { lambdas };
    let (images, labels) = synth_mixture_images(&SynthSpec::default())?.split();
    let labels = labels.expect("synthetic data is labeled");
    for lambda in lambdas {
        let config = TrainConfig { lambda, ..TrainConfig::desk() };
        let start = Instant::now();
        let out = train(&images, &config, &mut NullSink)?;
        let report = MetricReport::new(&out.assignments, labels.as_slice())?;
        println!(
            "lambda {lambda}: acc {:.4} nmi {:.4} sizes {:?} ({:.0} s)",
            report.acc,
            report.nmi,
            report.cluster_sizes,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
