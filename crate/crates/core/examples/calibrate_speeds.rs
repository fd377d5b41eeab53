//! Recovers road-type speeds by Nelder-Mead, maximising how often the
//! chosen route coincides with the routes actually driven.
//!
//! cargo run --release --example calibrate_speeds

use anyhow::Result;
use bluelight::calibrate::{nelder_mead, CorpusEntry, NelderMeadOptions, SpeedVector};
use bluelight::speeds::RoadSpeedTable;
use bluelight::synth::{generate_world, SynthConfig};

fn main() -> Result<()> {
    let config = SynthConfig {
        rows: 12,
        cols: 12,
        journeys: 100,
        noise_m: 0.0,
        speeds_mph: [45.0, 40.0, 31.0, 22.0, 12.0, 10.0, 8.0, 6.0, 6.0],
        ..Default::default()
    };
    let world = generate_world(&config)?;
    let corpus: Vec<CorpusEntry> = world.references().iter().map(CorpusEntry::from).collect();
    let options = NelderMeadOptions {
        max_iterations: 150,
        ..Default::default()
    };
    let report = nelder_mead(&world.network, &corpus, &RoadSpeedTable::LAS, &options)?;
    println!(
        "mean path coincidence {:.4} -> {:.4}; {} iterations, {} evaluations, converged {}",
        report.initial_objective, report.final_objective, report.iterations, report.evaluations, report.converged
    );
    let planted = SpeedVector::from_table(&config.speed_table());
    println!("{:<22} {:>8} {:>8} {:>8}", "", "LAS", "fitted", "planted");
    for (i, label) in report.labels.iter().enumerate() {
        println!("{label:<22} {:>8.2} {:>8.2} {:>8.2}", report.initial.0[i], report.r#final.0[i], planted.0[i]);
    }
    Ok(())
}
