//! Scores batch predictions against reference journeys: path coincidence,
//! and arrival-time errors bucketed by duration, distance, hour and region.
//!
//! cargo run --release --example evaluate_routes

use anyhow::Result;
use bluelight::eval::{aggregate, coincidence_histogram, error_table, path_coincidence, read_predictions, read_regions, Axis, ErrorKind, DEFAULT_CENTRE};
use bluelight::matching::MatchParams;
use bluelight::pipeline::{ingest_records, match_traces, train_model};
use bluelight::routing::run_batch;
use bluelight::speeds::Metric;
use bluelight::synth::{generate_world, SynthConfig};

fn main() -> Result<()> {
    let config = SynthConfig {
        journeys: 300,
        ..Default::default()
    };
    let world = generate_world(&config)?;
    let (filtered, traces, _) = ingest_records(&world.records);
    let (routes, _, _) = match_traces(&world.network, &traces, &MatchParams::default());
    let model = train_model(&world.network, &filtered, &routes, config.timezone);

    let references = world.references();
    let mut requests = Vec::new();
    bluelight::eval::write_references(&references, &mut requests)?;
    let mut output = Vec::new();
    run_batch(&world.network, &model, requests.as_slice(), &mut output, Metric::Hybrid, None)?;
    let (predictions, failed) = read_predictions(output.as_slice())?;
    println!("{} predictions, {} failed", predictions.len(), failed.len());

    let mut quartiles = Vec::new();
    for (p, r) in predictions.iter().zip(&references) {
        let c = path_coincidence(&world.network, &r.links, &p.links)?;
        quartiles.extend(c.quartiles.iter().flatten());
    }
    println!("per-quartile coincidence histogram (0-10% .. 90-100%): {:?}", coincidence_histogram(quartiles));

    let table = error_table(&predictions, &references, DEFAULT_CENTRE, config.timezone);
    let regions = read_regions(include_str!("data/regions.geojson"))?;
    for axis in [Axis::Duration, Axis::CentreDistance, Axis::HourOfDay, Axis::Region(regions)] {
        println!("\nby {}:", axis.name());
        for b in aggregate(&table.records, &axis, ErrorKind::Chi) {
            println!("  {:<12} n={:<4} mean {:>7.1} s  median {:>7.1} s", b.bucket, b.count, b.mean, b.quantiles[2]);
        }
    }
    Ok(())
}
