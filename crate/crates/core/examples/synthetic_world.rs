//! Generates a synthetic city with planted speeds, simulated journeys and
//! their telemetry, and writes it to a directory.
//!
//! cargo run --release --example synthetic_world [out-dir]

use anyhow::Result;
use bluelight::synth::{generate_world, write_world, SynthConfig, WORLD_FILES};

fn main() -> Result<()> {
    let config = SynthConfig {
        rows: 12,
        cols: 12,
        journeys: 120,
        ..Default::default()
    };
    let world = generate_world(&config)?;
    let dir = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("bluelight-world"),
    };
    write_world(&world, &dir)?;
    let durations: Vec<f64> = world.truth.journeys.iter().map(|j| j.duration_s).collect();
    let mean = durations.iter().sum::<f64>() / durations.len() as f64;
    println!(
        "{}x{} grid, {} links; {} journeys (mean {:.0} s), {} fixes every {} s with {} m noise",
        config.rows,
        config.cols,
        world.network.link_count(),
        world.truth.journeys.len(),
        mean,
        world.records.len(),
        config.interval_s,
        config.noise_m
    );
    let j = &world.truth.journeys[0];
    println!("first journey {}: {} links, {:.0} s, departs {}", j.journey_id, j.links.len(), j.duration_s, j.departure);
    for f in WORLD_FILES {
        println!("wrote {}", dir.join(f).display());
    }
    Ok(())
}
