//! Reconstructs driven routes from noisy fixes with the HMM/Viterbi matcher
//! and compares them with the simulated truth.
//!
//! cargo run --release --example map_match

use anyhow::Result;
use bluelight::eval::path_coincidence;
use bluelight::matching::{extract_speeds, match_trace, MatchParams};
use bluelight::pipeline::ingest_records;
use bluelight::synth::{generate_world, SynthConfig};

fn main() -> Result<()> {
    let world = generate_world(&SynthConfig {
        rows: 10,
        cols: 10,
        journeys: 40,
        noise_m: 15.0,
        ..Default::default()
    })?;
    let (_, traces, _) = ingest_records(&world.records);
    let params = MatchParams::default();
    let mut total = 0.0;
    for (i, trace) in traces.iter().enumerate() {
        let route = match match_trace(&world.network, trace, &params) {
            Ok(r) => r,
            Err(e) => {
                println!("{}: rejected ({e})", trace.journey_id);
                continue;
            }
        };
        let truth = world.truth.get(&trace.journey_id).expect("simulated journey");
        let c = path_coincidence(&world.network, &truth.links, &route.links)?;
        total += c.whole;
        if i < 5 {
            let speeds = extract_speeds(&route, &world.network);
            println!(
                "{}: {} fixes -> {} links, log-likelihood {:.1}, coincidence {:.2}, {} interior link speeds",
                trace.journey_id,
                trace.fixes.len(),
                route.links.len(),
                route.score,
                c.whole,
                speeds.observations.len()
            );
        }
    }
    println!("mean coincidence over {} journeys: {:.3}", traces.len(), total / traces.len() as f64);
    Ok(())
}
