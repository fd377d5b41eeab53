//! Trains the per-link speed layers and compares Metric V with the speeds
//! planted in a synthetic world.
//!
//! cargo run --release --example train_speeds

use anyhow::Result;
use bluelight::matching::MatchParams;
use bluelight::pipeline::{ingest_records, match_traces, train_model};
use bluelight::speeds::{load_model, save_model, Metric};
use bluelight::synth::{generate_world, SynthConfig};

fn main() -> Result<()> {
    let config = SynthConfig {
        rows: 12,
        cols: 12,
        journeys: 200,
        ..Default::default()
    };
    let world = generate_world(&config)?;
    let (filtered, traces, _) = ingest_records(&world.records);
    let (routes, _, _) = match_traces(&world.network, &traces, &MatchParams::default());
    let model = train_model(&world.network, &filtered, &routes, config.timezone);
    for m in [Metric::III, Metric::IV, Metric::V] {
        let layer = model.layer(m).unwrap();
        let cells: usize = layer.values().map(|x| x.populated().count()).sum();
        println!("Metric {m}: {} links, {cells} populated cells", layer.len());
    }
    println!("\nlink      vehicle  hour-of-week  trained  planted  n");
    for (link, matrix) in model.metric_v.iter().take(8) {
        for (v, bin, cell) in matrix.populated().take(1) {
            let planted = config.true_speed(world.network.link(*link).road_type, v, bin);
            println!("{link:>6}    {v:<7}  {bin:>12}  {:>7.2}  {planted:>7.2}  {}", cell.speed_mph, cell.count);
        }
    }
    let mut bytes = Vec::new();
    save_model(&model, &mut bytes)?;
    assert_eq!(load_model(bytes.as_slice())?, model);
    println!("\nmodel file: {} bytes, provenance {:?}", bytes.len(), model.provenance);
    Ok(())
}
