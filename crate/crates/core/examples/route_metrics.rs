//! Routes one request under every speed metric and shows where each link
//! speed came from.
//!
//! cargo run --release --example route_metrics

use anyhow::Result;
use bluelight::geo::LatLon;
use bluelight::ingest::VehicleClass;
use bluelight::matching::MatchParams;
use bluelight::pipeline::{ingest_records, match_traces, train_model};
use bluelight::routing::{shortest_route, RouteRequest};
use bluelight::speeds::Metric;
use bluelight::synth::{generate_world, SynthConfig};
use chrono::{TimeZone, Utc};

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

    let departure = Utc.with_ymd_and_hms(2016, 11, 8, 8, 30, 0).unwrap();
    println!("metric  links  distance_m  t_beta_s  t_chi_s  junctions  provenance");
    for metric in [Metric::I, Metric::II, Metric::III, Metric::IV, Metric::V, Metric::Hybrid] {
        let req = RouteRequest {
            origin: LatLon::new(51.4998, -0.1390),
            destination: LatLon::new(51.5140, -0.1170),
            vehicle: VehicleClass::AEU,
            departure,
            metric,
            speed_set: None,
        };
        let p = shortest_route(&world.network, &model, &req)?;
        println!(
            "{:<6}  {:>5}  {:>10.0}  {:>8.1}  {:>7.1}  {:>9}  {:?}",
            metric.name(),
            p.links.len(),
            p.distance_m,
            p.t_beta_s,
            p.t_chi_s,
            p.junctions,
            p.provenance_counts()
        );
    }
    Ok(())
}
