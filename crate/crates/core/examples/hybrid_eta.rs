//! The hybrid estimator: choose the route with calibrated road-type speeds,
//! time it with learned per-link speeds, then correct the bias.
//!
//! cargo run --release --example hybrid_eta

use anyhow::Result;
use bluelight::geo::LatLon;
use bluelight::ingest::VehicleClass;
use bluelight::matching::MatchParams;
use bluelight::pipeline::{ingest_records, match_traces, train_model};
use bluelight::routing::{bias_correct, estimate_on_fixed_path, hybrid_route, RouteRequest, SpeedSet};
use bluelight::speeds::{Metric, RoadSpeedTable};
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

    let mut req = RouteRequest {
        origin: LatLon::new(51.5010, -0.1370),
        destination: LatLon::new(51.5130, -0.1190),
        vehicle: VehicleClass::FRU,
        departure: Utc.with_ymd_and_hms(2016, 11, 9, 17, 0, 0).unwrap(),
        metric: Metric::Hybrid,
        speed_set: None,
    };
    for (name, set) in [
        ("Nelder-Mead selection", None),
        ("LAS selection", Some(SpeedSet::Las)),
        ("planted speeds", Some(SpeedSet::Custom(RoadSpeedTable { junction_delay_s: 0.0, ..config.speed_table() }))),
    ] {
        req.speed_set = set;
        let p = hybrid_route(&world.network, &model, &req)?;
        // The route's end links are partial; the fixed-path estimate counts them whole.
        let whole_links = estimate_on_fixed_path(&world.network, &model, &p.links, req.vehicle, req.departure, Metric::V, None)?;
        println!(
            "{name:<22} {} links, {:.0} m: t_beta {:.1} s, t_chi {:.1} s (= {:.1}); whole end links {:.1} s",
            p.links.len(),
            p.distance_m,
            p.t_beta_s,
            p.t_chi_s,
            bias_correct(p.t_beta_s),
            whole_links
        );
    }
    Ok(())
}
