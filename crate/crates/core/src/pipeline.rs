//! Glue between the stages: telemetry to traces, traces to matched routes,
//! and both to a trained speed model.

use chrono_tz::Tz;
use rayon::prelude::*;
use serde::Serialize;

use crate::ingest::{aggregate_traces, filter_all, AvlsRecord, Trace};
use crate::matching::{extract_speeds, match_all, LinkSpeedObservation, MatchError, MatchParams, MatchedRoute};
use crate::network::RoadNetwork;
use crate::speeds::{train_metric_iii_iv, train_metric_v, ModelProvenance, SnappedObservation, SpeedModel, TrainOptions};

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestStats {
    pub records: usize,
    pub stale_removed: usize,
    pub duplicates: usize,
    pub traces: usize,
    pub discarded_traces: usize,
}

/// Filters stale fixes and groups the rest into journeys.
pub fn ingest_records(records: &[AvlsRecord]) -> (Vec<AvlsRecord>, Vec<Trace>, IngestStats) {
    let (filtered, stale_removed) = filter_all(records);
    let agg = aggregate_traces(&filtered);
    let stats = IngestStats {
        records: records.len(),
        stale_removed,
        duplicates: agg.duplicates,
        traces: agg.traces.len(),
        discarded_traces: agg.discarded,
    };
    (filtered, agg.traces, stats)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchStats {
    pub matched: usize,
    /// Rejections by reason.
    pub rejected: std::collections::BTreeMap<&'static str, usize>,
    pub dropped_fixes: usize,
}

/// Matches every trace; rejected traces are counted by reason.
pub fn match_traces(net: &RoadNetwork, traces: &[Trace], params: &MatchParams) -> (Vec<MatchedRoute>, Vec<(String, MatchError)>, MatchStats) {
    let mut routes = Vec::new();
    let mut rejects = Vec::new();
    let mut stats = MatchStats::default();
    for (t, r) in traces.iter().zip(match_all(net, traces, params)) {
        match r {
            Ok(route) => {
                stats.dropped_fixes += route.dropped_fixes;
                routes.push(route);
            }
            Err(e) => {
                *stats.rejected.entry(e.reason()).or_default() += 1;
                rejects.push((t.journey_id.clone(), e));
            }
        }
    }
    stats.matched = routes.len();
    (routes, rejects, stats)
}

/// Raw fixes snapped to their nearest link.
pub fn snap_records(net: &RoadNetwork, records: &[AvlsRecord]) -> Vec<SnappedObservation> {
    records
        .par_iter()
        .filter_map(|r| {
            let (link, _) = net.nearest_link(r.position)?;
            Some(SnappedObservation {
                link,
                position: r.position,
                vehicle: r.vehicle,
                timestamp: r.timestamp,
                speed_mph: r.speed_mph as f64,
            })
        })
        .collect()
}

/// Speed observations of every fully traversed link; returns the number
/// skipped by the timing floor too.
pub fn route_observations(net: &RoadNetwork, routes: &[MatchedRoute]) -> (Vec<LinkSpeedObservation>, usize) {
    let mut obs = Vec::new();
    let mut skipped = 0;
    for r in routes {
        let ex = extract_speeds(r, net);
        skipped += ex.skipped;
        obs.extend(ex.observations);
    }
    (obs, skipped)
}

/// Trains Metrics III and IV from snapped fixes and Metric V from matched
/// routes. The road-type tables keep their defaults.
pub fn train_model(net: &RoadNetwork, records: &[AvlsRecord], routes: &[MatchedRoute], timezone: Tz) -> SpeedModel {
    let snapped = snap_records(net, records);
    let options = TrainOptions {
        timezone,
        ..TrainOptions::default()
    };
    let layers = train_metric_iii_iv(net, &snapped, &options);
    let (obs, _) = route_observations(net, routes);
    let metric_v = train_metric_v(&obs, timezone);
    SpeedModel {
        metric_iii: layers.metric_iii,
        metric_iv: layers.metric_iv,
        metric_v,
        timezone,
        provenance: ModelProvenance {
            train_start: records.iter().map(|r| r.timestamp).min(),
            train_end: records.iter().map(|r| r.timestamp).max(),
            snapped_observations: snapped.len() as u64,
            matched_observations: obs.len() as u64,
            zero_speed_excluded: layers.zero_speed_excluded,
        },
        ..SpeedModel::default()
    }
}
