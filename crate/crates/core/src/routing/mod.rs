//! Route selection and arrival-time estimation under a chosen link-cost
//! metric, the affine bias correction, and the hybrid model.

pub mod dijkstra;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::geo::{mph_to_mps, LatLon};
use crate::ingest::VehicleClass;
use crate::network::{LinkId, RoadNetwork};
use crate::speeds::{Metric, RoadSpeedTable, SpeedModel, SpeedSource};

use dijkstra::{Seed, Target};

/// Requests must snap to a link within this distance.
pub const SNAP_RADIUS_M: f64 = 250.0;

/// Slope and intercept of the affine arrival-time correction.
pub const BIAS_SLOPE: f64 = 0.8029;
pub const BIAS_INTERCEPT_S: f64 = 23.3843;

/// Partial links shorter than this at a route end are treated as a node.
const END_EPSILON_M: f64 = 0.01;

/// Corrected duration `t / 0.8029 - 23.3843`, floored at zero.
pub fn bias_correct(t_beta_s: f64) -> f64 {
    (t_beta_s / BIAS_SLOPE - BIAS_INTERCEPT_S).max(0.0)
}

/// Metric II speed table selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpeedSet {
    Las,
    NelderMead,
    Custom(RoadSpeedTable),
}

impl SpeedSet {
    pub fn table(&self) -> RoadSpeedTable {
        match self {
            SpeedSet::Las => RoadSpeedTable::LAS,
            SpeedSet::NelderMead => RoadSpeedTable::NELDER_MEAD,
            SpeedSet::Custom(t) => *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteRequest {
    pub origin: LatLon,
    pub destination: LatLon,
    pub vehicle: VehicleClass,
    pub departure: DateTime<Utc>,
    pub metric: Metric,
    /// Metric II table override. By default Metric II uses the model's
    /// table and the hybrid model its calibrated selection table.
    pub speed_set: Option<SpeedSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkTime {
    pub link: LinkId,
    /// Share of the link's length that is travelled, in (0, 1].
    pub fraction: f64,
    pub seconds: f64,
    pub speed_mph: f64,
    pub source: SpeedSource,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutePrediction {
    pub links: Vec<LinkId>,
    pub distance_m: f64,
    /// Raw estimate: per-link times plus junction delays.
    pub t_beta_s: f64,
    /// Bias-corrected estimate for Metric V and the hybrid model; equal to
    /// `t_beta_s` otherwise.
    pub t_chi_s: f64,
    pub per_link: Vec<LinkTime>,
    pub metric: Metric,
    pub junctions: usize,
    pub junction_delay_s: f64,
}

impl RoutePrediction {
    /// Count of per-link speeds by answering lookup level.
    pub fn provenance_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for lt in &self.per_link {
            *out.entry(lt.source.tag()).or_default() += 1;
        }
        out
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("{which} is {distance_m:.1} m from the nearest link (limit {limit_m} m)")]
    Snap {
        which: &'static str,
        distance_m: f64,
        limit_m: f64,
    },
    #[error("network has no links")]
    EmptyNetwork,
    #[error("origin and destination snap to the same point")]
    SameEndpoints,
    #[error("destination unreachable from origin")]
    NoRoute,
    #[error("invalid path: {0}")]
    InvalidPath(String),
}

/// A request endpoint placed on a link.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Anchor {
    link: LinkId,
    offset_m: f64,
}

fn snap(net: &RoadNetwork, p: LatLon, which: &'static str) -> Result<Vec<Anchor>, RoutingError> {
    let (link, distance_m) = net.nearest_link(p).ok_or(RoutingError::EmptyNetwork)?;
    if distance_m > SNAP_RADIUS_M {
        return Err(RoutingError::Snap {
            which,
            distance_m,
            limit_m: SNAP_RADIUS_M,
        });
    }
    let proj = net.project(link, p);
    let mut anchors = vec![Anchor {
        link,
        offset_m: proj.offset_m,
    }];
    // Both directions of a two-way road are open from a point on it.
    if let Some(twin) = net.link(link).twin {
        let len = net.link(twin).length_m;
        anchors.push(Anchor {
            link: twin,
            offset_m: (len - proj.offset_m).max(0.0),
        });
    }
    Ok(anchors)
}

/// Per-link speed lookup for one query with the time bin frozen at departure.
struct Costing<'a> {
    net: &'a RoadNetwork,
    model: &'a SpeedModel,
    metric: Metric,
    table: RoadSpeedTable,
    vehicle: VehicleClass,
    departure: DateTime<Utc>,
}

impl Costing<'_> {
    fn speed(&self, link: LinkId) -> (f64, SpeedSource) {
        self.model
            .link_speed_with_table(self.net, self.metric, link, self.vehicle, self.departure, &self.table)
    }

    fn seconds(&self, link: LinkId, fraction: f64) -> f64 {
        fraction * self.net.link(link).length_m / mph_to_mps(self.speed(link).0)
    }

    fn junction_delay(&self) -> f64 {
        if self.metric == Metric::II {
            self.table.junction_delay_s
        } else {
            0.0
        }
    }

    fn link_time(&self, link: LinkId, fraction: f64) -> LinkTime {
        let (speed_mph, source) = self.speed(link);
        LinkTime {
            link,
            fraction,
            seconds: fraction * self.net.link(link).length_m / mph_to_mps(speed_mph),
            speed_mph,
            source,
        }
    }
}

/// Travel plan before timing: links with the travelled fraction of each.
#[derive(Debug, Clone, PartialEq)]
struct Plan {
    links: Vec<(LinkId, f64)>,
}

fn plan_route(net: &RoadNetwork, costing: &Costing, origin: LatLon, destination: LatLon) -> Result<Plan, RoutingError> {
    let from = snap(net, origin, "origin")?;
    let to = snap(net, destination, "destination")?;
    let same_point = from.iter().any(|a| to.iter().any(|b| a.link == b.link && (a.offset_m - b.offset_m).abs() <= END_EPSILON_M));
    if same_point {
        return Err(RoutingError::SameEndpoints);
    }

    let mut seeds = Vec::new();
    for a in &from {
        let link = net.link(a.link);
        let remaining = link.length_m - a.offset_m;
        if remaining > END_EPSILON_M {
            seeds.push(Seed {
                node: link.to,
                cost: costing.seconds(a.link, remaining / link.length_m),
                via: Some(a.link),
            });
        } else {
            seeds.push(Seed { node: link.to, cost: 0.0, via: None });
        }
        if a.offset_m <= END_EPSILON_M {
            seeds.push(Seed { node: link.from, cost: 0.0, via: None });
        }
    }
    let mut targets = Vec::new();
    for b in &to {
        let link = net.link(b.link);
        if b.offset_m > END_EPSILON_M {
            targets.push(Target {
                node: link.from,
                extra: costing.seconds(b.link, b.offset_m / link.length_m),
                via: Some(b.link),
            });
        } else {
            targets.push(Target { node: link.from, extra: 0.0, via: None });
        }
        if link.length_m - b.offset_m <= END_EPSILON_M {
            targets.push(Target { node: link.to, extra: 0.0, via: None });
        }
    }

    let found = dijkstra::search(net, &seeds, &targets, |l| costing.seconds(l, 1.0), costing.junction_delay());

    // Travelling forward along a single link never passes a junction.
    let mut direct: Option<(f64, LinkId, f64)> = None;
    for a in &from {
        for b in &to {
            if a.link == b.link && b.offset_m > a.offset_m {
                let len = net.link(a.link).length_m;
                let fraction = (b.offset_m - a.offset_m) / len;
                let cost = costing.seconds(a.link, fraction);
                if direct.is_none_or(|d| cost < d.0 || (cost == d.0 && a.link < d.1)) {
                    direct = Some((cost, a.link, fraction));
                }
            }
        }
    }
    if let Some((cost, link, fraction)) = direct {
        if found.as_ref().is_none_or(|f| cost <= f.cost) {
            return Ok(Plan {
                links: vec![(link, fraction)],
            });
        }
    }

    let found = found.ok_or(RoutingError::NoRoute)?;
    let mut links: Vec<(LinkId, f64)> = found.links.iter().map(|&l| (l, 1.0)).collect();
    let seed = seeds[found.seed];
    let target = targets[found.target];
    if let Some(l) = seed.via {
        let a = from.iter().find(|a| a.link == l).expect("seed link is an anchor");
        let len = net.link(l).length_m;
        links[0].1 = (len - a.offset_m) / len;
    }
    if let Some(l) = target.via {
        let b = to.iter().find(|b| b.link == l).expect("target link is an anchor");
        let last = links.len() - 1;
        links[last].1 = b.offset_m / net.link(l).length_m;
    }
    Ok(Plan { links })
}

fn time_plan(plan: &Plan, costing: &Costing, metric: Metric, with_delay: bool) -> RoutePrediction {
    let per_link: Vec<LinkTime> = plan.links.iter().map(|&(l, f)| costing.link_time(l, f)).collect();
    let junctions = plan.links.len().saturating_sub(1);
    let delay = if with_delay { costing.junction_delay() } else { 0.0 };
    let mut t_beta_s = 0.0;
    for lt in &per_link {
        t_beta_s += lt.seconds;
    }
    t_beta_s += delay * junctions as f64;
    let distance_m = plan
        .links
        .iter()
        .map(|&(l, f)| f * costing.net.link(l).length_m)
        .sum();
    let t_chi_s = match metric {
        Metric::V | Metric::Hybrid => bias_correct(t_beta_s),
        _ => t_beta_s,
    };
    RoutePrediction {
        links: plan.links.iter().map(|p| p.0).collect(),
        distance_m,
        t_beta_s,
        t_chi_s,
        per_link,
        metric,
        junctions,
        junction_delay_s: delay,
    }
}

fn selection_table(model: &SpeedModel, request: &RouteRequest) -> RoadSpeedTable {
    match (request.speed_set, request.metric) {
        (Some(set), _) => set.table(),
        (None, Metric::Hybrid) => model.hybrid_selection,
        (None, _) => model.metric_ii,
    }
}

/// Minimum expected travel time route under the request's metric.
pub fn shortest_route(net: &RoadNetwork, model: &SpeedModel, request: &RouteRequest) -> Result<RoutePrediction, RoutingError> {
    if request.metric == Metric::Hybrid {
        return hybrid_route(net, model, request);
    }
    let costing = Costing {
        net,
        model,
        metric: request.metric,
        table: selection_table(model, request),
        vehicle: request.vehicle,
        departure: request.departure,
    };
    let plan = plan_route(net, &costing, request.origin, request.destination)?;
    Ok(time_plan(&plan, &costing, request.metric, true))
}

/// Route chosen by Metric II with the calibrated table, timed by Metric V
/// without junction delays, then bias-corrected.
pub fn hybrid_route(net: &RoadNetwork, model: &SpeedModel, request: &RouteRequest) -> Result<RoutePrediction, RoutingError> {
    let table = selection_table(
        model,
        &RouteRequest {
            metric: Metric::Hybrid,
            ..request.clone()
        },
    );
    let select = Costing {
        net,
        model,
        metric: Metric::II,
        table,
        vehicle: request.vehicle,
        departure: request.departure,
    };
    let plan = plan_route(net, &select, request.origin, request.destination)?;
    let timing = Costing {
        metric: Metric::V,
        ..select
    };
    Ok(time_plan(&plan, &timing, Metric::Hybrid, false))
}

/// Duration of a given link path under `metric`, without route search.
/// Junction delay applies under Metric II; the hybrid model times with
/// Metric V and returns the uncorrected sum.
pub fn estimate_on_fixed_path(
    net: &RoadNetwork,
    model: &SpeedModel,
    links: &[LinkId],
    vehicle: VehicleClass,
    departure: DateTime<Utc>,
    metric: Metric,
    speed_set: Option<SpeedSet>,
) -> Result<f64, RoutingError> {
    if let Some(bad) = links.iter().find(|l| net.get_link(**l).is_none()) {
        return Err(RoutingError::InvalidPath(format!("unknown link {bad}")));
    }
    if let Some(w) = links.windows(2).find(|w| net.link(w[0]).to != net.link(w[1]).from) {
        return Err(RoutingError::InvalidPath(format!("links {} and {} are not consecutive", w[0], w[1])));
    }
    let request = RouteRequest {
        origin: LatLon::new(0.0, 0.0),
        destination: LatLon::new(0.0, 0.0),
        vehicle,
        departure,
        metric,
        speed_set,
    };
    let costing = Costing {
        net,
        model,
        metric: if metric == Metric::Hybrid { Metric::V } else { metric },
        table: selection_table(model, &request),
        vehicle,
        departure,
    };
    let plan = Plan {
        links: links.iter().map(|&l| (l, 1.0)).collect(),
    };
    Ok(time_plan(&plan, &costing, metric, true).t_beta_s)
}

// ---------------------------------------------------------------------------
// Batch mode

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct BatchRequest {
    #[serde(alias = "journey_id")]
    pub request_id: String,
    pub from_lat: f64,
    pub from_lon: f64,
    pub to_lat: f64,
    pub to_lon: f64,
    pub vehicle: String,
    #[serde(default)]
    pub metric: Option<String>,
    pub departure: String,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("request row {row}: {message}")]
    Row { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub const BATCH_OUTPUT_HEADER: [&str; 8] = [
    "request_id",
    "status",
    "metric",
    "distance_m",
    "t_beta_s",
    "t_chi_s",
    "junctions",
    "links",
];

impl BatchRequest {
    fn to_request(&self, row: usize, default_metric: Metric) -> Result<RouteRequest, BatchError> {
        let err = |message: String| BatchError::Row { row, message };
        let departure = DateTime::parse_from_rfc3339(&self.departure)
            .map_err(|e| err(format!("departure: {e}")))?
            .with_timezone(&Utc);
        Ok(RouteRequest {
            origin: LatLon::new(self.from_lat, self.from_lon),
            destination: LatLon::new(self.to_lat, self.to_lon),
            vehicle: self.vehicle.parse().map_err(err)?,
            departure,
            metric: match &self.metric {
                Some(m) if !m.is_empty() => m.parse().map_err(err)?,
                _ => default_metric,
            },
            speed_set: None,
        })
    }
}

/// Routes every request row and writes one output row per input row, in
/// input order. Per-request routing failures are reported in `status`.
/// Rows without a `metric` column use `default_metric`.
pub fn run_batch<R: Read, W: Write>(
    net: &RoadNetwork,
    model: &SpeedModel,
    input: R,
    output: W,
    default_metric: Metric,
    speed_set: Option<SpeedSet>,
) -> Result<usize, BatchError> {
    use rayon::prelude::*;
    let mut reader = csv::Reader::from_reader(input);
    let mut requests = Vec::new();
    for (i, row) in reader.deserialize::<BatchRequest>().enumerate() {
        let row = row?;
        let mut req = row.to_request(i + 1, default_metric)?;
        req.speed_set = speed_set;
        requests.push((row.request_id, req));
    }
    let results: Vec<_> = requests
        .par_iter()
        .map(|(_, req)| shortest_route(net, model, req))
        .collect();
    let mut w = csv::Writer::from_writer(output);
    w.write_record(BATCH_OUTPUT_HEADER)?;
    for ((id, req), res) in requests.iter().zip(&results) {
        match res {
            Ok(p) => w.write_record([
                id.clone(),
                "ok".into(),
                p.metric.to_string(),
                format!("{:.3}", p.distance_m),
                format!("{:.6}", p.t_beta_s),
                format!("{:.6}", p.t_chi_s),
                p.junctions.to_string(),
                crate::eval::format_links(&p.links),
            ])?,
            Err(e) => w.write_record([
                id.clone(),
                format!("error: {e}"),
                req.metric.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?,
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(requests.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalFrame;
    use crate::network::{NetworkBuilder, RoadType, WayFlags, WaySpec};
    use chrono::TimeZone;

    fn departure() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2016, 11, 3, 8, 15, 0).unwrap()
    }

    struct Fixture {
        net: RoadNetwork,
        frame: LocalFrame,
    }

    fn build(nodes: &[(&str, f64, f64)], ways: &[(&str, &str, &str, RoadType, Option<Vec<(f64, f64)>>)]) -> Fixture {
        let frame = LocalFrame::new(LatLon::new(51.5, -0.1));
        let mut b = NetworkBuilder::new();
        for (k, x, y) in nodes {
            b.add_node(*k, frame.unproject(*x, *y)).unwrap();
        }
        for (w, from, to, t, via) in ways {
            let geometry = via.as_ref().map(|pts| {
                let start = nodes.iter().find(|n| n.0 == *from).unwrap();
                let end = nodes.iter().find(|n| n.0 == *to).unwrap();
                let mut g = vec![frame.unproject(start.1, start.2)];
                g.extend(pts.iter().map(|(x, y)| frame.unproject(*x, *y)));
                g.push(frame.unproject(end.1, end.2));
                g
            });
            b.add_way(WaySpec {
                way_id: (*w).into(),
                from: (*from).into(),
                to: (*to).into(),
                road_type: *t,
                flags: WayFlags::default(),
                geometry,
                length_m: None,
            })
            .unwrap();
        }
        Fixture { net: b.build(), frame }
    }

    fn request(f: &Fixture, from: (f64, f64), to: (f64, f64), metric: Metric) -> RouteRequest {
        RouteRequest {
            origin: f.frame.unproject(from.0, from.1),
            destination: f.frame.unproject(to.0, to.1),
            vehicle: VehicleClass::AEU,
            departure: departure(),
            metric,
            speed_set: None,
        }
    }

    #[test]
    fn bias_values() {
        assert_eq!(bias_correct(0.0), 0.0);
        assert!((bias_correct(100.0) - 101.1642).abs() < 1e-4);
        assert!((bias_correct(600.0) - 723.906_769_871_715).abs() < 1e-9);
    }

    #[test]
    fn metric_i_prefers_shorter_detour() {
        // Direct a->c bows out to 1000 m; a->b->c totals about 800 m.
        let f = build(
            &[("a", 0.0, 0.0), ("b", 400.0, 0.0), ("c", 700.0, 0.0)],
            &[
                ("ab", "a", "b", RoadType::ARoad, None),
                ("bc", "b", "c", RoadType::ARoad, Some(vec![(550.0, 100.0)])),
                ("ac", "a", "c", RoadType::ARoad, Some(vec![(350.0, 357.0)])),
            ],
        );
        let direct = f.net.links().iter().find(|l| l.source_way == "ac").unwrap().length_m;
        assert!(direct > 950.0);
        let p = shortest_route(&f.net, &SpeedModel::default(), &request(&f, (0.0, 0.0), (700.0, 0.0), Metric::I)).unwrap();
        let ways: Vec<_> = p.links.iter().map(|l| f.net.link(*l).source_way.as_str()).collect();
        assert_eq!(ways, ["ab", "bc"]);
        assert_eq!(p.t_chi_s, p.t_beta_s);
    }

    #[test]
    fn metric_ii_two_b_roads() {
        // Two B-road links of 0.5 mile each.
        let half_mile = 804.672;
        let f = build(
            &[("a", 0.0, 0.0), ("b", half_mile, 0.0), ("c", 2.0 * half_mile, 0.0)],
            &[("ab", "a", "b", RoadType::BRoad, None), ("bc", "b", "c", RoadType::BRoad, None)],
        );
        for l in f.net.links() {
            assert!((l.length_m - half_mile).abs() < 1e-3 * half_mile);
        }
        let p = shortest_route(&f.net, &SpeedModel::default(), &request(&f, (0.0, 0.0), (2.0 * half_mile, 0.0), Metric::II)).unwrap();
        assert_eq!(p.junctions, 1);
        let expected: f64 = p.links.iter().map(|l| f.net.link(*l).length_m / mph_to_mps(24.0)).sum::<f64>() + 2.5;
        assert!((p.t_beta_s - expected).abs() < 1e-9);
        // With exact half-mile links this is 2 * (0.5 * 3600 / 24) + 2.5.
        assert!((p.t_beta_s - 152.5).abs() < 152.5 * 1e-3);
    }

    #[test]
    fn partial_links_at_ends() {
        let f = build(
            &[("a", 0.0, 0.0), ("b", 400.0, 0.0), ("c", 800.0, 0.0)],
            &[("ab", "a", "b", RoadType::ARoad, None), ("bc", "b", "c", RoadType::ARoad, None)],
        );
        let p = shortest_route(&f.net, &SpeedModel::default(), &request(&f, (100.0, 5.0), (500.0, -5.0), Metric::I)).unwrap();
        assert_eq!(p.links.len(), 2);
        assert!((p.per_link[0].fraction - 0.75).abs() < 1e-3);
        assert!((p.per_link[1].fraction - 0.25).abs() < 1e-3);
        assert!((p.distance_m - 400.0).abs() < 1.0);

        // Same link, going forward.
        let p = shortest_route(&f.net, &SpeedModel::default(), &request(&f, (100.0, 0.0), (300.0, 0.0), Metric::II)).unwrap();
        assert_eq!(p.links.len(), 1);
        assert_eq!(p.junctions, 0);
        assert!((p.per_link[0].fraction - 0.5).abs() < 1e-3);

        // Same road, backwards: uses the reverse direction.
        let p = shortest_route(&f.net, &SpeedModel::default(), &request(&f, (300.0, 0.0), (100.0, 0.0), Metric::I)).unwrap();
        assert_eq!(p.links.len(), 1);
        assert_eq!(f.net.link(p.links[0]).source_way, "ab");
        assert_ne!(f.net.link(p.links[0]).from, f.net.node_by_key("a").unwrap());
    }

    #[test]
    fn snap_failure_and_same_point() {
        let f = build(&[("a", 0.0, 0.0), ("b", 400.0, 0.0)], &[("ab", "a", "b", RoadType::ARoad, None)]);
        let err = shortest_route(&f.net, &SpeedModel::default(), &request(&f, (0.0, 400.0), (400.0, 0.0), Metric::I)).unwrap_err();
        assert!(matches!(err, RoutingError::Snap { which: "origin", .. }));
        let err = shortest_route(&f.net, &SpeedModel::default(), &request(&f, (200.0, 0.0), (200.0, 1.0), Metric::I)).unwrap_err();
        assert_eq!(err, RoutingError::SameEndpoints);
    }

    #[test]
    fn disconnected_is_no_route() {
        let f = build(
            &[("a", 0.0, 0.0), ("b", 400.0, 0.0), ("c", 0.0, 1000.0), ("d", 400.0, 1000.0)],
            &[("ab", "a", "b", RoadType::ARoad, None), ("cd", "c", "d", RoadType::ARoad, None)],
        );
        let err = shortest_route(&f.net, &SpeedModel::default(), &request(&f, (0.0, 0.0), (400.0, 1000.0), Metric::I)).unwrap_err();
        assert_eq!(err, RoutingError::NoRoute);
    }

    #[test]
    fn fixed_path_estimates() {
        let mile = 1609.344;
        let f = build(
            &[("a", 0.0, 0.0), ("b", mile, 0.0), ("c", mile, 500.0)],
            &[("ab", "a", "b", RoadType::ARoad, None), ("bc", "b", "c", RoadType::ARoad, None)],
        );
        let model = SpeedModel::default();
        let ab = f.net.links().iter().find(|l| l.source_way == "ab" && l.from == f.net.node_by_key("a").unwrap()).unwrap();
        let t = estimate_on_fixed_path(&f.net, &model, &[ab.id], VehicleClass::AEU, departure(), Metric::I, None).unwrap();
        assert!((t - ab.length_m / mph_to_mps(22.8)).abs() < 1e-9);
        assert!((t - 3600.0 / 22.8).abs() < 0.2);
        assert_eq!(estimate_on_fixed_path(&f.net, &model, &[], VehicleClass::AEU, departure(), Metric::II, None).unwrap(), 0.0);
        let bc_rev = f.net.links().iter().find(|l| l.source_way == "bc" && l.to == f.net.node_by_key("b").unwrap()).unwrap();
        let err = estimate_on_fixed_path(&f.net, &model, &[ab.id, bc_rev.id], VehicleClass::AEU, departure(), Metric::I, None);
        assert!(matches!(err, Err(RoutingError::InvalidPath(_))));

        for metric in [Metric::I, Metric::II, Metric::V] {
            let p = shortest_route(&f.net, &model, &request(&f, (0.0, 0.0), (mile, 500.0), metric)).unwrap();
            let t = estimate_on_fixed_path(&f.net, &model, &p.links, VehicleClass::AEU, departure(), metric, None).unwrap();
            assert_eq!(t, p.t_beta_s);
        }
    }

    #[test]
    fn t_beta_is_sum_of_parts() {
        let f = build(
            &[("a", 0.0, 0.0), ("b", 300.0, 0.0), ("c", 600.0, 0.0), ("d", 600.0, 300.0)],
            &[
                ("ab", "a", "b", RoadType::BRoad, None),
                ("bc", "b", "c", RoadType::LocalStreet, None),
                ("cd", "c", "d", RoadType::ARoad, None),
            ],
        );
        let p = shortest_route(&f.net, &SpeedModel::default(), &request(&f, (50.0, 0.0), (600.0, 250.0), Metric::II)).unwrap();
        let parts: f64 = p.per_link.iter().map(|l| l.seconds).sum::<f64>() + 2.5 * p.junctions as f64;
        assert!((p.t_beta_s - parts).abs() < 1e-6);
        assert!(f.net.is_connected_path(&p.links));
    }
}
