//! HMM map-matching of telemetry traces onto the road network, and per-link
//! speed extraction from the reconstructed routes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine, mps_to_mph, LatLon};
use crate::ingest::{AvlsRecord, Trace, VehicleClass};
use crate::network::{LinkId, NodeId, RoadNetwork, RoadType};
use crate::routing::dijkstra::BoundedTree;

/// Traversals shorter than this are not turned into speed observations.
pub const MIN_TRAVERSAL_S: f64 = 0.2;

/// Matched paths shorter than this are treated as a stationary vehicle.
const DEGENERATE_M: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchParams {
    /// GPS noise standard deviation, metres.
    pub sigma_m: f64,
    /// Scale of the route/great-circle discrepancy, metres.
    pub beta_m: f64,
    pub candidate_radius_m: f64,
    pub max_candidates: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            sigma_m: 10.0,
            beta_m: 30.0,
            candidate_radius_m: 150.0,
            max_candidates: 8,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {v}"))
            }
        };
        positive("sigma_m", self.sigma_m)?;
        positive("beta_m", self.beta_m)?;
        positive("candidate_radius_m", self.candidate_radius_m)?;
        if self.max_candidates == 0 {
            return Err("max_candidates must be at least 1".into());
        }
        Ok(())
    }

    /// Emission log-probability of a candidate `distance_m` from its fix.
    pub fn emission(&self, distance_m: f64) -> f64 {
        let z = distance_m / self.sigma_m;
        -0.5 * z * z
    }

    /// Transition log-probability between consecutive candidates.
    pub fn transition(&self, route_m: f64, great_circle_m: f64) -> f64 {
        -(route_m - great_circle_m).abs() / self.beta_m
    }
}

/// Search limit for the path between two consecutive candidates.
pub fn transition_cutoff(great_circle_m: f64) -> f64 {
    great_circle_m * 8.0 + 500.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub link: LinkId,
    pub offset_m: f64,
    pub point: LatLon,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFix {
    pub record: AvlsRecord,
    /// Sorted by distance, then link id.
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixAssignment {
    pub timestamp: DateTime<Utc>,
    pub link: LinkId,
    pub offset_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkTiming {
    pub entry: DateTime<Utc>,
    pub exit: DateTime<Utc>,
    /// Share of the link covered; below 1 only at the route ends.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedRoute {
    pub journey_id: String,
    pub vehicle: VehicleClass,
    pub links: Vec<LinkId>,
    pub link_times: Vec<LinkTiming>,
    pub fix_assignments: Vec<FixAssignment>,
    /// Log-likelihood of the decoded candidate sequence.
    pub score: f64,
    pub dropped_fixes: usize,
}

impl MatchedRoute {
    pub fn start(&self) -> DateTime<Utc> {
        self.fix_assignments[0].timestamp
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.fix_assignments[self.fix_assignments.len() - 1].timestamp
    }
}

#[derive(Debug, Clone)]
pub struct LinkSpeedObservation {
    pub link: LinkId,
    pub vehicle: VehicleClass,
    pub entry: DateTime<Utc>,
    pub speed_mph: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("trace has {0} fixes; at least 2 needed")]
    TooShort(usize),
    #[error("no candidate within {radius_m} m of fix {fix}")]
    NoCandidate { fix: usize, radius_m: f64 },
    #[error("broken chain at fix {fix}")]
    BrokenChain { fix: usize },
    #[error("degenerate trace: all fixes project to one point")]
    Degenerate,
}

impl MatchError {
    pub fn reason(&self) -> &'static str {
        match self {
            MatchError::Params(_) => "invalid parameters",
            MatchError::TooShort(_) => "too few fixes",
            MatchError::NoCandidate { .. } => "no candidate",
            MatchError::BrokenChain { .. } => "broken chain",
            MatchError::Degenerate => "degenerate",
        }
    }
}

/// Candidate links of every fix.
pub fn candidate_fixes(net: &RoadNetwork, fixes: &[AvlsRecord], params: &MatchParams) -> Result<Vec<CandidateFix>, MatchError> {
    fixes
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let candidates: Vec<Candidate> = net
                .candidates(r.position, params.candidate_radius_m, params.max_candidates)
                .into_iter()
                .map(|p| Candidate {
                    link: p.link,
                    offset_m: p.offset_m,
                    point: p.point,
                    distance_m: p.distance_m,
                })
                .collect();
            if candidates.is_empty() {
                Err(MatchError::NoCandidate {
                    fix: i,
                    radius_m: params.candidate_radius_m,
                })
            } else {
                Ok(CandidateFix {
                    record: r.clone(),
                    candidates,
                })
            }
        })
        .collect()
}

/// A feasible move between two candidates: distance driven and the links
/// entered after leaving the first candidate's link.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub route_m: f64,
    pub entered: Vec<LinkId>,
}

/// Distance-weighted shortest-path trees from link end nodes, built lazily.
pub struct TransitionRouter<'a> {
    net: &'a RoadNetwork,
    trees: HashMap<(NodeId, u64), BoundedTree>,
}

impl<'a> TransitionRouter<'a> {
    pub fn new(net: &'a RoadNetwork) -> Self {
        Self {
            net,
            trees: HashMap::new(),
        }
    }

    /// Move from `a` to `b` given the great-circle distance between their
    /// fixes, or `None` if no path exists within the cutoff. Backward moves
    /// on one link are read as standing still.
    pub fn transition(&mut self, a: &Candidate, b: &Candidate, great_circle_m: f64) -> Option<Transition> {
        if a.link == b.link {
            return Some(Transition {
                route_m: (b.offset_m - a.offset_m).max(0.0),
                entered: Vec::new(),
            });
        }
        let net = self.net;
        let la = net.link(a.link);
        let lb = net.link(b.link);
        let cutoff = transition_cutoff(great_circle_m);
        let tail = la.length_m - a.offset_m;
        let budget = cutoff - tail - b.offset_m;
        if budget < 0.0 {
            return None;
        }
        let tree = self
            .trees
            .entry((la.to, cutoff.to_bits()))
            .or_insert_with(|| BoundedTree::new(net, la.to, cutoff, |l| net.link(l).length_m));
        let between = tree.distance(lb.from)?;
        if between > budget {
            return None;
        }
        let mut entered = tree.path_to(net, lb.from)?;
        entered.push(b.link);
        Some(Transition {
            route_m: tail + between + b.offset_m,
            entered,
        })
    }
}

/// Log-likelihood of one candidate sequence, `None` if infeasible.
pub fn sequence_score(net: &RoadNetwork, fixes: &[CandidateFix], choice: &[usize], params: &MatchParams) -> Option<f64> {
    let mut router = TransitionRouter::new(net);
    let mut score = params.emission(fixes[0].candidates[choice[0]].distance_m);
    for t in 1..fixes.len() {
        let a = &fixes[t - 1].candidates[choice[t - 1]];
        let b = &fixes[t].candidates[choice[t]];
        let gc = haversine(fixes[t - 1].record.position, fixes[t].record.position);
        let tr = router.transition(a, b, gc)?;
        score += params.transition(tr.route_m, gc);
        score += params.emission(b.distance_m);
    }
    Some(score)
}

struct Decoded {
    choice: Vec<usize>,
    transitions: Vec<Transition>,
    score: f64,
}

/// Viterbi decoding. On failure returns the index of the first fix that
/// cannot be reached from the previous one.
fn viterbi(net: &RoadNetwork, fixes: &[CandidateFix], params: &MatchParams) -> Result<Decoded, usize> {
    let mut router = TransitionRouter::new(net);
    let mut score: Vec<f64> = fixes[0].candidates.iter().map(|c| params.emission(c.distance_m)).collect();
    // back[t][j] = (predecessor index, transition) for candidate j at fix t.
    let mut back: Vec<Vec<Option<(usize, Transition)>>> = vec![Vec::new()];
    for t in 1..fixes.len() {
        let gc = haversine(fixes[t - 1].record.position, fixes[t].record.position);
        let mut next = vec![f64::NEG_INFINITY; fixes[t].candidates.len()];
        let mut ptr: Vec<Option<(usize, Transition)>> = vec![None; fixes[t].candidates.len()];
        for (j, b) in fixes[t].candidates.iter().enumerate() {
            let emit = params.emission(b.distance_m);
            for (i, a) in fixes[t - 1].candidates.iter().enumerate() {
                if score[i] == f64::NEG_INFINITY {
                    continue;
                }
                let Some(tr) = router.transition(a, b, gc) else {
                    continue;
                };
                let s = score[i] + params.transition(tr.route_m, gc) + emit;
                if s > next[j] {
                    next[j] = s;
                    ptr[j] = Some((i, tr));
                }
            }
        }
        if next.iter().all(|s| *s == f64::NEG_INFINITY) {
            return Err(t);
        }
        score = next;
        back.push(ptr);
    }
    let (mut j, best) = score
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (j, &s)| if s > acc.1 { (j, s) } else { acc });
    let mut choice = vec![0; fixes.len()];
    let mut transitions = vec![
        Transition {
            route_m: 0.0,
            entered: Vec::new()
        };
        fixes.len() - 1
    ];
    for t in (1..fixes.len()).rev() {
        choice[t] = j;
        let (i, tr) = back[t][j].clone().expect("reachable candidate has a predecessor");
        transitions[t - 1] = tr;
        j = i;
    }
    choice[0] = j;
    Ok(Decoded {
        choice,
        transitions,
        score: best,
    })
}

fn at_seconds(origin: DateTime<Utc>, s: f64) -> DateTime<Utc> {
    origin + Duration::nanoseconds((s * 1e9).round() as i64)
}

/// Piecewise-linear time at path position `p` through (position, seconds)
/// knots. Positions are non-decreasing; stationary spans end at the later
/// knot.
fn time_at(knots: &[(f64, f64)], p: f64) -> f64 {
    if p <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        let (p0, t0) = w[0];
        let (p1, t1) = w[1];
        if p1 > p0 && p <= p1 {
            return t0 + (p - p0) / (p1 - p0) * (t1 - t0);
        }
    }
    knots[knots.len() - 1].1
}

fn assemble(
    net: &RoadNetwork,
    trace: &Trace,
    fixes: &[CandidateFix],
    decoded: Decoded,
    dropped_fixes: usize,
) -> Result<MatchedRoute, MatchError> {
    let first = fixes[0].candidates[decoded.choice[0]];
    let mut links = vec![first.link];
    let mut starts = vec![0.0];
    let mut positions = vec![first.offset_m];
    let mut assignments = vec![FixAssignment {
        timestamp: fixes[0].record.timestamp,
        link: first.link,
        offset_m: first.offset_m,
    }];
    for (t, tr) in decoded.transitions.iter().enumerate() {
        for &l in &tr.entered {
            let prev = *links.last().unwrap();
            starts.push(starts.last().unwrap() + net.link(prev).length_m);
            links.push(l);
        }
        let c = fixes[t + 1].candidates[decoded.choice[t + 1]];
        let p = (starts.last().unwrap() + c.offset_m).max(*positions.last().unwrap());
        positions.push(p);
        assignments.push(FixAssignment {
            timestamp: fixes[t + 1].record.timestamp,
            link: c.link,
            offset_m: p - starts.last().unwrap(),
        });
    }
    let start_pos = positions[0];
    let end_pos = *positions.last().unwrap();
    if end_pos - start_pos < DEGENERATE_M {
        return Err(MatchError::Degenerate);
    }

    let t0 = fixes[0].record.timestamp;
    let knots: Vec<(f64, f64)> = positions
        .iter()
        .zip(fixes)
        .map(|(&p, f)| (p, (f.record.timestamp - t0).num_milliseconds() as f64 / 1000.0))
        .collect();
    let link_times = links
        .iter()
        .zip(&starts)
        .map(|(&l, &s)| {
            let len = net.link(l).length_m;
            let a = s.max(start_pos);
            let b = (s + len).min(end_pos);
            LinkTiming {
                entry: at_seconds(t0, time_at(&knots, a)),
                exit: at_seconds(t0, time_at(&knots, b)),
                fraction: ((b - a) / len).clamp(0.0, 1.0),
            }
        })
        .collect();
    Ok(MatchedRoute {
        journey_id: trace.journey_id.clone(),
        vehicle: trace.vehicle,
        links,
        link_times,
        fix_assignments: assignments,
        score: decoded.score,
        dropped_fixes,
    })
}

/// Viterbi-optimal route of a trace.
pub fn match_trace(net: &RoadNetwork, trace: &Trace, params: &MatchParams) -> Result<MatchedRoute, MatchError> {
    params.validate().map_err(MatchError::Params)?;
    if trace.fixes.len() < 2 {
        return Err(MatchError::TooShort(trace.fixes.len()));
    }
    let first = trace.fixes[0].position;
    if trace.fixes.iter().all(|f| f.position == first) {
        return Err(MatchError::Degenerate);
    }
    let mut fixes = candidate_fixes(net, &trace.fixes, params)?;
    match viterbi(net, &fixes, params) {
        Ok(decoded) => assemble(net, trace, &fixes, decoded, 0),
        Err(t) => {
            fixes.remove(t);
            if fixes.len() < 2 {
                return Err(MatchError::BrokenChain { fix: t });
            }
            match viterbi(net, &fixes, params) {
                Ok(decoded) => assemble(net, trace, &fixes, decoded, 1),
                Err(u) => Err(MatchError::BrokenChain {
                    fix: if u >= t { u + 1 } else { u },
                }),
            }
        }
    }
}

/// Matches traces in parallel; results follow the input order.
pub fn match_all(net: &RoadNetwork, traces: &[Trace], params: &MatchParams) -> Vec<Result<MatchedRoute, MatchError>> {
    traces.par_iter().map(|t| match_trace(net, t, params)).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeedExtraction {
    pub observations: Vec<LinkSpeedObservation>,
    /// Full links traversed faster than the timing floor.
    pub skipped: usize,
}

fn seconds_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    (b - a).num_nanoseconds().map(|n| n as f64 / 1e9).unwrap_or(f64::INFINITY)
}

/// One observation per fully traversed link; the partial first and last
/// links are left out.
pub fn extract_speeds(route: &MatchedRoute, net: &RoadNetwork) -> SpeedExtraction {
    let mut out = SpeedExtraction::default();
    let n = route.links.len();
    if n < 3 {
        return out;
    }
    for k in 1..n - 1 {
        let timing = &route.link_times[k];
        let dt = seconds_between(timing.entry, timing.exit);
        if dt < MIN_TRAVERSAL_S {
            out.skipped += 1;
            continue;
        }
        let speed = mps_to_mph(net.link(route.links[k]).length_m / dt);
        if !speed.is_finite() || speed <= 0.0 {
            out.skipped += 1;
            continue;
        }
        out.observations.push(LinkSpeedObservation {
            link: route.links[k],
            vehicle: route.vehicle,
            entry: timing.entry,
            speed_mph: speed,
        });
    }
    out
}

impl PartialEq for LinkSpeedObservation {
    fn eq(&self, other: &Self) -> bool {
        self.link == other.link
            && self.vehicle == other.vehicle
            && self.entry == other.entry
            && self.speed_mph.to_bits() == other.speed_mph.to_bits()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub road_type: RoadType,
    pub present: usize,
    pub used: usize,
    pub fraction: f64,
}

fn coverage_table(net: &RoadNetwork, used: &BTreeSet<LinkId>) -> Vec<CoverageRow> {
    let mut present = [0usize; 9];
    let mut hit = [0usize; 9];
    for l in net.links() {
        present[l.road_type.index()] += 1;
        if used.contains(&l.id) {
            hit[l.road_type.index()] += 1;
        }
    }
    RoadType::ALL
        .iter()
        .map(|&t| {
            let (p, u) = (present[t.index()], hit[t.index()]);
            CoverageRow {
                road_type: t,
                present: p,
                used: u,
                fraction: if p == 0 { 0.0 } else { u as f64 / p as f64 },
            }
        })
        .collect()
}

/// Share of directed links of each road type appearing in any route.
pub fn coverage_by_road_type(routes: &[MatchedRoute], net: &RoadNetwork) -> Vec<CoverageRow> {
    let used: BTreeSet<LinkId> = routes.iter().flat_map(|r| r.links.iter().copied()).collect();
    coverage_table(net, &used)
}

/// The same table for naive nearest-link snapping of raw fixes.
pub fn snapped_coverage_by_road_type(net: &RoadNetwork, records: &[AvlsRecord]) -> Vec<CoverageRow> {
    let used: BTreeSet<LinkId> = records
        .par_iter()
        .filter_map(|r| net.nearest_link(r.position).map(|(l, _)| l))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    coverage_table(net, &used)
}

pub fn write_coverage_csv<W: Write>(rows: &[CoverageRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["road_type", "present", "used", "fraction"])?;
    for r in rows {
        w.write_record([
            r.road_type.name().to_string(),
            r.present.to_string(),
            r.used.to_string(),
            format!("{:.6}", r.fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const MATCHED_HEADER: [&str; 6] = ["journey_id", "vehicle", "link_id", "entry_ts", "exit_ts", "speed_mph"];

/// Matched routes as CSV, one row per link, sorted by journey id. The speed
/// column covers the travelled part of partial end links.
pub fn write_matched_csv<W: Write>(routes: &[MatchedRoute], net: &RoadNetwork, out: W) -> Result<(), csv::Error> {
    let mut sorted: Vec<&MatchedRoute> = routes.iter().collect();
    sorted.sort_by(|a, b| a.journey_id.cmp(&b.journey_id));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MATCHED_HEADER)?;
    for r in sorted {
        for (l, t) in r.links.iter().zip(&r.link_times) {
            let dt = seconds_between(t.entry, t.exit);
            let dist = t.fraction * net.link(*l).length_m;
            let speed = if dt > 0.0 { format!("{:.4}", mps_to_mph(dist / dt)) } else { String::new() };
            w.write_record([
                r.journey_id.clone(),
                r.vehicle.to_string(),
                l.to_string(),
                t.entry.to_rfc3339_opts(SecondsFormat::Millis, true),
                t.exit.to_rfc3339_opts(SecondsFormat::Millis, true),
                speed,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct MatchedRow {
    journey_id: String,
    vehicle: String,
    link_id: u32,
    entry_ts: DateTime<Utc>,
    exit_ts: DateTime<Utc>,
}

/// Link paths and times read back from matched-route CSV, keyed by
/// journey id.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPath {
    pub vehicle: VehicleClass,
    pub links: Vec<LinkId>,
    pub entry: Vec<DateTime<Utc>>,
    pub exit: Vec<DateTime<Utc>>,
}

pub fn read_matched_csv<R: std::io::Read>(input: R) -> Result<BTreeMap<String, MatchedPath>, csv::Error> {
    let mut out: BTreeMap<String, MatchedPath> = BTreeMap::new();
    for row in csv::Reader::from_reader(input).deserialize::<MatchedRow>() {
        let row = row?;
        let vehicle = row.vehicle.parse().unwrap_or(VehicleClass::AEU);
        let e = out.entry(row.journey_id).or_insert_with(|| MatchedPath {
            vehicle,
            links: Vec::new(),
            entry: Vec::new(),
            exit: Vec::new(),
        });
        e.links.push(LinkId(row.link_id));
        e.entry.push(row.entry_ts);
        e.exit.push(row.exit_ts);
    }
    Ok(out)
}

/// Speed observations from matched paths read back from CSV, under the
/// same rules as [`extract_speeds`].
pub fn observations_from_paths(net: &RoadNetwork, paths: &BTreeMap<String, MatchedPath>) -> SpeedExtraction {
    let mut out = SpeedExtraction::default();
    for p in paths.values() {
        let n = p.links.len();
        for k in 1..n.saturating_sub(1) {
            let dt = seconds_between(p.entry[k], p.exit[k]);
            if dt < MIN_TRAVERSAL_S {
                out.skipped += 1;
                continue;
            }
            out.observations.push(LinkSpeedObservation {
                link: p.links[k],
                vehicle: p.vehicle,
                entry: p.entry[k],
                speed_mph: mps_to_mph(net.link(p.links[k]).length_m / dt),
            });
        }
    }
    out
}
