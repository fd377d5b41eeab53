//! Synthetic worlds: a grid road network, ground-truth journeys driven at
//! planted speeds, and the telemetry they would emit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};
use chrono_tz::Tz;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{path_coincidence, ReferenceJourney};
use crate::geo::{bearing_along, haversine, mph_to_mps, point_along, LatLon, LocalFrame};
use crate::ingest::{journey_key, write_avls, AvlsRecord, VehicleClass};
use crate::network::{LinkId, NetworkBuilder, NodeId, RoadNetwork, RoadType, WayFlags, WaySpec};
use crate::routing::dijkstra::{search, Seed, Target};
use crate::speeds::{RoadSpeedTable, TimeBinKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    /// Largest random displacement of interior nodes along each axis.
    pub jitter_m: f64,
    /// Grid centre.
    pub centre: LatLon,
    /// Free-flow speed per road type, in table order.
    pub speeds_mph: [f64; 9],
    /// Speed multiplier per vehicle class (AEU, FRU).
    pub vehicle_factor: [f64; 2],
    /// Multiplier on weekdays 07-10 and 16-19 local time.
    pub peak_factor: f64,
    pub noise_m: f64,
    pub interval_s: u32,
    pub journeys: usize,
    /// Shortest straight-line distance between journey endpoints.
    pub min_trip_m: f64,
    /// Standstill at every interior junction.
    pub junction_pause_s: f64,
    pub callsigns: usize,
    /// Departures are spread over one week from this instant.
    pub start: DateTime<Utc>,
    pub timezone: Tz,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 20,
            spacing_m: 150.0,
            jitter_m: 20.0,
            centre: crate::eval::DEFAULT_CENTRE,
            speeds_mph: [40.0, 32.0, 26.0, 22.0, 17.0, 10.0, 8.0, 6.0, 6.0],
            vehicle_factor: [1.0, 1.1],
            peak_factor: 0.8,
            noise_m: 10.0,
            interval_s: 15,
            journeys: 500,
            min_trip_m: 600.0,
            junction_pause_s: 0.0,
            callsigns: 60,
            start: Utc.with_ymd_and_hms(2016, 11, 7, 0, 0, 0).unwrap(),
            timezone: chrono_tz::Europe::London,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("grid {rows}x{cols} has fewer than 2 nodes")]
    DegenerateGrid { rows: usize, cols: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no node pair is at least {0} m apart")]
    NoTrips(f64),
    #[error("writing world: {0}")]
    Output(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.rows * self.cols < 2 {
            return Err(SynthError::DegenerateGrid {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let bad = |m: String| Err(SynthError::Config(m));
        if !(self.spacing_m > 0.0) {
            return bad(format!("spacing_m must be positive, got {}", self.spacing_m));
        }
        if !(self.jitter_m >= 0.0 && self.jitter_m < self.spacing_m / 3.0) {
            return bad(format!("jitter_m must be in [0, spacing_m/3), got {}", self.jitter_m));
        }
        if self.speeds_mph.iter().chain(&self.vehicle_factor).chain([&self.peak_factor]).any(|v| !(*v > 0.0)) {
            return bad("speeds and factors must be positive".into());
        }
        if !(self.noise_m >= 0.0) {
            return bad(format!("noise_m must be non-negative, got {}", self.noise_m));
        }
        if self.interval_s == 0 || self.callsigns == 0 {
            return bad("interval_s and callsigns must be positive".into());
        }
        if !(self.junction_pause_s >= 0.0) {
            return bad("junction_pause_s must be non-negative".into());
        }
        Ok(())
    }

    /// Planted speed of a road type for a vehicle at an hour-of-week bin.
    pub fn true_speed(&self, road_type: RoadType, vehicle: VehicleClass, hour_of_week: usize) -> f64 {
        let day = hour_of_week / 24;
        let hour = hour_of_week % 24;
        let peak = day < 5 && ((7..10).contains(&hour) || (16..19).contains(&hour));
        let profile = if peak { self.peak_factor } else { 1.0 };
        self.speeds_mph[road_type.index()] * self.vehicle_factor[vehicle.index()] * profile
    }

    pub fn true_speed_at(&self, road_type: RoadType, vehicle: VehicleClass, instant: DateTime<Utc>) -> f64 {
        self.true_speed(road_type, vehicle, TimeBinKind::HourOfWeek.bin(instant, self.timezone))
    }

    /// Free-flow speeds with the junction pause, as a road-type table.
    pub fn speed_table(&self) -> RoadSpeedTable {
        RoadSpeedTable {
            speeds_mph: self.speeds_mph,
            junction_delay_s: self.junction_pause_s,
        }
    }
}

fn node_key(r: usize, c: usize) -> String {
    format!("r{r}c{c}")
}

/// Grid network: the outer ring is A road, the middle row and column are
/// B roads and the rest are local streets.
pub fn grid_network(config: &SynthConfig) -> Result<RoadNetwork, SynthError> {
    config.validate()?;
    let (rows, cols, s) = (config.rows, config.cols, config.spacing_m);
    let frame = LocalFrame::new(config.centre);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut b = NetworkBuilder::new();
    let x0 = -(cols as f64 - 1.0) * s / 2.0;
    let y0 = -(rows as f64 - 1.0) * s / 2.0;
    for r in 0..rows {
        for c in 0..cols {
            let mut x = x0 + c as f64 * s;
            let mut y = y0 + r as f64 * s;
            if config.jitter_m > 0.0 && r > 0 && c > 0 && r + 1 < rows && c + 1 < cols {
                x += rng.gen_range(-config.jitter_m..=config.jitter_m);
                y += rng.gen_range(-config.jitter_m..=config.jitter_m);
            }
            b.add_node(node_key(r, c), frame.unproject(x, y)).expect("unique keys");
        }
    }
    let road_type = |horizontal: bool, r: usize, c: usize| {
        let (line, last) = if horizontal { (r, rows - 1) } else { (c, cols - 1) };
        let mid = if horizontal { rows / 2 } else { cols / 2 };
        if line == 0 || line == last {
            RoadType::ARoad
        } else if line == mid {
            RoadType::BRoad
        } else {
            RoadType::LocalStreet
        }
    };
    let mut add = |from: String, to: String, t: RoadType| {
        b.add_way(WaySpec {
            way_id: format!("{from}-{to}"),
            from,
            to,
            road_type: t,
            flags: WayFlags::default(),
            geometry: None,
            length_m: None,
        })
        .expect("grid way is valid");
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                add(node_key(r, c), node_key(r, c + 1), road_type(true, r, c));
            }
            if r + 1 < rows {
                add(node_key(r, c), node_key(r + 1, c), road_type(false, r, c));
            }
        }
    }
    Ok(b.build())
}

/// One simulated journey.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthJourney {
    pub journey_id: String,
    pub callsign: String,
    pub incident_id: String,
    pub vehicle: VehicleClass,
    pub origin: NodeId,
    pub destination: NodeId,
    pub departure: DateTime<Utc>,
    pub links: Vec<LinkId>,
    /// Seconds after departure.
    pub entry_s: Vec<f64>,
    pub exit_s: Vec<f64>,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub journeys: Vec<TruthJourney>,
}

impl GroundTruth {
    pub fn get(&self, journey_id: &str) -> Option<&TruthJourney> {
        self.journeys.iter().find(|j| j.journey_id == journey_id)
    }

    pub fn references(&self, net: &RoadNetwork) -> Vec<ReferenceJourney> {
        self.journeys
            .iter()
            .map(|j| ReferenceJourney {
                journey_id: j.journey_id.clone(),
                origin: net.node(j.origin).position,
                destination: net.node(j.destination).position,
                vehicle: j.vehicle,
                departure: j.departure,
                duration_s: j.duration_s,
                links: j.links.clone(),
            })
            .collect()
    }
}

/// Seconds to drive `link` at the planted speed for `departure`.
pub fn true_link_seconds(net: &RoadNetwork, config: &SynthConfig, link: LinkId, vehicle: VehicleClass, departure: DateTime<Utc>) -> f64 {
    let l = net.link(link);
    1.0 * l.length_m / mph_to_mps(config.true_speed_at(l.road_type, vehicle, departure))
}

/// Fastest path between two nodes under the planted speeds at departure.
pub fn true_path(
    net: &RoadNetwork,
    config: &SynthConfig,
    origin: NodeId,
    destination: NodeId,
    vehicle: VehicleClass,
    departure: DateTime<Utc>,
) -> Option<Vec<LinkId>> {
    let found = search(
        net,
        &[Seed {
            node: origin,
            cost: 0.0,
            via: None,
        }],
        &[Target {
            node: destination,
            extra: 0.0,
            via: None,
        }],
        |l| true_link_seconds(net, config, l, vehicle, departure),
        0.0,
    )?;
    Some(found.links)
}

fn at(departure: DateTime<Utc>, s: f64) -> DateTime<Utc> {
    departure + Duration::nanoseconds((s * 1e9).round() as i64)
}

/// Drives `links`, each at its planted speed for the time of entry, pausing
/// at interior junctions. Returns entry and exit offsets in seconds.
pub fn drive(net: &RoadNetwork, config: &SynthConfig, links: &[LinkId], vehicle: VehicleClass, departure: DateTime<Utc>) -> (Vec<f64>, Vec<f64>) {
    let mut entry = Vec::with_capacity(links.len());
    let mut exit = Vec::with_capacity(links.len());
    let mut t = 0.0;
    for (k, &l) in links.iter().enumerate() {
        if k > 0 {
            t += config.junction_pause_s;
        }
        entry.push(t);
        t += true_link_seconds(net, config, l, vehicle, at(departure, t));
        exit.push(t);
    }
    (entry, exit)
}

/// Where the vehicle is at `s` seconds: link index and offset in metres.
fn locate(net: &RoadNetwork, links: &[LinkId], entry: &[f64], exit: &[f64], s: f64) -> (usize, f64) {
    let k = exit.partition_point(|&e| e < s).min(links.len() - 1);
    let len = net.link(links[k]).length_m;
    if s <= entry[k] {
        return (k, 0.0);
    }
    let f = ((s - entry[k]) / (exit[k] - entry[k])).clamp(0.0, 1.0);
    (k, f * len)
}

/// Telemetry of one journey: a fix at departure, every `interval_s`, and a
/// final fix on the last whole second before arrival.
pub fn emit_fixes(net: &RoadNetwork, config: &SynthConfig, journey: &TruthJourney, rng: &mut ChaCha8Rng) -> Vec<AvlsRecord> {
    let frame = LocalFrame::new(config.centre);
    let noise = Normal::new(0.0, config.noise_m.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let last = journey.duration_s.floor() as u32;
    let mut times: Vec<u32> = (0..=last).step_by(config.interval_s as usize).collect();
    if *times.last().unwrap() != last {
        times.push(last);
    }
    times
        .into_iter()
        .map(|s| {
            let s = s as f64;
            let (k, offset) = locate(net, &journey.links, &journey.entry_s, &journey.exit_s, s);
            let link = net.link(journey.links[k]);
            let moving = s > journey.entry_s[k] && s < journey.exit_s[k];
            let mut position = point_along(&link.geometry, offset);
            if config.noise_m > 0.0 {
                let (x, y) = frame.project(position);
                position = frame.unproject(x + noise.sample(rng), y + noise.sample(rng));
            }
            let timestamp = at(journey.departure, s);
            let speed = if moving || k + 1 < journey.links.len() {
                config.true_speed_at(link.road_type, journey.vehicle, at(journey.departure, journey.entry_s[k]))
            } else {
                0.0
            };
            let heading = (bearing_along(&link.geometry, offset) / 15.0).round() as u32 * 15 % 360;
            AvlsRecord {
                timestamp,
                callsign: journey.callsign.clone(),
                incident_id: journey.incident_id.clone(),
                vehicle: journey.vehicle,
                position,
                speed_mph: ((speed / 5.0).round() * 5.0) as u32,
                heading_deg: heading,
            }
        })
        .collect()
}

/// A generated world.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SynthConfig,
    pub network: RoadNetwork,
    pub truth: GroundTruth,
    /// Time-ordered telemetry of all journeys.
    pub records: Vec<AvlsRecord>,
}

impl World {
    pub fn references(&self) -> Vec<ReferenceJourney> {
        self.truth.references(&self.network)
    }
}

struct Plan {
    index: usize,
    origin: NodeId,
    destination: NodeId,
    vehicle: VehicleClass,
    departure: DateTime<Utc>,
    callsign: String,
}

/// Builds the grid and simulates `config.journeys` journeys between random
/// node pairs. Deterministic in the seed; journeys use their own random
/// streams so generation runs in parallel.
pub fn generate_world(config: &SynthConfig) -> Result<World, SynthError> {
    let network = grid_network(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let nodes: Vec<NodeId> = network.nodes().iter().map(|n| n.id).collect();
    let far_enough = |a: NodeId, b: NodeId| a != b && haversine(network.node(a).position, network.node(b).position) >= config.min_trip_m;
    if !nodes.iter().any(|&a| nodes.iter().any(|&b| far_enough(a, b))) && config.journeys > 0 {
        return Err(SynthError::NoTrips(config.min_trip_m));
    }
    let slot = 7.0 * 86_400.0 / config.journeys.max(1) as f64;
    let mut plans = Vec::with_capacity(config.journeys);
    for index in 0..config.journeys {
        let (origin, destination) = loop {
            let a = *nodes.choose(&mut rng).unwrap();
            let b = *nodes.choose(&mut rng).unwrap();
            if far_enough(a, b) {
                break (a, b);
            }
        };
        let vehicle = if rng.gen_bool(0.5) { VehicleClass::AEU } else { VehicleClass::FRU };
        let offset = (index as f64 * slot + rng.gen_range(0.0..slot / 2.0)).floor() as i64;
        plans.push(Plan {
            index,
            origin,
            destination,
            vehicle,
            departure: config.start + Duration::seconds(offset),
            callsign: format!("U{:03}", rng.gen_range(0..config.callsigns)),
        });
    }

    let simulated: Vec<(TruthJourney, Vec<AvlsRecord>)> = plans
        .par_iter()
        .map(|p| {
            let links = true_path(&network, config, p.origin, p.destination, p.vehicle, p.departure).expect("grid is connected");
            let (entry_s, exit_s) = drive(&network, config, &links, p.vehicle, p.departure);
            let incident_id = format!("INC{:05}", p.index);
            let journey = TruthJourney {
                journey_id: journey_key(&p.callsign, &incident_id, p.vehicle, 0),
                callsign: p.callsign.clone(),
                incident_id,
                vehicle: p.vehicle,
                origin: p.origin,
                destination: p.destination,
                departure: p.departure,
                duration_s: *exit_s.last().unwrap(),
                links,
                entry_s,
                exit_s,
            };
            let mut jrng = ChaCha8Rng::seed_from_u64(config.seed);
            jrng.set_stream(2 + p.index as u64);
            let fixes = emit_fixes(&network, config, &journey, &mut jrng);
            (journey, fixes)
        })
        .collect();

    let mut journeys = Vec::with_capacity(simulated.len());
    let mut records = Vec::new();
    for (j, fixes) in simulated {
        journeys.push(j);
        records.extend(fixes);
    }
    records.sort_by(|a, b| (a.timestamp, &a.callsign, &a.incident_id).cmp(&(b.timestamp, &b.callsign, &b.incident_id)));
    journeys.sort_by(|a, b| a.journey_id.cmp(&b.journey_id));
    Ok(World {
        config: config.clone(),
        network,
        truth: GroundTruth { journeys },
        records,
    })
}

pub fn write_truth_csv<W: Write>(truth: &GroundTruth, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["journey_id", "seq", "link_id", "entry_ts", "exit_ts", "duration_s"])?;
    for j in &truth.journeys {
        for (k, l) in j.links.iter().enumerate() {
            w.write_record([
                j.journey_id.clone(),
                k.to_string(),
                l.to_string(),
                at(j.departure, j.entry_s[k]).to_rfc3339_opts(SecondsFormat::Millis, true),
                at(j.departure, j.exit_s[k]).to_rfc3339_opts(SecondsFormat::Millis, true),
                format!("{:.3}", j.duration_s),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Paths of each journey read back from a truth file.
pub fn read_truth_paths<R: std::io::Read>(input: R) -> Result<BTreeMap<String, (Vec<LinkId>, f64)>, csv::Error> {
    #[derive(Deserialize)]
    struct Row {
        journey_id: String,
        link_id: u32,
        duration_s: f64,
    }
    let mut out: BTreeMap<String, (Vec<LinkId>, f64)> = BTreeMap::new();
    for row in csv::Reader::from_reader(input).deserialize::<Row>() {
        let row = row?;
        let e = out.entry(row.journey_id).or_insert((Vec::new(), row.duration_s));
        e.0.push(LinkId(row.link_id));
    }
    Ok(out)
}

/// Files written by [`write_world`].
pub const WORLD_FILES: [&str; 5] = ["network.geojson", "avls.csv", "truth.csv", "journeys.csv", "true_speeds.csv"];

/// Writes the network, telemetry, truth, reference journeys and planted
/// speed table into `dir`.
pub fn write_world(world: &World, dir: &Path) -> Result<(), SynthError> {
    let out = |e: &dyn std::fmt::Display| SynthError::Output(e.to_string());
    std::fs::create_dir_all(dir).map_err(|e| out(&e))?;
    let create = |name: &str| File::create(dir.join(name)).map(BufWriter::new).map_err(|e| out(&e));
    world.network.write_geojson(create(WORLD_FILES[0])?).map_err(|e| out(&e))?;
    write_avls(&world.records, create(WORLD_FILES[1])?).map_err(|e| out(&e))?;
    write_truth_csv(&world.truth, create(WORLD_FILES[2])?).map_err(|e| out(&e))?;
    crate::eval::write_references(&world.references(), create(WORLD_FILES[3])?).map_err(|e| out(&e))?;
    world.config.speed_table().write_csv(create(WORLD_FILES[4])?).map_err(|e| out(&e))?;
    Ok(())
}

/// A reconstruction or prediction to score against truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub journey_id: String,
    pub links: Vec<LinkId>,
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthScoreRow {
    pub journey_id: String,
    pub coincidence: f64,
    /// Candidate minus truth duration.
    pub duration_error_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TruthScore {
    pub rows: Vec<TruthScoreRow>,
    /// Truth journeys without a candidate.
    pub missing: Vec<String>,
    /// Candidates without a truth journey.
    pub unknown: Vec<String>,
}

impl TruthScore {
    pub fn mean_coincidence(&self) -> Option<f64> {
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().map(|r| r.coincidence).sum::<f64>() / self.rows.len() as f64)
    }
}

pub fn score_against_truth(net: &RoadNetwork, truth: &GroundTruth, candidates: &[Candidate]) -> TruthScore {
    let by_id: BTreeMap<&str, &Candidate> = candidates.iter().map(|c| (c.journey_id.as_str(), c)).collect();
    let mut score = TruthScore::default();
    for j in &truth.journeys {
        match by_id.get(j.journey_id.as_str()) {
            Some(c) => score.rows.push(TruthScoreRow {
                journey_id: j.journey_id.clone(),
                coincidence: path_coincidence(net, &j.links, &c.links).map(|r| r.whole).unwrap_or(0.0),
                duration_error_s: c.duration_s.map(|d| d - j.duration_s),
            }),
            None => score.missing.push(j.journey_id.clone()),
        }
    }
    for c in candidates {
        if truth.get(&c.journey_id).is_none() {
            score.unknown.push(c.journey_id.clone());
        }
    }
    score
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::project_onto_polyline;

    fn small(journeys: usize) -> SynthConfig {
        SynthConfig {
            rows: 6,
            cols: 6,
            journeys,
            ..Default::default()
        }
    }

    #[test]
    fn grid_counts() {
        let net = grid_network(&SynthConfig {
            rows: 3,
            cols: 3,
            jitter_m: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(net.node_count(), 9);
        assert_eq!(net.link_count(), 24);
        let types: Vec<_> = net.links().iter().map(|l| l.road_type).collect();
        assert!(types.contains(&RoadType::ARoad) && types.contains(&RoadType::BRoad));
    }

    #[test]
    fn degenerate_grid() {
        let err = grid_network(&SynthConfig {
            rows: 1,
            cols: 1,
            ..Default::default()
        })
        .unwrap_err();
        assert_eq!(err, SynthError::DegenerateGrid { rows: 1, cols: 1 });
    }

    #[test]
    fn one_mile_at_24_mph() {
        let config = SynthConfig {
            rows: 1,
            cols: 2,
            spacing_m: 1609.344,
            jitter_m: 0.0,
            speeds_mph: [24.0; 9],
            vehicle_factor: [1.0, 1.0],
            peak_factor: 1.0,
            journeys: 1,
            min_trip_m: 1000.0,
            ..Default::default()
        };
        let world = generate_world(&config).unwrap();
        let j = &world.truth.journeys[0];
        let len = world.network.link(j.links[0]).length_m;
        assert!((j.duration_s - len / mph_to_mps(24.0)).abs() < 1e-9);
        assert!((j.duration_s - 150.0).abs() < 0.2);
    }

    #[test]
    fn noiseless_fixes_lie_on_path() {
        let world = generate_world(&SynthConfig {
            noise_m: 0.0,
            ..small(1)
        })
        .unwrap();
        let j = &world.truth.journeys[0];
        for f in &world.records {
            let d = j
                .links
                .iter()
                .map(|l| project_onto_polyline(f.position, &world.network.link(*l).geometry).distance)
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6, "{d}");
            assert_eq!(f.speed_mph % 5, 0);
            assert_eq!(f.heading_deg % 15, 0);
        }
        assert_eq!(world.records[0].timestamp, j.departure);
        let gaps: Vec<i64> = world.records.windows(2).map(|w| (w[1].timestamp - w[0].timestamp).num_seconds()).collect();
        assert!(gaps[..gaps.len() - 1].iter().all(|g| *g == 15));
    }

    #[test]
    fn seeded_determinism() {
        let a = generate_world(&small(5)).unwrap();
        let b = generate_world(&small(5)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.truth, b.truth);
        let c = generate_world(&SynthConfig { seed: 7, ..small(5) }).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn truth_is_consistent() {
        let world = generate_world(&small(10)).unwrap();
        for j in &world.truth.journeys {
            assert!(world.network.is_connected_path(&j.links));
            assert_eq!(world.network.link(j.links[0]).from, j.origin);
            for k in 1..j.links.len() {
                assert_eq!(j.entry_s[k], j.exit_s[k - 1]);
            }
        }
    }

    #[test]
    fn scoring() {
        let world = generate_world(&small(2)).unwrap();
        let perfect: Vec<Candidate> = world
            .truth
            .journeys
            .iter()
            .map(|j| Candidate {
                journey_id: j.journey_id.clone(),
                links: j.links.clone(),
                duration_s: Some(j.duration_s),
            })
            .collect();
        let s = score_against_truth(&world.network, &world.truth, &perfect);
        assert_eq!(s.mean_coincidence(), Some(1.0));
        assert!(s.rows.iter().all(|r| r.duration_error_s == Some(0.0)));
        let empty = score_against_truth(&world.network, &world.truth, &[]);
        assert!(empty.rows.is_empty());
        assert_eq!(empty.missing.len(), 2);
    }

    #[test]
    fn peak_hours() {
        let c = SynthConfig::default();
        assert_eq!(c.true_speed(RoadType::ARoad, VehicleClass::AEU, 8), 32.0 * 0.8);
        assert_eq!(c.true_speed(RoadType::ARoad, VehicleClass::AEU, 5 * 24 + 8), 32.0);
        assert!((c.true_speed(RoadType::ARoad, VehicleClass::FRU, 12) - 35.2).abs() < 1e-12);
    }
}
