//! Telemetry ingestion: CSV parsing, stale-fix filtering, journey
//! aggregation and naive snapping coverage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LatLon;
use crate::network::RoadNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VehicleClass {
    /// Ambulance emergency unit.
    AEU,
    /// Fast response unit.
    FRU,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; 2] = [VehicleClass::AEU, VehicleClass::FRU];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            VehicleClass::AEU => "AEU",
            VehicleClass::FRU => "FRU",
        }
    }
}

impl fmt::Display for VehicleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VehicleClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "AEU" => Ok(VehicleClass::AEU),
            "FRU" => Ok(VehicleClass::FRU),
            other => Err(format!("unknown vehicle class `{other}`")),
        }
    }
}

/// One telemetry fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvlsRecord {
    pub timestamp: DateTime<Utc>,
    pub callsign: String,
    pub incident_id: String,
    pub vehicle: VehicleClass,
    pub position: LatLon,
    /// Multiple of 5 mph.
    pub speed_mph: u32,
    /// Multiple of 15 degrees in [0, 360).
    pub heading_deg: u32,
}

pub const AVLS_HEADER: [&str; 8] = [
    "timestamp_utc",
    "callsign",
    "incident_id",
    "vehicle",
    "lat",
    "lon",
    "speed_mph",
    "heading_deg",
];

/// A single journey: fixes of one (callsign, incident, vehicle) key.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub journey_id: String,
    pub vehicle: VehicleClass,
    pub incident_id: String,
    pub fixes: Vec<AvlsRecord>,
}

/// Journey key shared by traces, matched routes and synthetic truth.
pub fn journey_key(callsign: &str, incident_id: &str, vehicle: VehicleClass, segment: usize) -> String {
    format!("{callsign}/{incident_id}/{vehicle}/{segment}")
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing or wrong header: expected `{}`", AVLS_HEADER.join(","))]
    Header,
    #[error("row {row}: {reason}")]
    Malformed { row: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Fail on the first malformed row instead of collecting it.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reject {
    /// 1-based data row number (the header is row 0).
    pub row_no: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<AvlsRecord>,
    pub rejects: Vec<Reject>,
}

fn parse_row(row: &csv::StringRecord) -> Result<AvlsRecord, String> {
    if row.len() != AVLS_HEADER.len() {
        return Err(format!("field count {} (expected {})", row.len(), AVLS_HEADER.len()));
    }
    let timestamp = DateTime::parse_from_rfc3339(&row[0])
        .map_err(|_| "timestamp".to_string())?
        .with_timezone(&Utc);
    if row[1].is_empty() {
        return Err("empty callsign".into());
    }
    let vehicle: VehicleClass = row[3].parse().map_err(|_| "vehicle".to_string())?;
    let lat: f64 = row[4].parse().map_err(|_| "latitude".to_string())?;
    let lon: f64 = row[5].parse().map_err(|_| "longitude".to_string())?;
    let position = LatLon::new(lat, lon);
    if !position.is_valid() {
        return Err("coordinate range".into());
    }
    let speed_mph: u32 = row[6].parse().map_err(|_| "speed".to_string())?;
    if speed_mph % 5 != 0 {
        return Err("speed quantisation".into());
    }
    let heading_deg: u32 = row[7].parse().map_err(|_| "heading".to_string())?;
    if heading_deg >= 360 {
        return Err("heading range".into());
    }
    if heading_deg % 15 != 0 {
        return Err("heading quantisation".into());
    }
    Ok(AvlsRecord {
        timestamp,
        callsign: row[1].to_string(),
        incident_id: row[2].to_string(),
        vehicle,
        position,
        speed_mph,
        heading_deg,
    })
}

pub fn parse_avls<R: Read>(input: R, options: ParseOptions) -> Result<ParseOutcome, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut rows = reader.records();
    let mut out = ParseOutcome::default();
    match rows.next() {
        None => {
            log::warn!("AVLS input is empty");
            return Ok(out);
        }
        Some(header) => {
            let header = header?;
            if header.iter().map(str::trim).ne(AVLS_HEADER) {
                return Err(IngestError::Header);
            }
        }
    }
    for (i, row) in rows.enumerate() {
        let row_no = i + 1;
        let parsed = match row {
            Ok(r) => parse_row(&r),
            Err(e) => Err(format!("unreadable row: {e}")),
        };
        match parsed {
            Ok(rec) => out.records.push(rec),
            Err(reason) if options.strict => return Err(IngestError::Malformed { row: row_no, reason }),
            Err(reason) => out.rejects.push(Reject { row_no, reason }),
        }
    }
    if !out.rejects.is_empty() {
        log::warn!("rejected {} malformed AVLS rows", out.rejects.len());
    }
    Ok(out)
}

pub fn write_rejects<W: Write>(rejects: &[Reject], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row_no", "reason"])?;
    for r in rejects {
        w.write_record([r.row_no.to_string(), r.reason.clone()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_avls<W: Write>(records: &[AvlsRecord], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AVLS_HEADER)?;
    for r in records {
        w.write_record([
            r.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            r.callsign.clone(),
            r.incident_id.clone(),
            r.vehicle.to_string(),
            r.position.lat.to_string(),
            r.position.lon.to_string(),
            r.speed_mph.to_string(),
            r.heading_deg.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Removes fixes carrying a stale cached position from one vehicle's
/// time-ordered records. A fix is dropped when its gap from the previous
/// retained fix is 0 s, or 10/20 s with a bit-identical position.
/// Returns the retained fixes and the number removed.
pub fn filter_stale_fixes(records: &[AvlsRecord]) -> (Vec<AvlsRecord>, usize) {
    let mut kept: Vec<AvlsRecord> = Vec::with_capacity(records.len());
    for rec in records {
        if let Some(prev) = kept.last() {
            let gap = (rec.timestamp - prev.timestamp).num_seconds();
            let same_position = rec.position.lat.to_bits() == prev.position.lat.to_bits()
                && rec.position.lon.to_bits() == prev.position.lon.to_bits();
            if gap == 0 || ((gap == 10 || gap == 20) && same_position) {
                continue;
            }
        }
        kept.push(rec.clone());
    }
    let removed = records.len() - kept.len();
    (kept, removed)
}

/// Applies [`filter_stale_fixes`] per callsign. Output is ordered by
/// callsign, then timestamp.
pub fn filter_all(records: &[AvlsRecord]) -> (Vec<AvlsRecord>, usize) {
    let mut by_vehicle: BTreeMap<&str, Vec<AvlsRecord>> = BTreeMap::new();
    for r in records {
        by_vehicle.entry(r.callsign.as_str()).or_default().push(r.clone());
    }
    let mut out = Vec::with_capacity(records.len());
    let mut removed = 0;
    for (_, mut group) in by_vehicle {
        group.sort_by_key(|r| r.timestamp);
        let (kept, n) = filter_stale_fixes(&group);
        removed += n;
        out.extend(kept);
    }
    (out, removed)
}

/// A fix gap longer than this starts a new journey under the same key.
pub const JOURNEY_GAP_S: i64 = 600;

#[derive(Debug, Clone, Default)]
pub struct Aggregation {
    pub traces: Vec<Trace>,
    /// Groups dropped for having fewer than two fixes.
    pub discarded: usize,
    /// Fixes sharing a timestamp with an earlier fix of the same key.
    pub duplicates: usize,
}

/// Groups fixes by (callsign, incident, vehicle) into journeys, ordered by
/// journey id.
pub fn aggregate_traces(records: &[AvlsRecord]) -> Aggregation {
    let mut groups: BTreeMap<(&str, &str, VehicleClass), Vec<&AvlsRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.callsign.as_str(), r.incident_id.as_str(), r.vehicle))
            .or_default()
            .push(r);
    }
    let mut agg = Aggregation::default();
    for ((callsign, incident, vehicle), mut fixes) in groups {
        fixes.sort_by_key(|r| r.timestamp);
        let mut segments: Vec<Vec<AvlsRecord>> = vec![Vec::new()];
        for fix in fixes {
            let current = segments.last_mut().expect("non-empty");
            match current.last() {
                Some(prev) if prev.timestamp == fix.timestamp => {
                    agg.duplicates += 1;
                    continue;
                }
                Some(prev) if (fix.timestamp - prev.timestamp).num_seconds() > JOURNEY_GAP_S => {
                    segments.push(vec![fix.clone()]);
                }
                _ => current.push(fix.clone()),
            }
        }
        for (seg, fixes) in segments.into_iter().enumerate() {
            if fixes.len() < 2 {
                agg.discarded += 1;
                continue;
            }
            agg.traces.push(Trace {
                journey_id: journey_key(callsign, incident, vehicle, seg),
                vehicle,
                incident_id: incident.to_string(),
                fixes,
            });
        }
    }
    agg.traces.sort_by(|a, b| a.journey_id.cmp(&b.journey_id));
    agg
}

/// Calendar month in the configured civil timezone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Cumulative number of distinct links hit by naive nearest-link snapping,
/// per calendar month present in the data.
pub fn snap_coverage(net: &RoadNetwork, records: &[AvlsRecord], tz: Tz) -> Vec<(YearMonth, usize)> {
    let mut per_month: BTreeMap<YearMonth, BTreeSet<u32>> = BTreeMap::new();
    for r in records {
        let local = r.timestamp.with_timezone(&tz);
        let key = YearMonth {
            year: local.year(),
            month: local.month(),
        };
        let set = per_month.entry(key).or_default();
        if let Some((link, _)) = net.nearest_link(r.position) {
            set.insert(link.0);
        }
    }
    let mut seen = BTreeSet::new();
    per_month
        .into_iter()
        .map(|(month, links)| {
            seen.extend(links);
            (month, seen.len())
        })
        .collect()
}
