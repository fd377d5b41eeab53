//! Scoring predictions against reference journeys: path coincidence,
//! arrival-time errors and their bucketed summaries.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use chrono::{DateTime, Timelike, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geo::{geographic_midpoint, haversine, ring_contains, LatLon};
use crate::ingest::VehicleClass;
use crate::network::{LinkId, RoadNetwork};

/// Charing Cross.
pub const DEFAULT_CENTRE: LatLon = LatLon { lat: 51.5073, lon: -0.1276 };

pub const QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("actual path is empty")]
    EmptyPath,
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("regions: {0}")]
    Regions(String),
    #[error("unknown axis `{0}` (expected duration, centre_distance, hour_of_day or region)")]
    Axis(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub whole: f64,
    /// Per length-quartile of the actual route; `None` when no link's
    /// midpoint falls in that quartile.
    pub quartiles: [Option<f64>; 4],
}

/// Quartile (0..4) of each link of `path`, by where its midpoint falls on
/// the cumulative length.
pub fn quartile_assignment(net: &RoadNetwork, path: &[LinkId]) -> Vec<usize> {
    let total: f64 = path.iter().map(|l| net.link(*l).length_m).sum();
    let mut start = 0.0;
    path.iter()
        .map(|l| {
            let len = net.link(*l).length_m;
            let mid = start + len / 2.0;
            start += len;
            ((4.0 * mid / total).floor() as usize).min(3)
        })
        .collect()
}

/// Share of the actual route's directed links present in the prediction,
/// whole-route and per length-quartile.
pub fn path_coincidence(net: &RoadNetwork, actual: &[LinkId], predicted: &[LinkId]) -> Result<SimilarityReport, EvalError> {
    if actual.is_empty() {
        return Err(EvalError::EmptyPath);
    }
    let predicted: HashSet<LinkId> = predicted.iter().copied().collect();
    let quartile = quartile_assignment(net, actual);
    let mut hit = [0usize; 4];
    let mut total = [0usize; 4];
    for (l, q) in actual.iter().zip(&quartile) {
        total[*q] += 1;
        if predicted.contains(l) {
            hit[*q] += 1;
        }
    }
    let all_hit: usize = hit.iter().sum();
    let mut quartiles = [None; 4];
    for q in 0..4 {
        if total[q] > 0 {
            quartiles[q] = Some(hit[q] as f64 / total[q] as f64);
        }
    }
    Ok(SimilarityReport {
        whole: all_hit as f64 / actual.len() as f64,
        quartiles,
    })
}

/// A reference journey: endpoints, departure, observed duration and, when
/// known, the link path driven.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceJourney {
    pub journey_id: String,
    pub origin: LatLon,
    pub destination: LatLon,
    pub vehicle: VehicleClass,
    pub departure: DateTime<Utc>,
    pub duration_s: f64,
    pub links: Vec<LinkId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceRow {
    journey_id: String,
    from_lat: f64,
    from_lon: f64,
    to_lat: f64,
    to_lon: f64,
    vehicle: String,
    departure: String,
    duration_s: f64,
    links: String,
}

pub fn format_links(links: &[LinkId]) -> String {
    links.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";")
}

pub fn parse_links(s: &str) -> Result<Vec<LinkId>, String> {
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<u32>().map(LinkId).map_err(|e| format!("link id `{t}`: {e}")))
        .collect()
}

pub fn read_references<R: Read>(input: R) -> Result<Vec<ReferenceJourney>, EvalError> {
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_reader(input).deserialize::<ReferenceRow>().enumerate() {
        let row = row?;
        let err = |message: String| EvalError::Row { row: i + 1, message };
        out.push(ReferenceJourney {
            journey_id: row.journey_id,
            origin: LatLon::new(row.from_lat, row.from_lon),
            destination: LatLon::new(row.to_lat, row.to_lon),
            vehicle: row.vehicle.parse().map_err(err)?,
            departure: DateTime::parse_from_rfc3339(&row.departure)
                .map_err(|e| err(format!("departure: {e}")))?
                .with_timezone(&Utc),
            duration_s: row.duration_s,
            links: parse_links(&row.links).map_err(err)?,
        });
    }
    Ok(out)
}

pub fn write_references<W: Write>(refs: &[ReferenceJourney], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in refs {
        w.serialize(ReferenceRow {
            journey_id: r.journey_id.clone(),
            from_lat: r.origin.lat,
            from_lon: r.origin.lon,
            to_lat: r.destination.lat,
            to_lon: r.destination.lon,
            vehicle: r.vehicle.to_string(),
            departure: r.departure.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            duration_s: r.duration_s,
            links: format_links(&r.links),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// One routed prediction, as written by batch routing.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub journey_id: String,
    pub t_beta_s: f64,
    pub t_chi_s: f64,
    pub distance_m: f64,
    pub links: Vec<LinkId>,
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    request_id: String,
    status: String,
    distance_m: Option<f64>,
    t_beta_s: Option<f64>,
    t_chi_s: Option<f64>,
    links: String,
}

/// Successful rows of a batch routing output; failed rows are returned by id.
pub fn read_predictions<R: Read>(input: R) -> Result<(Vec<Prediction>, Vec<String>), EvalError> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (i, row) in csv::Reader::from_reader(input).deserialize::<PredictionRow>().enumerate() {
        let row = row?;
        match (row.status.as_str(), row.t_beta_s, row.t_chi_s) {
            ("ok", Some(t_beta_s), Some(t_chi_s)) => ok.push(Prediction {
                journey_id: row.request_id,
                t_beta_s,
                t_chi_s,
                distance_m: row.distance_m.unwrap_or(0.0),
                links: parse_links(&row.links).map_err(|message| EvalError::Row { row: i + 1, message })?,
            }),
            _ => failed.push(row.request_id),
        }
    }
    Ok((ok, failed))
}

/// Arrival-time error of one journey. Negative errors are underestimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub journey_id: String,
    pub actual_s: f64,
    pub t_beta_s: f64,
    pub t_chi_s: f64,
    pub error_beta_s: f64,
    pub error_chi_s: f64,
    pub distance_m: f64,
    pub midpoint: LatLon,
    pub centre_km: f64,
    pub hour: u32,
    pub vehicle: VehicleClass,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorTable {
    pub records: Vec<ErrorRecord>,
    /// Ids present on only one side.
    pub unmatched: Vec<String>,
}

/// Pairs predictions with references by journey id, in reference order.
pub fn error_table(predictions: &[Prediction], references: &[ReferenceJourney], centre: LatLon, tz: Tz) -> ErrorTable {
    let by_id: BTreeMap<&str, &Prediction> = predictions.iter().map(|p| (p.journey_id.as_str(), p)).collect();
    let mut table = ErrorTable::default();
    let mut used = HashSet::new();
    for r in references {
        let Some(p) = by_id.get(r.journey_id.as_str()) else {
            table.unmatched.push(r.journey_id.clone());
            continue;
        };
        used.insert(r.journey_id.as_str());
        let midpoint = geographic_midpoint(r.origin, r.destination);
        table.records.push(ErrorRecord {
            journey_id: r.journey_id.clone(),
            actual_s: r.duration_s,
            t_beta_s: p.t_beta_s,
            t_chi_s: p.t_chi_s,
            error_beta_s: p.t_beta_s - r.duration_s,
            error_chi_s: p.t_chi_s - r.duration_s,
            distance_m: p.distance_m,
            midpoint,
            centre_km: haversine(centre, midpoint) / 1000.0,
            hour: r.departure.with_timezone(&tz).hour(),
            vehicle: r.vehicle,
        });
    }
    for p in predictions {
        if !used.contains(p.journey_id.as_str()) {
            table.unmatched.push(p.journey_id.clone());
        }
    }
    table
}

pub fn write_error_table<W: Write>(records: &[ErrorRecord], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "journey_id",
        "actual_s",
        "t_beta_s",
        "t_chi_s",
        "error_beta_s",
        "error_chi_s",
        "distance_m",
        "mid_lat",
        "mid_lon",
        "centre_km",
        "hour",
        "vehicle",
    ])?;
    for r in records {
        w.write_record([
            r.journey_id.clone(),
            format!("{:.3}", r.actual_s),
            format!("{:.3}", r.t_beta_s),
            format!("{:.3}", r.t_chi_s),
            format!("{:.3}", r.error_beta_s),
            format!("{:.3}", r.error_chi_s),
            format!("{:.3}", r.distance_m),
            format!("{:.6}", r.midpoint.lat),
            format!("{:.6}", r.midpoint.lon),
            format!("{:.4}", r.centre_km),
            r.hour.to_string(),
            r.vehicle.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Nearest-rank quantile of sorted values.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    /// Polygons as outer ring followed by holes.
    pub polygons: Vec<Vec<Vec<LatLon>>>,
}

impl Region {
    pub fn contains(&self, p: LatLon) -> bool {
        self.polygons
            .iter()
            .any(|rings| ring_contains(&rings[0], p) && !rings[1..].iter().any(|h| ring_contains(h, p)))
    }
}

fn ring(v: &Value) -> Result<Vec<LatLon>, String> {
    v.as_array()
        .ok_or("ring is not an array")?
        .iter()
        .map(|c| match c.as_array().map(|a| a.as_slice()) {
            Some([lon, lat, ..]) => match (lon.as_f64(), lat.as_f64()) {
                (Some(lon), Some(lat)) => Ok(LatLon::new(lat, lon)),
                _ => Err("non-numeric coordinate".to_string()),
            },
            _ => Err("coordinate is not a [lon, lat] pair".to_string()),
        })
        .collect()
}

fn polygon(v: &Value) -> Result<Vec<Vec<LatLon>>, String> {
    let rings = v
        .as_array()
        .ok_or("polygon is not an array of rings")?
        .iter()
        .map(ring)
        .collect::<Result<Vec<_>, _>>()?;
    if rings.is_empty() || rings[0].len() < 4 {
        return Err("polygon needs an outer ring of at least 4 positions".into());
    }
    Ok(rings)
}

/// Regions from a GeoJSON feature collection of Polygon or MultiPolygon
/// features, each named by its `name` property.
pub fn read_regions(text: &str) -> Result<Vec<Region>, EvalError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| EvalError::Regions(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| EvalError::Regions("missing `features` array".into()))?;
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let err = |m: String| EvalError::Regions(format!("feature {i}: {m}"));
            let name = f
                .pointer("/properties/name")
                .and_then(Value::as_str)
                .ok_or_else(|| err("missing `name` property".into()))?
                .to_string();
            let geom = f.get("geometry").ok_or_else(|| err("missing geometry".into()))?;
            let coords = geom.get("coordinates").ok_or_else(|| err("missing coordinates".into()))?;
            let polygons = match geom.get("type").and_then(Value::as_str) {
                Some("Polygon") => vec![polygon(coords).map_err(err)?],
                Some("MultiPolygon") => coords
                    .as_array()
                    .ok_or_else(|| err("MultiPolygon coordinates not an array".into()))?
                    .iter()
                    .map(|p| polygon(p).map_err(err))
                    .collect::<Result<_, _>>()?,
                other => return Err(err(format!("unsupported geometry {other:?}"))),
            };
            Ok(Region { name, polygons })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Axis {
    Duration,
    CentreDistance,
    HourOfDay,
    Region(Vec<Region>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Duration => "duration",
            Axis::CentreDistance => "centre_distance",
            Axis::HourOfDay => "hour_of_day",
            Axis::Region(_) => "region",
        }
    }

    /// Sort key and label of a record's bucket.
    fn bucket(&self, r: &ErrorRecord) -> (usize, String) {
        match self {
            Axis::Duration => {
                let b = (r.actual_s.max(0.0) / 120.0).floor() as usize;
                (b, format!("{}-{}min", 2 * b, 2 * b + 2))
            }
            Axis::CentreDistance => {
                let b = (r.centre_km.max(0.0) / 2.0).floor() as usize;
                (b, format!("{}-{}km", 2 * b, 2 * b + 2))
            }
            Axis::HourOfDay => (r.hour as usize, format!("{:02}", r.hour)),
            Axis::Region(regions) => match regions.iter().position(|g| g.contains(r.midpoint)) {
                Some(i) => (i, regions[i].name.clone()),
                None => (regions.len(), "unassigned".into()),
            },
        }
    }
}

/// Which error column to summarise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Beta,
    Chi,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketSummary {
    pub bucket: String,
    pub count: usize,
    pub mean: f64,
    /// At [`QUANTILES`].
    pub quantiles: [f64; 5],
}

/// Per-bucket mean and nearest-rank quantiles of the error, buckets in
/// axis order.
pub fn aggregate(records: &[ErrorRecord], axis: &Axis, kind: ErrorKind) -> Vec<BucketSummary> {
    let mut buckets: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        let e = match kind {
            ErrorKind::Beta => r.error_beta_s,
            ErrorKind::Chi => r.error_chi_s,
        };
        buckets.entry(axis.bucket(r)).or_default().push(e);
    }
    buckets
        .into_iter()
        .map(|((_, bucket), mut v)| {
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            BucketSummary {
                bucket,
                count: v.len(),
                mean,
                quantiles: QUANTILES.map(|p| nearest_rank(&v, p)),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(axis: &Axis, rows: &[BucketSummary], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([axis.name(), "count", "mean_s", "q10_s", "q25_s", "q50_s", "q75_s", "q90_s"])?;
    for r in rows {
        let mut rec = vec![r.bucket.clone(), r.count.to_string(), format!("{:.3}", r.mean)];
        rec.extend(r.quantiles.iter().map(|q| format!("{q:.3}")));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Histogram of coincidence values in ten 10% bins, the last closed.
pub fn coincidence_histogram(values: impl IntoIterator<Item = f64>) -> [usize; 10] {
    let mut h = [0; 10];
    for v in values {
        h[((v * 10.0).floor() as usize).min(9)] += 1;
    }
    h
}
