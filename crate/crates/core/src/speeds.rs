//! Per-link speed layers for the five link-cost metrics, their training from
//! snapped and map-matched observations, and the binary model container.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Timelike, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{LatLon, LocalFrame};
use crate::ingest::VehicleClass;
use crate::matching::LinkSpeedObservation;
use crate::network::{LinkId, RoadNetwork, RoadType};

/// Network-wide constant speed of Metric I.
pub const METRIC_I_MPH: f64 = 22.8;

/// Link-cost metric, ordered by increasing spatio-temporal granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    I,
    II,
    III,
    IV,
    V,
    /// Metric II route selection with calibrated speeds, Metric V timing.
    Hybrid,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::I => "I",
            Metric::II => "II",
            Metric::III => "III",
            Metric::IV => "IV",
            Metric::V => "V",
            Metric::Hybrid => "HYBRID",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Metric::I),
            "II" | "2" => Ok(Metric::II),
            "III" | "3" => Ok(Metric::III),
            "IV" | "4" => Ok(Metric::IV),
            "V" | "5" => Ok(Metric::V),
            "HYBRID" => Ok(Metric::Hybrid),
            _ => Err(format!("unknown metric `{s}` (expected I, II, III, IV, V or HYBRID)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeBinKind {
    HourOfDay,
    HourOfWeek,
}

impl TimeBinKind {
    pub fn bins(self) -> usize {
        match self {
            TimeBinKind::HourOfDay => 24,
            TimeBinKind::HourOfWeek => 168,
        }
    }

    /// Bin of `instant` in local civil time; Monday 00:00 starts hour-of-week 0.
    pub fn bin(self, instant: DateTime<Utc>, tz: Tz) -> usize {
        let local = instant.with_timezone(&tz);
        let hour = local.hour() as usize;
        match self {
            TimeBinKind::HourOfDay => hour,
            TimeBinKind::HourOfWeek => local.weekday().num_days_from_monday() as usize * 24 + hour,
        }
    }
}

/// Streaming harmonic mean: count over the sum of reciprocals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HarmonicAccumulator {
    sum_reciprocal: f64,
    count: u64,
}

impl HarmonicAccumulator {
    /// Adds a positive finite value; anything else is ignored and `false` returned.
    pub fn push(&mut self, value: f64) -> bool {
        if value > 0.0 && value.is_finite() {
            self.sum_reciprocal += value.recip();
            self.count += 1;
            true
        } else {
            false
        }
    }

    pub fn merge(&mut self, other: &HarmonicAccumulator) {
        self.sum_reciprocal += other.sum_reciprocal;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn sum_reciprocal(&self) -> f64 {
        self.sum_reciprocal
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.count as f64 / self.sum_reciprocal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub speed_mph: f64,
    pub count: u64,
}

/// Per-link (vehicle class × time bin) speeds. Empty cells carry no speed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedMatrix {
    kind: TimeBinKind,
    cells: Vec<Option<Cell>>,
}

impl SpeedMatrix {
    pub fn new(kind: TimeBinKind) -> Self {
        Self {
            kind,
            cells: vec![None; VehicleClass::ALL.len() * kind.bins()],
        }
    }

    pub fn kind(&self) -> TimeBinKind {
        self.kind
    }

    pub fn get(&self, vehicle: VehicleClass, bin: usize) -> Option<Cell> {
        self.cells.get(vehicle.index() * self.kind.bins() + bin).copied().flatten()
    }

    pub fn set(&mut self, vehicle: VehicleClass, bin: usize, cell: Option<Cell>) {
        let i = vehicle.index() * self.kind.bins() + bin;
        self.cells[i] = cell;
    }

    /// Populated cells as (vehicle, bin, cell).
    pub fn populated(&self) -> impl Iterator<Item = (VehicleClass, usize, Cell)> + '_ {
        let bins = self.kind.bins();
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.map(|c| (VehicleClass::ALL[i / bins], i % bins, c)))
    }
}

pub type SpeedLayer = BTreeMap<LinkId, SpeedMatrix>;

/// Road-type speed table plus junction delay, used by Metric II.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadSpeedTable {
    /// Indexed by [`RoadType::index`].
    pub speeds_mph: [f64; 9],
    pub junction_delay_s: f64,
}

impl RoadSpeedTable {
    /// Speeds used by the London Ambulance Service routing engine.
    pub const LAS: RoadSpeedTable = RoadSpeedTable {
        speeds_mph: [35.0, 29.0, 24.0, 19.0, 14.0, 5.0, 5.0, 3.0, 2.0],
        junction_delay_s: 2.5,
    };

    /// Speeds re-optimised with Nelder–Mead for route similarity.
    pub const NELDER_MEAD: RoadSpeedTable = RoadSpeedTable {
        speeds_mph: [35.47, 29.39, 26.83, 18.97, 15.51, 8.37, 6.84, 5.31, 5.37],
        junction_delay_s: 4.33,
    };

    pub fn speed(&self, road_type: RoadType) -> f64 {
        self.speeds_mph[road_type.index()]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["road_type", "mph"])?;
        for t in RoadType::ALL {
            w.write_record([t.name().to_string(), self.speed(t).to_string()])?;
        }
        w.write_record(["junction_delay_s".to_string(), self.junction_delay_s.to_string()])?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<RoadSpeedTable, String> {
        let mut r = csv::Reader::from_reader(input);
        let mut speeds = [None; 9];
        let mut delay = None;
        for row in r.records() {
            let row = row.map_err(|e| e.to_string())?;
            if row.len() != 2 {
                return Err(format!("expected 2 fields, got {}", row.len()));
            }
            let value: f64 = row[1].trim().parse().map_err(|_| format!("bad number `{}`", &row[1]))?;
            if !(value.is_finite() && value >= 0.0) {
                return Err(format!("invalid value {value} for `{}`", &row[0]));
            }
            if &row[0] == "junction_delay_s" {
                delay = Some(value);
            } else {
                let t: RoadType = row[0].parse()?;
                if value <= 0.0 {
                    return Err(format!("speed for {t} must be positive"));
                }
                speeds[t.index()] = Some(value);
            }
        }
        let mut speeds_mph = [0.0; 9];
        for t in RoadType::ALL {
            speeds_mph[t.index()] = speeds[t.index()].ok_or_else(|| format!("missing speed for {t}"))?;
        }
        Ok(RoadSpeedTable {
            speeds_mph,
            junction_delay_s: delay.ok_or("missing junction_delay_s row")?,
        })
    }
}

/// Which level of the lookup chain produced a speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SpeedSource {
    Constant,
    RoadType,
    MetricIII,
    MetricIV,
    MetricV,
    FallbackIV,
    FallbackIII,
    FallbackII,
}

impl SpeedSource {
    pub fn tag(self) -> &'static str {
        match self {
            SpeedSource::Constant => "I",
            SpeedSource::RoadType => "II",
            SpeedSource::MetricIII => "III",
            SpeedSource::MetricIV => "IV",
            SpeedSource::MetricV => "V",
            SpeedSource::FallbackIV => "fallback:IV",
            SpeedSource::FallbackIII => "fallback:III",
            SpeedSource::FallbackII => "fallback:II",
        }
    }
}

impl fmt::Display for SpeedSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub train_start: Option<DateTime<Utc>>,
    pub train_end: Option<DateTime<Utc>>,
    pub snapped_observations: u64,
    pub matched_observations: u64,
    pub zero_speed_excluded: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedModel {
    pub metric_i_mph: f64,
    pub metric_ii: RoadSpeedTable,
    /// Metric II table used for hybrid route selection.
    pub hybrid_selection: RoadSpeedTable,
    pub metric_iii: SpeedLayer,
    pub metric_iv: SpeedLayer,
    pub metric_v: SpeedLayer,
    pub timezone: Tz,
    pub provenance: ModelProvenance,
}

impl Default for SpeedModel {
    fn default() -> Self {
        Self {
            metric_i_mph: METRIC_I_MPH,
            metric_ii: RoadSpeedTable::LAS,
            hybrid_selection: RoadSpeedTable::NELDER_MEAD,
            metric_iii: BTreeMap::new(),
            metric_iv: BTreeMap::new(),
            metric_v: BTreeMap::new(),
            timezone: chrono_tz::Europe::London,
            provenance: ModelProvenance::default(),
        }
    }
}

impl SpeedModel {
    pub fn layer(&self, metric: Metric) -> Option<&SpeedLayer> {
        match metric {
            Metric::III => Some(&self.metric_iii),
            Metric::IV => Some(&self.metric_iv),
            Metric::V | Metric::Hybrid => Some(&self.metric_v),
            Metric::I | Metric::II => None,
        }
    }

    fn cell(layer: &SpeedLayer, link: LinkId, vehicle: VehicleClass, instant: DateTime<Utc>, tz: Tz) -> Option<f64> {
        let m = layer.get(&link)?;
        m.get(vehicle, m.kind().bin(instant, tz)).map(|c| c.speed_mph)
    }

    /// Speed of `link` under `metric`, with the level that answered. Total:
    /// Metric V falls back to IV, then III, then the road-type table; IV
    /// falls back to III then the table; III to the table. Hybrid answers
    /// as Metric V.
    pub fn link_speed(
        &self,
        net: &RoadNetwork,
        metric: Metric,
        link: LinkId,
        vehicle: VehicleClass,
        instant: DateTime<Utc>,
    ) -> (f64, SpeedSource) {
        self.link_speed_with_table(net, metric, link, vehicle, instant, &self.metric_ii)
    }

    /// As [`Self::link_speed`] with an explicit Metric II table.
    pub fn link_speed_with_table(
        &self,
        net: &RoadNetwork,
        metric: Metric,
        link: LinkId,
        vehicle: VehicleClass,
        instant: DateTime<Utc>,
        table: &RoadSpeedTable,
    ) -> (f64, SpeedSource) {
        let tz = self.timezone;
        let road = || table.speed(net.link(link).road_type);
        let iii = || Self::cell(&self.metric_iii, link, vehicle, instant, tz);
        let iv = || Self::cell(&self.metric_iv, link, vehicle, instant, tz);
        match metric {
            Metric::I => (self.metric_i_mph, SpeedSource::Constant),
            Metric::II => (road(), SpeedSource::RoadType),
            Metric::III => iii()
                .map(|s| (s, SpeedSource::MetricIII))
                .unwrap_or_else(|| (road(), SpeedSource::FallbackII)),
            Metric::IV => iv()
                .map(|s| (s, SpeedSource::MetricIV))
                .or_else(|| iii().map(|s| (s, SpeedSource::FallbackIII)))
                .unwrap_or_else(|| (road(), SpeedSource::FallbackII)),
            Metric::V | Metric::Hybrid => Self::cell(&self.metric_v, link, vehicle, instant, tz)
                .map(|s| (s, SpeedSource::MetricV))
                .or_else(|| iv().map(|s| (s, SpeedSource::FallbackIV)))
                .or_else(|| iii().map(|s| (s, SpeedSource::FallbackIII)))
                .unwrap_or_else(|| (road(), SpeedSource::FallbackII)),
        }
    }
}

/// A raw fix snapped to its nearest link, carrying the reported speed.
#[derive(Debug, Clone, PartialEq)]
pub struct SnappedObservation {
    pub link: LinkId,
    pub position: LatLon,
    pub vehicle: VehicleClass,
    pub timestamp: DateTime<Utc>,
    pub speed_mph: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// Half side of the pooling box centred at each link midpoint.
    pub box_half_side_m: f64,
    pub timezone: Tz,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            box_half_side_m: 250.0,
            timezone: chrono_tz::Europe::London,
        }
    }
}

/// Mergeable training state of one matrix layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAccumulator {
    kind: TimeBinKind,
    cells: BTreeMap<LinkId, Vec<HarmonicAccumulator>>,
}

impl LayerAccumulator {
    pub fn new(kind: TimeBinKind) -> Self {
        Self {
            kind,
            cells: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, link: LinkId, vehicle: VehicleClass, bin: usize, speed_mph: f64) -> bool {
        let bins = self.kind.bins();
        let cells = self
            .cells
            .entry(link)
            .or_insert_with(|| vec![HarmonicAccumulator::default(); VehicleClass::ALL.len() * bins]);
        cells[vehicle.index() * bins + bin].push(speed_mph)
    }

    pub fn merge(&mut self, other: &LayerAccumulator) {
        assert_eq!(self.kind, other.kind, "merging layers of different bin kinds");
        for (link, acc) in &other.cells {
            match self.cells.get_mut(link) {
                Some(mine) => mine.iter_mut().zip(acc).for_each(|(a, b)| a.merge(b)),
                None => {
                    self.cells.insert(*link, acc.clone());
                }
            }
        }
    }

    pub fn accumulator(&self, link: LinkId, vehicle: VehicleClass, bin: usize) -> Option<&HarmonicAccumulator> {
        self.cells.get(&link).map(|c| &c[vehicle.index() * self.kind.bins() + bin])
    }

    pub fn finish(&self) -> SpeedLayer {
        let bins = self.kind.bins();
        self.cells
            .iter()
            .filter_map(|(link, accs)| {
                let mut m = SpeedMatrix::new(self.kind);
                let mut any = false;
                for (i, acc) in accs.iter().enumerate() {
                    if let Some(speed_mph) = acc.mean() {
                        m.set(VehicleClass::ALL[i / bins], i % bins, Some(Cell { speed_mph, count: acc.count() }));
                        any = true;
                    }
                }
                any.then_some((*link, m))
            })
            .collect()
    }
}

/// Link midpoints bucketed on a degree grid for box queries.
struct MidpointIndex {
    cell_lat: f64,
    cell_lon: f64,
    buckets: HashMap<(i64, i64), Vec<(LinkId, LatLon)>>,
}

impl MidpointIndex {
    fn new(net: &RoadNetwork, half_side_m: f64) -> Self {
        let reference = net.nodes().first().map(|n| n.position).unwrap_or(LatLon::new(0.0, 0.0));
        let b = LocalFrame::new(reference).square_bounds(half_side_m.max(1.0));
        let (cell_lat, cell_lon) = (b.max_lat - b.min_lat, b.max_lon - b.min_lon);
        let mut buckets: HashMap<(i64, i64), Vec<(LinkId, LatLon)>> = HashMap::new();
        for l in net.links() {
            let m = l.midpoint();
            let key = ((m.lat / cell_lat).floor() as i64, (m.lon / cell_lon).floor() as i64);
            buckets.entry(key).or_default().push((l.id, m));
        }
        Self {
            cell_lat,
            cell_lon,
            buckets,
        }
    }

    /// Links whose midpoint-centred square of half side `half` contains `p`.
    fn boxes_containing(&self, p: LatLon, half: f64) -> Vec<LinkId> {
        // Frames at nearby midpoints differ from one at `p` by well under 1%.
        let probe = LocalFrame::new(p).square_bounds(half * 1.02);
        let (y0, y1) = ((probe.min_lat / self.cell_lat).floor() as i64, (probe.max_lat / self.cell_lat).floor() as i64);
        let (x0, x1) = ((probe.min_lon / self.cell_lon).floor() as i64, (probe.max_lon / self.cell_lon).floor() as i64);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if let Some(items) = self.buckets.get(&(y, x)) {
                    for (id, m) in items {
                        if LocalFrame::new(*m).square_bounds(half).contains(p) {
                            out.push(*id);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourhoodAccumulators {
    pub hour_of_day: LayerAccumulator,
    pub hour_of_week: LayerAccumulator,
    pub zero_speed_excluded: u64,
    pub observations: u64,
}

impl NeighbourhoodAccumulators {
    pub fn new() -> Self {
        Self {
            hour_of_day: LayerAccumulator::new(TimeBinKind::HourOfDay),
            hour_of_week: LayerAccumulator::new(TimeBinKind::HourOfWeek),
            zero_speed_excluded: 0,
            observations: 0,
        }
    }

    pub fn merge(&mut self, other: &NeighbourhoodAccumulators) {
        self.hour_of_day.merge(&other.hour_of_day);
        self.hour_of_week.merge(&other.hour_of_week);
        self.zero_speed_excluded += other.zero_speed_excluded;
        self.observations += other.observations;
    }
}

impl Default for NeighbourhoodAccumulators {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulates snapped reported speeds into the box-pooled hour-of-day
/// (Metric III) and hour-of-week (Metric IV) layers. Each observation counts
/// towards every link whose midpoint-centred box contains it and whose road
/// type equals that of the observation's snapped link.
pub fn accumulate_metric_iii_iv(
    net: &RoadNetwork,
    observations: &[SnappedObservation],
    options: &TrainOptions,
) -> NeighbourhoodAccumulators {
    let index = MidpointIndex::new(net, options.box_half_side_m);
    let mut acc = NeighbourhoodAccumulators::new();
    for obs in observations {
        acc.observations += 1;
        if !(obs.speed_mph > 0.0) {
            acc.zero_speed_excluded += 1;
            continue;
        }
        let road_type = net.link(obs.link).road_type;
        let hod = TimeBinKind::HourOfDay.bin(obs.timestamp, options.timezone);
        let how = TimeBinKind::HourOfWeek.bin(obs.timestamp, options.timezone);
        for link in index.boxes_containing(obs.position, options.box_half_side_m) {
            if net.link(link).road_type == road_type {
                acc.hour_of_day.push(link, obs.vehicle, hod, obs.speed_mph);
                acc.hour_of_week.push(link, obs.vehicle, how, obs.speed_mph);
            }
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourhoodLayers {
    pub metric_iii: SpeedLayer,
    pub metric_iv: SpeedLayer,
    pub zero_speed_excluded: u64,
}

pub fn train_metric_iii_iv(net: &RoadNetwork, observations: &[SnappedObservation], options: &TrainOptions) -> NeighbourhoodLayers {
    let acc = accumulate_metric_iii_iv(net, observations, options);
    if acc.zero_speed_excluded > 0 {
        log::info!("excluded {} zero-speed observations", acc.zero_speed_excluded);
    }
    NeighbourhoodLayers {
        metric_iii: acc.hour_of_day.finish(),
        metric_iv: acc.hour_of_week.finish(),
        zero_speed_excluded: acc.zero_speed_excluded,
    }
}

pub fn accumulate_metric_v(observations: &[LinkSpeedObservation], timezone: Tz) -> LayerAccumulator {
    let mut acc = LayerAccumulator::new(TimeBinKind::HourOfWeek);
    for o in observations {
        let bin = TimeBinKind::HourOfWeek.bin(o.entry, timezone);
        acc.push(o.link, o.vehicle, bin, o.speed_mph);
    }
    acc
}

/// Per-link hour-of-week harmonic means of the link's own traversal speeds.
pub fn train_metric_v(observations: &[LinkSpeedObservation], timezone: Tz) -> SpeedLayer {
    accumulate_metric_v(observations, timezone).finish()
}

// ---------------------------------------------------------------------------
// Binary container

pub const MODEL_MAGIC: &[u8; 4] = b"BLSM";
pub const MODEL_VERSION: u32 = 1;

const SECTION_HEADER: u8 = 1;
const SECTION_METRIC_II: u8 = 2;
const SECTION_HYBRID: u8 = 3;
const SECTION_III: u8 = 4;
const SECTION_IV: u8 = 5;
const SECTION_V: u8 = 6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("not a speed model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, ModelError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelError::Corrupt("invalid UTF-8".into()))
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn encode_table(e: &mut Encoder, t: &RoadSpeedTable) {
    e.f64(t.junction_delay_s);
    for s in t.speeds_mph {
        e.f64(s);
    }
}

fn decode_table(d: &mut Decoder) -> Result<RoadSpeedTable, ModelError> {
    let junction_delay_s = d.f64()?;
    let mut speeds_mph = [0.0; 9];
    for s in &mut speeds_mph {
        *s = d.f64()?;
    }
    Ok(RoadSpeedTable {
        speeds_mph,
        junction_delay_s,
    })
}

fn encode_layer(e: &mut Encoder, layer: &SpeedLayer) {
    e.u32(layer.len() as u32);
    for (link, m) in layer {
        e.u32(link.0);
        e.u8(match m.kind() {
            TimeBinKind::HourOfDay => 0,
            TimeBinKind::HourOfWeek => 1,
        });
        let cells: Vec<_> = m.populated().collect();
        e.u32(cells.len() as u32);
        for (v, bin, c) in cells {
            e.u8(v.index() as u8);
            e.u16(bin as u16);
            e.f64(c.speed_mph);
            e.u64(c.count);
        }
    }
}

fn decode_layer(d: &mut Decoder) -> Result<SpeedLayer, ModelError> {
    let n = d.u32()?;
    let mut layer = BTreeMap::new();
    for _ in 0..n {
        let link = LinkId(d.u32()?);
        let kind = match d.u8()? {
            0 => TimeBinKind::HourOfDay,
            1 => TimeBinKind::HourOfWeek,
            k => return Err(ModelError::Corrupt(format!("unknown bin kind {k}"))),
        };
        let mut m = SpeedMatrix::new(kind);
        for _ in 0..d.u32()? {
            let v = *VehicleClass::ALL
                .get(d.u8()? as usize)
                .ok_or_else(|| ModelError::Corrupt("unknown vehicle class".into()))?;
            let bin = d.u16()? as usize;
            if bin >= kind.bins() {
                return Err(ModelError::Corrupt(format!("bin {bin} out of range")));
            }
            let speed_mph = d.f64()?;
            let count = d.u64()?;
            m.set(v, bin, Some(Cell { speed_mph, count }));
        }
        layer.insert(link, m);
    }
    Ok(layer)
}

fn section(out: &mut Encoder, tag: u8, body: Encoder) {
    out.u8(tag);
    out.u64(body.0.len() as u64);
    out.0.extend_from_slice(&body.0);
}

pub fn encode_model(model: &SpeedModel) -> Vec<u8> {
    let mut out = Encoder(Vec::new());
    out.0.extend_from_slice(MODEL_MAGIC);
    out.u32(MODEL_VERSION);

    let mut h = Encoder(Vec::new());
    h.f64(model.metric_i_mph);
    h.str(model.timezone.name());
    let p = &model.provenance;
    h.i64(p.train_start.map_or(i64::MIN, |t| t.timestamp()));
    h.i64(p.train_end.map_or(i64::MIN, |t| t.timestamp()));
    h.u64(p.snapped_observations);
    h.u64(p.matched_observations);
    h.u64(p.zero_speed_excluded);
    section(&mut out, SECTION_HEADER, h);

    for (tag, table) in [(SECTION_METRIC_II, &model.metric_ii), (SECTION_HYBRID, &model.hybrid_selection)] {
        let mut e = Encoder(Vec::new());
        encode_table(&mut e, table);
        section(&mut out, tag, e);
    }
    for (tag, layer) in [(SECTION_III, &model.metric_iii), (SECTION_IV, &model.metric_iv), (SECTION_V, &model.metric_v)] {
        let mut e = Encoder(Vec::new());
        encode_layer(&mut e, layer);
        section(&mut out, tag, e);
    }
    let crc = crc32fast::hash(&out.0);
    out.u32(crc);
    out.0
}

fn instant(secs: i64) -> Result<Option<DateTime<Utc>>, ModelError> {
    if secs == i64::MIN {
        return Ok(None);
    }
    DateTime::from_timestamp(secs, 0)
        .map(Some)
        .ok_or_else(|| ModelError::Corrupt(format!("timestamp {secs} out of range")))
}

pub fn decode_model(bytes: &[u8]) -> Result<SpeedModel, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(ModelError::Corrupt("file too short".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(ModelError::Version {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }

    let mut d = Decoder { buf: body, pos: 8 };
    let mut model = SpeedModel::default();
    let mut seen = Vec::new();
    while !d.done() {
        let tag = d.u8()?;
        let len = d.u64()? as usize;
        let mut s = Decoder { buf: d.take(len)?, pos: 0 };
        match tag {
            SECTION_HEADER => {
                model.metric_i_mph = s.f64()?;
                let tz = s.str()?;
                model.timezone = tz.parse().map_err(|_| ModelError::Corrupt(format!("unknown timezone `{tz}`")))?;
                model.provenance = ModelProvenance {
                    train_start: instant(s.i64()?)?,
                    train_end: instant(s.i64()?)?,
                    snapped_observations: s.u64()?,
                    matched_observations: s.u64()?,
                    zero_speed_excluded: s.u64()?,
                };
            }
            SECTION_METRIC_II => model.metric_ii = decode_table(&mut s)?,
            SECTION_HYBRID => model.hybrid_selection = decode_table(&mut s)?,
            SECTION_III => model.metric_iii = decode_layer(&mut s)?,
            SECTION_IV => model.metric_iv = decode_layer(&mut s)?,
            SECTION_V => model.metric_v = decode_layer(&mut s)?,
            // Unknown sections from compatible writers are skipped.
            _ => continue,
        }
        if !s.done() {
            return Err(ModelError::Corrupt(format!("trailing bytes in section {tag}")));
        }
        seen.push(tag);
    }
    for required in [SECTION_HEADER, SECTION_METRIC_II, SECTION_HYBRID, SECTION_III, SECTION_IV, SECTION_V] {
        if !seen.contains(&required) {
            return Err(ModelError::Corrupt(format!("missing section {required}")));
        }
    }
    Ok(model)
}

pub fn save_model<W: Write>(model: &SpeedModel, mut out: W) -> Result<(), ModelError> {
    out.write_all(&encode_model(model))?;
    out.flush()?;
    Ok(())
}

pub fn load_model<R: Read>(mut input: R) -> Result<SpeedModel, ModelError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

/// Dumps one matrix layer as CSV rows (link_id, vehicle, bin, speed_mph, n).
pub fn write_layer_csv<W: Write>(layer: &SpeedLayer, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["link_id", "vehicle", "bin", "speed_mph", "n"])?;
    for (link, m) in layer {
        for (v, bin, c) in m.populated() {
            w.write_record([
                link.to_string(),
                v.to_string(),
                bin.to_string(),
                c.speed_mph.to_string(),
                c.count.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
