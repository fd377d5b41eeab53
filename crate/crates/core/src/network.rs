//! The blue-light road network: a directed graph of intersections and road
//! links where manoeuvres that are legal only for emergency vehicles are
//! represented as ordinary links flagged `civilian_forbidden`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geo::{self, DegBox, LatLon, LocalFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl LinkId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RoadType {
    Motorway,
    ARoad,
    BRoad,
    MinorRoad,
    LocalStreet,
    PrivatePublic,
    PrivateRestricted,
    Alley,
    PedestrianisedStreet,
}

impl RoadType {
    pub const ALL: [RoadType; 9] = [
        RoadType::Motorway,
        RoadType::ARoad,
        RoadType::BRoad,
        RoadType::MinorRoad,
        RoadType::LocalStreet,
        RoadType::PrivatePublic,
        RoadType::PrivateRestricted,
        RoadType::Alley,
        RoadType::PedestrianisedStreet,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RoadType::Motorway => "Motorway",
            RoadType::ARoad => "ARoad",
            RoadType::BRoad => "BRoad",
            RoadType::MinorRoad => "MinorRoad",
            RoadType::LocalStreet => "LocalStreet",
            RoadType::PrivatePublic => "PrivatePublic",
            RoadType::PrivateRestricted => "PrivateRestricted",
            RoadType::Alley => "Alley",
            RoadType::PedestrianisedStreet => "PedestrianisedStreet",
        }
    }
}

impl fmt::Display for RoadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoadType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoadType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown road type `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    /// Identifier used in the source file.
    pub key: String,
    pub position: LatLon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadLink {
    pub id: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    pub length_m: f64,
    pub road_type: RoadType,
    pub geometry: Vec<LatLon>,
    pub civilian_forbidden: bool,
    pub source_way: String,
    /// The opposite direction of the same source road, when it exists.
    pub twin: Option<LinkId>,
}

impl RoadLink {
    pub fn midpoint(&self) -> LatLon {
        geo::point_along(&self.geometry, self.length_m / 2.0)
    }
}

/// Traversal rules of an undirected source road.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WayFlags {
    /// Civilian traffic may only travel from `from` to `to`.
    pub oneway: bool,
    /// Contraflow permitted under blue lights (keep-left bollard, no-right-turn, ...).
    pub bluelight_contraflow: bool,
    /// Bus-only link.
    pub bus_lane: bool,
    /// Pedestrian precinct.
    pub pedestrian: bool,
}

impl WayFlags {
    fn exempted(&self) -> bool {
        self.bluelight_contraflow || self.bus_lane || self.pedestrian
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceWay {
    pub way_id: String,
    pub road_type: RoadType,
    pub flags: WayFlags,
    pub forward: LinkId,
    pub reverse: Option<LinkId>,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("feature {index} ({name}): {message}")]
    Feature {
        index: usize,
        name: String,
        message: String,
    },
    #[error("feature {index} ({way_id}) references unknown node `{node}`")]
    DanglingNode {
        index: usize,
        way_id: String,
        node: String,
    },
    #[error("feature {index} ({way_id}) has non-positive length {length_m} m")]
    BadLength {
        index: usize,
        way_id: String,
        length_m: f64,
    },
    #[error("duplicate {kind} `{key}`")]
    Duplicate { kind: &'static str, key: String },
    #[error("network dump row {row}: {message}")]
    Dump { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One undirected road as handed to [`NetworkBuilder::add_way`].
#[derive(Debug, Clone)]
pub struct WaySpec {
    pub way_id: String,
    pub from: String,
    pub to: String,
    pub road_type: RoadType,
    pub flags: WayFlags,
    /// Full geometry including both endpoints; `None` means a straight line.
    pub geometry: Option<Vec<LatLon>>,
    /// Declared length; must agree with the geometry within 0.1%.
    pub length_m: Option<f64>,
}

const ENDPOINT_TOLERANCE_M: f64 = 1.0;
const LENGTH_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Default)]
pub struct NetworkBuilder {
    nodes: Vec<Node>,
    node_keys: HashMap<String, NodeId>,
    links: Vec<RoadLink>,
    ways: Vec<SourceWay>,
    way_keys: HashMap<String, usize>,
}

impl NetworkBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, key: impl Into<String>, position: LatLon) -> Result<NodeId, NetworkError> {
        let key = key.into();
        if self.node_keys.contains_key(&key) {
            return Err(NetworkError::Duplicate { kind: "node", key });
        }
        let id = NodeId(self.nodes.len() as u32);
        self.node_keys.insert(key.clone(), id);
        self.nodes.push(Node { id, key, position });
        Ok(id)
    }

    fn add_way_at(&mut self, index: usize, spec: WaySpec) -> Result<(), NetworkError> {
        let feature_err = |message: String| NetworkError::Feature {
            index,
            name: spec.way_id.clone(),
            message,
        };
        if self.way_keys.contains_key(&spec.way_id) {
            return Err(NetworkError::Duplicate {
                kind: "way",
                key: spec.way_id.clone(),
            });
        }
        let node = |key: &str| {
            self.node_keys.get(key).copied().ok_or_else(|| NetworkError::DanglingNode {
                index,
                way_id: spec.way_id.clone(),
                node: key.to_string(),
            })
        };
        let from = node(&spec.from)?;
        let to = node(&spec.to)?;
        let (a, b) = (self.nodes[from.index()].position, self.nodes[to.index()].position);
        let mut geometry = spec.geometry.clone().unwrap_or_else(|| vec![a, b]);
        if geometry.len() < 2 {
            return Err(feature_err("geometry needs at least two coordinates".into()));
        }
        if geometry.iter().any(|p| !p.is_valid()) {
            return Err(feature_err("coordinate out of range".into()));
        }
        let n = geometry.len();
        if geo::haversine(geometry[0], a) > ENDPOINT_TOLERANCE_M {
            return Err(feature_err(format!("geometry does not start at node `{}`", spec.from)));
        }
        if geo::haversine(geometry[n - 1], b) > ENDPOINT_TOLERANCE_M {
            return Err(feature_err(format!("geometry does not end at node `{}`", spec.to)));
        }
        geometry[0] = a;
        geometry[n - 1] = b;
        let length_m = geo::polyline_length(&geometry);
        if let Some(declared) = spec.length_m {
            if !(declared > 0.0) {
                return Err(NetworkError::BadLength {
                    index,
                    way_id: spec.way_id.clone(),
                    length_m: declared,
                });
            }
            if (declared - length_m).abs() > LENGTH_TOLERANCE * length_m {
                return Err(feature_err(format!(
                    "declared length {declared} m disagrees with geometry length {length_m:.3} m"
                )));
            }
        }
        if !(length_m > 0.0) {
            return Err(NetworkError::BadLength {
                index,
                way_id: spec.way_id.clone(),
                length_m,
            });
        }

        let flags = spec.flags.clone();
        let forward_id = LinkId(self.links.len() as u32);
        let has_reverse = !flags.oneway || flags.exempted();
        let restricted = flags.bus_lane || flags.pedestrian;
        let reverse_id = has_reverse.then(|| LinkId(forward_id.0 + 1));
        let mut reversed = geometry.clone();
        reversed.reverse();
        self.links.push(RoadLink {
            id: forward_id,
            from,
            to,
            length_m,
            road_type: spec.road_type,
            geometry,
            civilian_forbidden: restricted,
            source_way: spec.way_id.clone(),
            twin: reverse_id,
        });
        if let Some(reverse_id) = reverse_id {
            self.links.push(RoadLink {
                id: reverse_id,
                from: to,
                to: from,
                length_m: geo::polyline_length(&reversed),
                road_type: spec.road_type,
                geometry: reversed,
                civilian_forbidden: restricted || flags.oneway,
                source_way: spec.way_id.clone(),
                twin: Some(forward_id),
            });
        }
        self.way_keys.insert(spec.way_id.clone(), self.ways.len());
        self.ways.push(SourceWay {
            way_id: spec.way_id,
            road_type: spec.road_type,
            flags,
            forward: forward_id,
            reverse: reverse_id,
        });
        Ok(())
    }

    pub fn add_way(&mut self, spec: WaySpec) -> Result<(), NetworkError> {
        let index = self.ways.len();
        self.add_way_at(index, spec)
    }

    pub fn build(self) -> RoadNetwork {
        let mut outgoing = vec![Vec::new(); self.nodes.len()];
        for link in &self.links {
            outgoing[link.from.index()].push(link.id);
        }
        let index = LinkGrid::new(&self.links);
        log::info!(
            "built network: {} nodes, {} directed links from {} source roads",
            self.nodes.len(),
            self.links.len(),
            self.ways.len()
        );
        RoadNetwork {
            nodes: self.nodes,
            links: self.links,
            ways: self.ways,
            outgoing,
            index,
        }
    }
}

/// Uniform grid over link segment bounding boxes, in degree space.
#[derive(Debug, Clone)]
struct LinkGrid {
    bounds: DegBox,
    cell_lat: f64,
    cell_lon: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<LinkId>>,
}

const GRID_CELL_M: f64 = 200.0;
const MAX_GRID_SIDE: usize = 2048;

impl LinkGrid {
    fn new(links: &[RoadLink]) -> Self {
        let all: Vec<LatLon> = links.iter().flat_map(|l| l.geometry.iter().copied()).collect();
        let bounds = DegBox::around(&all).unwrap_or(DegBox {
            min_lat: 0.0,
            max_lat: 0.0,
            min_lon: 0.0,
            max_lon: 0.0,
        });
        let centre = LatLon::new((bounds.min_lat + bounds.max_lat) / 2.0, (bounds.min_lon + bounds.max_lon) / 2.0);
        let cell = LocalFrame::new(centre).square_bounds(GRID_CELL_M / 2.0);
        let nx = (((bounds.max_lon - bounds.min_lon) / (cell.max_lon - cell.min_lon)).ceil() as usize).clamp(1, MAX_GRID_SIDE);
        let ny = (((bounds.max_lat - bounds.min_lat) / (cell.max_lat - cell.min_lat)).ceil() as usize).clamp(1, MAX_GRID_SIDE);
        let cell_lon = ((bounds.max_lon - bounds.min_lon) / nx as f64).max(f64::MIN_POSITIVE);
        let cell_lat = ((bounds.max_lat - bounds.min_lat) / ny as f64).max(f64::MIN_POSITIVE);
        let mut grid = LinkGrid {
            bounds,
            cell_lat,
            cell_lon,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        };
        for link in links {
            for w in link.geometry.windows(2) {
                let b = DegBox::around(w).expect("two points");
                let (x0, x1, y0, y1) = grid.cell_range(&b);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let cell = &mut grid.cells[y * nx + x];
                        if cell.last() != Some(&link.id) {
                            cell.push(link.id);
                        }
                    }
                }
            }
        }
        grid
    }

    fn cell_range(&self, b: &DegBox) -> (usize, usize, usize, usize) {
        let cx = |lon: f64| (((lon - self.bounds.min_lon) / self.cell_lon).floor().max(0.0) as usize).min(self.nx - 1);
        let cy = |lat: f64| (((lat - self.bounds.min_lat) / self.cell_lat).floor().max(0.0) as usize).min(self.ny - 1);
        (cx(b.min_lon), cx(b.max_lon), cy(b.min_lat), cy(b.max_lat))
    }

    fn candidates(&self, b: &DegBox) -> Vec<LinkId> {
        if !b.overlaps(&self.bounds) {
            return Vec::new();
        }
        let (x0, x1, y0, y1) = self.cell_range(b);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                out.extend_from_slice(&self.cells[y * self.nx + x]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// A link candidate near a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkProjection {
    pub link: LinkId,
    pub distance_m: f64,
    /// Distance from the link's start along its geometry, metres.
    pub offset_m: f64,
    pub point: LatLon,
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    nodes: Vec<Node>,
    links: Vec<RoadLink>,
    ways: Vec<SourceWay>,
    outgoing: Vec<Vec<LinkId>>,
    index: LinkGrid,
}

impl RoadNetwork {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[RoadLink] {
        &self.links
    }

    pub fn ways(&self) -> &[SourceWay] {
        &self.ways
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn link(&self, id: LinkId) -> &RoadLink {
        &self.links[id.index()]
    }

    pub fn get_link(&self, id: LinkId) -> Option<&RoadLink> {
        self.links.get(id.index())
    }

    pub fn node_by_key(&self, key: &str) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.key == key).map(|n| n.id)
    }

    pub fn outgoing(&self, node: NodeId) -> &[LinkId] {
        &self.outgoing[node.index()]
    }

    /// Whether consecutive links share a node in travel direction.
    pub fn is_connected_path(&self, links: &[LinkId]) -> bool {
        links.iter().all(|l| l.index() < self.links.len())
            && links.windows(2).all(|w| self.link(w[0]).to == self.link(w[1]).from)
    }

    /// Links whose geometry touches the metric square of half side
    /// `half_side_m` centred on `center`. Sorted by id.
    pub fn links_in_box(&self, center: LatLon, half_side_m: f64) -> Vec<LinkId> {
        let b = LocalFrame::new(center).square_bounds(half_side_m);
        self.index
            .candidates(&b)
            .into_iter()
            .filter(|&id| {
                self.link(id)
                    .geometry
                    .windows(2)
                    .any(|w| b.intersects_segment(w[0], w[1]))
            })
            .collect()
    }

    pub fn project(&self, link: LinkId, point: LatLon) -> LinkProjection {
        let pr = geo::project_onto_polyline(point, &self.link(link).geometry);
        LinkProjection {
            link,
            distance_m: pr.distance,
            offset_m: pr.offset.min(self.link(link).length_m),
            point: pr.point,
        }
    }

    /// Links within `radius_m` of `point`, nearest first (ties by id), at most `limit`.
    pub fn candidates(&self, point: LatLon, radius_m: f64, limit: usize) -> Vec<LinkProjection> {
        let mut found: Vec<LinkProjection> = self
            .links_in_box(point, radius_m)
            .into_iter()
            .map(|id| self.project(id, point))
            .filter(|p| p.distance_m <= radius_m)
            .collect();
        found.sort_by(|a, b| a.distance_m.total_cmp(&b.distance_m).then(a.link.cmp(&b.link)));
        found.truncate(limit);
        found
    }

    /// Nearest link by perpendicular distance; ties go to the smaller id.
    /// `None` only for an empty network.
    pub fn nearest_link(&self, point: LatLon) -> Option<(LinkId, f64)> {
        if self.links.is_empty() {
            return None;
        }
        let extent = geo::haversine(
            LatLon::new(self.index.bounds.min_lat, self.index.bounds.min_lon),
            LatLon::new(self.index.bounds.max_lat, self.index.bounds.max_lon),
        );
        let gap = {
            let b = &self.index.bounds;
            let clamped = LatLon::new(point.lat.clamp(b.min_lat, b.max_lat), point.lon.clamp(b.min_lon, b.max_lon));
            geo::haversine(point, clamped)
        };
        let mut radius = (gap + 100.0).max(100.0);
        loop {
            let best = pick_nearest(
                self.links_in_box(point, radius)
                    .into_iter()
                    .map(|id| (id, self.project(id, point).distance_m)),
            );
            match best {
                // Any link closer than `radius` touches the box, so the
                // answer is final once the best distance fits inside it.
                Some(b) if b.1 <= radius => return Some(b),
                _ if radius > 2.0 * (extent + gap) + 1_000.0 => {
                    return pick_nearest(self.links.iter().map(|l| (l.id, self.project(l.id, point).distance_m)));
                }
                _ => radius *= 2.0,
            }
        }
    }

    /// Deterministic CSV listing of every directed link.
    pub fn write_dump<W: Write>(&self, out: W) -> Result<(), NetworkError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["link_id", "from", "to", "length_m", "road_type", "civilian_forbidden", "way_id"])?;
        for l in &self.links {
            w.write_record([
                l.id.to_string(),
                l.from.to_string(),
                l.to.to_string(),
                format!("{:.3}", l.length_m),
                l.road_type.to_string(),
                l.civilian_forbidden.to_string(),
                l.source_way.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Serialises the network back to the GeoJSON input format.
    pub fn to_geojson(&self) -> Value {
        let mut features = Vec::with_capacity(self.nodes.len() + self.ways.len());
        for n in &self.nodes {
            features.push(json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [n.position.lon, n.position.lat]},
                "properties": {"node_id": n.key},
            }));
        }
        for w in &self.ways {
            let link = self.link(w.forward);
            let coords: Vec<[f64; 2]> = link.geometry.iter().map(|p| [p.lon, p.lat]).collect();
            features.push(json!({
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": coords},
                "properties": {
                    "way_id": w.way_id,
                    "from": self.node(link.from).key,
                    "to": self.node(link.to).key,
                    "road_type": w.road_type.name(),
                    "oneway": w.flags.oneway,
                    "bluelight_contraflow": w.flags.bluelight_contraflow,
                    "bus_lane": w.flags.bus_lane,
                    "pedestrian": w.flags.pedestrian,
                },
            }));
        }
        json!({"type": "FeatureCollection", "features": features})
    }

    pub fn write_geojson<W: Write>(&self, out: W) -> Result<(), NetworkError> {
        serde_json::to_writer(out, &self.to_geojson()).map_err(std::io::Error::from)?;
        Ok(())
    }
}

/// Distances closer than this count as ties.
pub const DISTANCE_TIE_M: f64 = 1e-9;

/// Smallest distance; near-ties go to the smaller id.
fn pick_nearest(items: impl Iterator<Item = (LinkId, f64)>) -> Option<(LinkId, f64)> {
    items.fold(None, |best, (id, d)| match best {
        None => Some((id, d)),
        Some((bid, bd)) => {
            let closer = d < bd - DISTANCE_TIE_M;
            let tie_lower = (d - bd).abs() <= DISTANCE_TIE_M && id < bid;
            if closer || tie_lower {
                Some((id, d))
            } else {
                Some((bid, bd))
            }
        }
    })
}

/// One row of the network dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub link_id: u32,
    pub from: u32,
    pub to: u32,
    pub length_m: f64,
    pub road_type: String,
    pub civilian_forbidden: bool,
    pub way_id: String,
}

pub fn read_dump<R: Read>(input: R) -> Result<Vec<DumpRow>, NetworkError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for (i, row) in r.deserialize().enumerate() {
        let row: DumpRow = row?;
        if row.road_type.parse::<RoadType>().is_err() {
            return Err(NetworkError::Dump {
                row: i + 1,
                message: format!("unknown road type `{}`", row.road_type),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

fn json_error(e: serde_json::Error) -> NetworkError {
    NetworkError::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn prop_str(props: &Value, key: &str) -> Option<String> {
    match props.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn prop_bool(props: &Value, key: &str) -> Result<bool, String> {
    match props.get(key) {
        None | Some(Value::Null) => Ok(false),
        Some(Value::Bool(b)) => Ok(*b),
        Some(other) => Err(format!("property `{key}` must be a boolean, got {other}")),
    }
}

fn coordinate(v: &Value) -> Option<LatLon> {
    let a = v.as_array()?;
    if a.len() < 2 {
        return None;
    }
    Some(LatLon::new(a[1].as_f64()?, a[0].as_f64()?))
}

/// Builds a network from GeoJSON text. Point features with a `node_id`
/// property declare intersections; LineString features declare roads
/// between the nodes named by their `from`/`to` properties.
pub fn build_network_from_str(text: &str) -> Result<RoadNetwork, NetworkError> {
    let doc: Value = serde_json::from_str(text).map_err(json_error)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| NetworkError::Feature {
            index: 0,
            name: "<root>".into(),
            message: "expected a FeatureCollection with a `features` array".into(),
        })?;

    let mut builder = NetworkBuilder::new();
    let mut ways = Vec::new();
    for (index, f) in features.iter().enumerate() {
        let err = |message: String| NetworkError::Feature {
            index,
            name: f
                .get("properties")
                .and_then(|p| prop_str(p, "way_id").or_else(|| prop_str(p, "node_id")))
                .unwrap_or_else(|| "<unnamed>".into()),
            message,
        };
        let geometry = f.get("geometry").ok_or_else(|| err("missing geometry".into()))?;
        let props = f.get("properties").cloned().unwrap_or(Value::Null);
        match geometry.get("type").and_then(Value::as_str) {
            Some("Point") => {
                let key = prop_str(&props, "node_id").ok_or_else(|| err("Point feature without `node_id`".into()))?;
                let pos = geometry
                    .get("coordinates")
                    .and_then(coordinate)
                    .filter(LatLon::is_valid)
                    .ok_or_else(|| err("invalid Point coordinates".into()))?;
                builder.add_node(key, pos)?;
            }
            Some("LineString") => ways.push((index, geometry.clone(), props)),
            other => return Err(err(format!("unsupported geometry type {other:?}"))),
        }
    }
    for (index, geometry, props) in ways {
        let way_id = prop_str(&props, "way_id").ok_or_else(|| NetworkError::Feature {
            index,
            name: "<unnamed>".into(),
            message: "LineString feature without `way_id`".into(),
        })?;
        let err = |message: String| NetworkError::Feature {
            index,
            name: way_id.clone(),
            message,
        };
        let coords = geometry
            .get("coordinates")
            .and_then(Value::as_array)
            .ok_or_else(|| err("missing LineString coordinates".into()))?
            .iter()
            .map(|c| coordinate(c).ok_or_else(|| err("invalid coordinate".into())))
            .collect::<Result<Vec<_>, _>>()?;
        let road_type = prop_str(&props, "road_type")
            .ok_or_else(|| err("missing `road_type`".into()))?
            .parse::<RoadType>()
            .map_err(err)?;
        let flags = WayFlags {
            oneway: prop_bool(&props, "oneway").map_err(err)?,
            bluelight_contraflow: prop_bool(&props, "bluelight_contraflow").map_err(err)?,
            bus_lane: prop_bool(&props, "bus_lane").map_err(err)?,
            pedestrian: prop_bool(&props, "pedestrian").map_err(err)?,
        };
        let length_m = match props.get("length_m") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_f64().ok_or_else(|| err("`length_m` must be a number".into()))?),
        };
        let spec = WaySpec {
            from: prop_str(&props, "from").ok_or_else(|| err("missing `from` node".into()))?,
            to: prop_str(&props, "to").ok_or_else(|| err("missing `to` node".into()))?,
            way_id: way_id.clone(),
            road_type,
            flags,
            geometry: Some(coords),
            length_m,
        };
        builder.add_way_at(index, spec)?;
    }
    Ok(builder.build())
}

pub fn build_network<R: Read>(mut input: R) -> Result<RoadNetwork, NetworkError> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    build_network_from_str(&text)
}
