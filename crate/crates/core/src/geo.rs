//! Small WGS84 helpers: great-circle distances and a local equirectangular
//! projection used for metric boxes, projections onto polylines and noise.

use serde::{Deserialize, Serialize};

/// Mean Earth radius in metres (IUGG).
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Metres per second in one mile per hour.
pub const MPS_PER_MPH: f64 = 0.44704;

pub fn mph_to_mps(mph: f64) -> f64 {
    mph * MPS_PER_MPH
}

pub fn mps_to_mph(mps: f64) -> f64 {
    mps / MPS_PER_MPH
}

/// A WGS84 coordinate in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }

    /// Great-circle (haversine) distance in metres.
    pub fn distance_to(&self, other: &LatLon) -> f64 {
        haversine(*self, *other)
    }
}

impl std::fmt::Display for LatLon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{}", self.lat, self.lon)
    }
}

impl std::str::FromStr for LatLon {
    type Err = String;

    /// Parses `lat,lon`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lat, lon) = s
            .split_once(',')
            .ok_or_else(|| format!("expected `lat,lon`, got `{s}`"))?;
        let lat: f64 = lat.trim().parse().map_err(|_| format!("bad latitude `{lat}`"))?;
        let lon: f64 = lon.trim().parse().map_err(|_| format!("bad longitude `{lon}`"))?;
        let p = LatLon::new(lat, lon);
        if !p.is_valid() {
            return Err(format!("coordinate out of range: {s}"));
        }
        Ok(p)
    }
}

pub fn haversine(a: LatLon, b: LatLon) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Length of a polyline as the sum of great-circle segment lengths.
pub fn polyline_length(points: &[LatLon]) -> f64 {
    points.windows(2).map(|w| haversine(w[0], w[1])).sum()
}

/// Spherical midpoint of the great-circle arc between two points.
pub fn geographic_midpoint(a: LatLon, b: LatLon) -> LatLon {
    let (lat1, lon1) = (a.lat.to_radians(), a.lon.to_radians());
    let (lat2, lon2) = (b.lat.to_radians(), b.lon.to_radians());
    let x = lat1.cos() * lon1.cos() + lat2.cos() * lon2.cos();
    let y = lat1.cos() * lon1.sin() + lat2.cos() * lon2.sin();
    let z = lat1.sin() + lat2.sin();
    let lat = z.atan2((x * x + y * y).sqrt());
    let lon = y.atan2(x);
    LatLon::new(lat.to_degrees(), lon.to_degrees())
}

/// Initial bearing from `a` to `b`, degrees in [0, 360).
pub fn bearing_deg(a: LatLon, b: LatLon) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlon = (b.lon - a.lon).to_radians();
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    y.atan2(x).to_degrees().rem_euclid(360.0)
}

/// Equirectangular projection about a reference point. Coordinates are
/// metres east (`x`) and north (`y`) of the reference.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    origin: LatLon,
    metres_per_deg_lat: f64,
    metres_per_deg_lon: f64,
}

impl LocalFrame {
    pub fn new(origin: LatLon) -> Self {
        let metres_per_deg_lat = EARTH_RADIUS_M.to_radians();
        Self {
            origin,
            metres_per_deg_lat,
            metres_per_deg_lon: metres_per_deg_lat * origin.lat.to_radians().cos(),
        }
    }

    pub fn origin(&self) -> LatLon {
        self.origin
    }

    pub fn project(&self, p: LatLon) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * self.metres_per_deg_lon,
            (p.lat - self.origin.lat) * self.metres_per_deg_lat,
        )
    }

    pub fn unproject(&self, x: f64, y: f64) -> LatLon {
        LatLon::new(
            self.origin.lat + y / self.metres_per_deg_lat,
            self.origin.lon + x / self.metres_per_deg_lon,
        )
    }

    /// The lat/lon rectangle covering the metric square of half side `half`
    /// centred on the origin. The projection is affine in (lat, lon), so the
    /// square maps onto this rectangle exactly.
    pub fn square_bounds(&self, half: f64) -> DegBox {
        let dlat = half / self.metres_per_deg_lat;
        let dlon = half / self.metres_per_deg_lon;
        DegBox {
            min_lat: self.origin.lat - dlat,
            max_lat: self.origin.lat + dlat,
            min_lon: self.origin.lon - dlon,
            max_lon: self.origin.lon + dlon,
        }
    }
}

/// Axis-aligned box in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl DegBox {
    pub fn around(points: &[LatLon]) -> Option<Self> {
        let first = points.first()?;
        let mut b = DegBox {
            min_lat: first.lat,
            max_lat: first.lat,
            min_lon: first.lon,
            max_lon: first.lon,
        };
        for p in &points[1..] {
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lat = b.max_lat.max(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lon = b.max_lon.max(p.lon);
        }
        Some(b)
    }

    pub fn contains(&self, p: LatLon) -> bool {
        p.lat >= self.min_lat && p.lat <= self.max_lat && p.lon >= self.min_lon && p.lon <= self.max_lon
    }

    pub fn overlaps(&self, other: &DegBox) -> bool {
        self.min_lat <= other.max_lat
            && other.min_lat <= self.max_lat
            && self.min_lon <= other.max_lon
            && other.min_lon <= self.max_lon
    }

    /// Closed segment / closed box intersection (Liang–Barsky clipping).
    pub fn intersects_segment(&self, a: LatLon, b: LatLon) -> bool {
        segment_hits_rect(
            (a.lon, a.lat),
            (b.lon, b.lat),
            (self.min_lon, self.min_lat),
            (self.max_lon, self.max_lat),
        )
    }
}

/// Whether the closed segment `a`–`b` touches the closed rectangle `lo`–`hi`.
pub fn segment_hits_rect(a: (f64, f64), b: (f64, f64), lo: (f64, f64), hi: (f64, f64)) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    for (p, q) in [
        (-dx, a.0 - lo.0),
        (dx, hi.0 - a.0),
        (-dy, a.1 - lo.1),
        (dy, hi.1 - a.1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                if r > t1 {
                    return false;
                }
                t0 = t0.max(r);
            } else {
                if r < t0 {
                    return false;
                }
                t1 = t1.min(r);
            }
        }
    }
    t0 <= t1
}

/// Closest point on segment `a`–`b` to `p` in the plane.
/// Returns `(distance, t)` with `t` in [0, 1] the fraction along the segment.
pub fn point_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt(), t)
}

/// Projection of a point onto a polyline, measured in a frame centred on the
/// point itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolylineProjection {
    /// Perpendicular distance in metres.
    pub distance: f64,
    /// Distance along the polyline from its first vertex, metres.
    pub offset: f64,
    pub point: LatLon,
}

pub fn project_onto_polyline(p: LatLon, line: &[LatLon]) -> PolylineProjection {
    let frame = LocalFrame::new(p);
    let mut best: Option<(f64, usize, f64)> = None;
    for (i, w) in line.windows(2).enumerate() {
        let a = frame.project(w[0]);
        let b = frame.project(w[1]);
        // Canonical endpoint order so both directions of a road give
        // bit-identical distances.
        let (d, t) = if (a.0, a.1) <= (b.0, b.1) {
            point_segment((0.0, 0.0), a, b)
        } else {
            let (d, t) = point_segment((0.0, 0.0), b, a);
            (d, 1.0 - t)
        };
        if best.is_none_or(|(bd, _, _)| d < bd) {
            best = Some((d, i, t));
        }
    }
    let Some((distance, seg, t)) = best else {
        let only = line.first().copied().unwrap_or(p);
        return PolylineProjection {
            distance: haversine(p, only),
            offset: 0.0,
            point: only,
        };
    };
    let before: f64 = line[..=seg].windows(2).map(|w| haversine(w[0], w[1])).sum();
    let seg_len = haversine(line[seg], line[seg + 1]);
    let point = LatLon::new(
        line[seg].lat + t * (line[seg + 1].lat - line[seg].lat),
        line[seg].lon + t * (line[seg + 1].lon - line[seg].lon),
    );
    PolylineProjection {
        distance,
        offset: before + t * seg_len,
        point,
    }
}

/// Point at `offset` metres along a polyline (clamped to its ends).
pub fn point_along(line: &[LatLon], offset: f64) -> LatLon {
    let mut remaining = offset.max(0.0);
    for w in line.windows(2) {
        let l = haversine(w[0], w[1]);
        if remaining <= l && l > 0.0 {
            let t = remaining / l;
            return LatLon::new(
                w[0].lat + t * (w[1].lat - w[0].lat),
                w[0].lon + t * (w[1].lon - w[0].lon),
            );
        }
        remaining -= l;
    }
    *line.last().expect("empty polyline")
}

/// Bearing of the polyline segment containing `offset`.
pub fn bearing_along(line: &[LatLon], offset: f64) -> f64 {
    let mut remaining = offset.max(0.0);
    for w in line.windows(2) {
        let l = haversine(w[0], w[1]);
        if remaining <= l {
            return bearing_deg(w[0], w[1]);
        }
        remaining -= l;
    }
    let n = line.len();
    bearing_deg(line[n - 2], line[n - 1])
}

/// Ray-casting point-in-ring test in degree space.
pub fn ring_contains(ring: &[LatLon], p: LatLon) -> bool {
    let mut inside = false;
    let n = ring.len();
    if n < 3 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if p.lon < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haversine_one_degree_latitude() {
        let d = haversine(LatLon::new(51.0, 0.0), LatLon::new(52.0, 0.0));
        assert!((d - EARTH_RADIUS_M.to_radians()).abs() < 1e-6);
    }

    #[test]
    fn local_frame_round_trip() {
        let f = LocalFrame::new(LatLon::new(51.5, -0.12));
        let p = f.unproject(321.0, -77.5);
        let (x, y) = f.project(p);
        assert!((x - 321.0).abs() < 1e-9 && (y + 77.5).abs() < 1e-9);
    }

    #[test]
    fn local_frame_is_accurate_over_500m() {
        let f = LocalFrame::new(LatLon::new(51.5, -0.12));
        let p = f.unproject(300.0, 400.0);
        let exact = haversine(f.origin(), p);
        assert!((exact - 500.0).abs() / 500.0 < 1e-3);
    }

    #[test]
    fn segment_rect_cases() {
        let lo = (0.0, 0.0);
        let hi = (1.0, 1.0);
        assert!(segment_hits_rect((-1.0, 0.5), (2.0, 0.5), lo, hi));
        assert!(segment_hits_rect((0.2, 0.2), (0.3, 0.3), lo, hi));
        assert!(!segment_hits_rect((-1.0, 2.0), (2.0, 2.0), lo, hi));
        assert!(!segment_hits_rect((-1.0, 0.5), (-0.5, 3.0), lo, hi));
        // touching a corner counts
        assert!(segment_hits_rect((1.0, 1.0), (2.0, 2.0), lo, hi));
    }

    #[test]
    fn projection_offsets() {
        let f = LocalFrame::new(LatLon::new(51.5, 0.0));
        let line = [f.unproject(0.0, 0.0), f.unproject(100.0, 0.0), f.unproject(100.0, 100.0)];
        let p = f.unproject(100.0, 40.0);
        let pr = project_onto_polyline(f.unproject(110.0, 40.0), &line);
        assert!((pr.distance - 10.0).abs() < 0.05);
        assert!((pr.offset - 140.0).abs() < 0.1);
        assert!(haversine(pr.point, p) < 0.05);
    }

    #[test]
    fn midpoint_is_equidistant() {
        let a = LatLon::new(51.4, -0.2);
        let b = LatLon::new(51.6, 0.1);
        let m = geographic_midpoint(a, b);
        assert!((haversine(a, m) - haversine(m, b)).abs() < 1e-6);
    }

    #[test]
    fn ring_square() {
        let ring = [
            LatLon::new(0.0, 0.0),
            LatLon::new(0.0, 1.0),
            LatLon::new(1.0, 1.0),
            LatLon::new(1.0, 0.0),
        ];
        assert!(ring_contains(&ring, LatLon::new(0.5, 0.5)));
        assert!(!ring_contains(&ring, LatLon::new(1.5, 0.5)));
    }
}
