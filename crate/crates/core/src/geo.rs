//! Geodesic primitives on a spherical Earth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IUGG mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// A latitude/longitude pair in degrees.
///
/// Serialized as a two-element `[lat, lon]` array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::invalid(format!("non-finite coordinate ({lat}, {lon})")));
        }
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(format!("coordinate out of range ({lat}, {lon})")));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Point displaced by `north_m` / `east_m` meters using a local flat-earth step.
    /// Only meant for building small synthetic layouts.
    pub fn offset(&self, north_m: f64, east_m: f64) -> Result<Self> {
        let dlat = (north_m / EARTH_RADIUS_M).to_degrees();
        let dlon = (east_m / (EARTH_RADIUS_M * self.lat.to_radians().cos())).to_degrees();
        GeoPoint::new(self.lat + dlat, self.lon + dlon)
    }
}

impl TryFrom<[f64; 2]> for GeoPoint {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        GeoPoint::new(v[0], v[1])
    }
}

impl From<GeoPoint> for [f64; 2] {
    fn from(p: GeoPoint) -> Self {
        [p.lat, p.lon]
    }
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    // rounding can push h past 1 for antipodal pairs
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_M * h.sqrt().asin()
}

/// Distance between raw coordinates, rejecting non-finite input.
pub fn haversine_checked(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64> {
    Ok(haversine_distance(
        GeoPoint::new(lat1, lon1)?,
        GeoPoint::new(lat2, lon2)?,
    ))
}

/// Indices of `points` within `radius_m` of `center`.
pub fn within_radius(center: GeoPoint, points: &[GeoPoint], radius_m: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| haversine_distance(center, **p) <= radius_m)
        .map(|(i, _)| i)
        .collect()
}

/// Bucketed index over points for radius queries at a fixed scale.
///
/// Cells are `cell_m` meters on a side in an equirectangular projection anchored
/// at a reference latitude. Lookups scan enough cells to cover the radius plus a
/// 1% margin for projection distortion, then filter by haversine distance.
#[derive(Debug, Clone)]
pub(crate) struct GridIndex {
    cell_m: f64,
    lon_scale: f64,
    cells: std::collections::HashMap<(i64, i64), Vec<usize>>,
    points: Vec<GeoPoint>,
}

impl GridIndex {
    pub(crate) fn new(cell_m: f64, ref_lat: f64) -> Self {
        GridIndex {
            cell_m,
            lon_scale: ref_lat.to_radians().cos().max(1e-6),
            cells: Default::default(),
            points: Vec::new(),
        }
    }

    fn key(&self, p: GeoPoint) -> (i64, i64) {
        let y = p.lat.to_radians() * EARTH_RADIUS_M;
        let x = p.lon.to_radians() * EARTH_RADIUS_M * self.lon_scale;
        ((y / self.cell_m).floor() as i64, (x / self.cell_m).floor() as i64)
    }

    pub(crate) fn insert(&mut self, p: GeoPoint) -> usize {
        let id = self.points.len();
        let k = self.key(p);
        self.cells.entry(k).or_default().push(id);
        self.points.push(p);
        id
    }

    fn reach(&self, radius_m: f64) -> i64 {
        (radius_m * 1.01 / self.cell_m).ceil() as i64
    }

    /// Nearest indexed point within `radius_m` of `p`; ties go to the lower id.
    pub(crate) fn nearest_within(&self, p: GeoPoint, radius_m: f64) -> Option<(usize, f64)> {
        let (ky, kx) = self.key(p);
        let reach = self.reach(radius_m);
        let mut best: Option<(usize, f64)> = None;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let Some(ids) = self.cells.get(&(ky + dy, kx + dx)) else {
                    continue;
                };
                for &id in ids {
                    let d = haversine_distance(p, self.points[id]);
                    if d > radius_m {
                        continue;
                    }
                    match best {
                        Some((bid, bd)) if bd < d || (bd == d && bid < id) => {}
                        _ => best = Some((id, d)),
                    }
                }
            }
        }
        best
    }

    /// All indexed points within `radius_m` of `p`, ascending by id.
    pub(crate) fn all_within(&self, p: GeoPoint, radius_m: f64) -> Vec<(usize, f64)> {
        let (ky, kx) = self.key(p);
        let reach = self.reach(radius_m);
        let mut out = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let Some(ids) = self.cells.get(&(ky + dy, kx + dx)) else {
                    continue;
                };
                for &id in ids {
                    let d = haversine_distance(p, self.points[id]);
                    if d <= radius_m {
                        out.push((id, d));
                    }
                }
            }
        }
        out.sort_by_key(|&(id, _)| id);
        out
    }

    pub(crate) fn len(&self) -> usize {
        self.points.len()
    }
}
