//! Geographic primitives: points, trajectories, the local planar projection,
//! and the grid used to turn coordinates into class labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Meters per degree of latitude used by the equirectangular projection.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(Error::InvalidPoint { lat, lon })
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedPoint {
    /// Unix seconds.
    pub t: i64,
    pub point: GeoPoint,
}

/// A user's time-ordered sequence of visits. Timestamps are strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: String,
    points: Vec<StampedPoint>,
}

impl Trajectory {
    pub fn new(user_id: impl Into<String>, points: Vec<StampedPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        for sp in &points {
            if sp.t < 0 {
                return Err(Error::invalid(format!("negative timestamp {}", sp.t)));
            }
            if !sp.point.is_valid() {
                return Err(Error::InvalidPoint {
                    lat: sp.point.lat,
                    lon: sp.point.lon,
                });
            }
        }
        if let Some(w) = points.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::invalid(format!(
                "timestamps not strictly increasing ({} then {})",
                w[0].t, w[1].t
            )));
        }
        Ok(Trajectory {
            user_id: user_id.into(),
            points,
        })
    }

    pub fn points(&self) -> &[StampedPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> GeoPoint {
        let n = self.points.len() as f64;
        let (lat, lon) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(a, b), sp| (a + sp.point.lat, b + sp.point.lon));
        GeoPoint {
            lat: lat / n,
            lon: lon / n,
        }
    }
}

/// Equirectangular projection about `origin`, returning `(x, y)` in meters
/// (x grows east, y grows north).
pub fn planar_project(p: GeoPoint, origin: GeoPoint) -> (f64, f64) {
    let x = (p.lon - origin.lon) * METERS_PER_DEGREE * origin.lat.to_radians().cos();
    let y = (p.lat - origin.lat) * METERS_PER_DEGREE;
    (x, y)
}

/// Inverse of [`planar_project`].
pub fn planar_unproject(xy: (f64, f64), origin: GeoPoint) -> GeoPoint {
    let lat = origin.lat + xy.1 / METERS_PER_DEGREE;
    let lon = origin.lon + xy.0 / (METERS_PER_DEGREE * origin.lat.to_radians().cos());
    GeoPoint { lat, lon }
}

/// Euclidean distance between the projections of `a` and `b`.
pub fn distance_m(a: GeoPoint, b: GeoPoint, origin: GeoPoint) -> f64 {
    let (ax, ay) = planar_project(a, origin);
    let (bx, by) = planar_project(b, origin);
    (ax - bx).hypot(ay - by)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Result<Self> {
        let b = BBox {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        };
        let finite = [min_lat, max_lat, min_lon, max_lon]
            .iter()
            .all(|v| v.is_finite());
        if !finite || max_lat <= min_lat || max_lon <= min_lon {
            return Err(Error::invalid(format!("degenerate bounding box {b:?}")));
        }
        Ok(b)
    }

    /// Smallest box containing every point, padded by `pad` degrees on each side.
    pub fn around<'a>(points: impl IntoIterator<Item = &'a GeoPoint>, pad: f64) -> Result<Self> {
        let mut it = points.into_iter().peekable();
        if it.peek().is_none() {
            return Err(Error::Empty("bounding box points"));
        }
        let (mut a, mut b, mut c, mut d) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in it {
            a = a.min(p.lat);
            b = b.max(p.lat);
            c = c.min(p.lon);
            d = d.max(p.lon);
        }
        BBox::new(a - pad, b + pad, c - pad, d + pad)
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: 0.5 * (self.min_lat + self.max_lat),
            lon: 0.5 * (self.min_lon + self.max_lon),
        }
    }

    /// Maps a point to `(lat, lon)` coordinates scaled to [-1, 1] over the box.
    /// Points outside the box extrapolate linearly.
    pub fn normalize(&self, p: GeoPoint) -> (f64, f64) {
        (
            2.0 * (p.lat - self.min_lat) / (self.max_lat - self.min_lat) - 1.0,
            2.0 * (p.lon - self.min_lon) / (self.max_lon - self.min_lon) - 1.0,
        )
    }

    pub fn denormalize(&self, lat_n: f64, lon_n: f64) -> GeoPoint {
        GeoPoint {
            lat: self.min_lat + 0.5 * (lat_n + 1.0) * (self.max_lat - self.min_lat),
            lon: self.min_lon + 0.5 * (lon_n + 1.0) * (self.max_lon - self.min_lon),
        }
    }
}

/// Row-major `g x g` grid over a bounding box. Rows follow latitude, columns
/// follow longitude; cell ids are `row * g + col`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridIndex {
    pub bbox: BBox,
    pub g: usize,
}

impl GridIndex {
    pub fn new(bbox: BBox, g: usize) -> Result<Self> {
        if g < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 cells per axis, got {g}")));
        }
        Ok(GridIndex { bbox, g })
    }

    pub fn cell_count(&self) -> usize {
        self.g * self.g
    }

    fn axis_index(&self, v: f64, lo: f64, hi: f64) -> usize {
        let f = ((v - lo) / (hi - lo) * self.g as f64).floor();
        if f.is_nan() || f < 0.0 {
            0
        } else {
            (f as usize).min(self.g - 1)
        }
    }

    /// Cell containing `p`; points outside the box clamp to the boundary cells.
    pub fn cell_of(&self, p: GeoPoint) -> usize {
        let b = &self.bbox;
        let row = self.axis_index(p.lat, b.min_lat, b.max_lat);
        let col = self.axis_index(p.lon, b.min_lon, b.max_lon);
        row * self.g + col
    }

    pub fn cell_center(&self, cell: usize) -> GeoPoint {
        let b = &self.bbox;
        let (row, col) = (cell / self.g, cell % self.g);
        let dlat = (b.max_lat - b.min_lat) / self.g as f64;
        let dlon = (b.max_lon - b.min_lon) / self.g as f64;
        GeoPoint {
            lat: b.min_lat + (row as f64 + 0.5) * dlat,
            lon: b.min_lon + (col as f64 + 0.5) * dlon,
        }
    }
}
