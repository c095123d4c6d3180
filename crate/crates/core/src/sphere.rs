//! Hierarchical cells on the unit sphere.
//!
//! The sphere is covered by the six faces of an enclosing cube. Each face is
//! a quad-tree over face-local coordinates `(s, t) ∈ [0, 1]²`; a cell at level
//! `L` is the rectangle `[i/2^L, (i+1)/2^L) × [j/2^L, (j+1)/2^L)`. Cube
//! coordinates `(u, v) ∈ [-1, 1]²` are obtained from `(s, t)` with the
//! quadratic per-axis transform, which keeps the largest/smallest cell area
//! ratio close to 2.08 at every level.
//!
//! Containment is half-open per axis and closed at `s = 1` / `t = 1`. Points
//! on cube edges belong to the face of their largest-magnitude axis, ties
//! going to x, then y, then z.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MAX_LEVEL: usize = 30;
pub const NUM_FACES: u8 = 6;
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A geotag in degrees. Latitude in `[-90, 90]`, longitude in `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Validates and normalizes: longitude is wrapped into `[-180, 180)`.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::InvalidCoordinate(format!("non-finite ({lat}, {lon})")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidCoordinate(format!("latitude {lat} outside [-90, 90]")));
        }
        Ok(GeoPoint { lat, lon: wrap_lon(lon) })
    }

    pub fn to_unit(&self) -> Result<UnitVector> {
        latlon_to_unit(*self)
    }

    pub fn distance_km(&self, other: &GeoPoint) -> f64 {
        great_circle_km(self, other)
    }
}

fn wrap_lon(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVector {
    /// Normalizes an arbitrary non-zero vector.
    pub fn normalized(x: f64, y: f64, z: f64) -> Self {
        let n = (x * x + y * y + z * z).sqrt();
        UnitVector { x: x / n, y: y / n, z: z / n }
    }

    pub fn dot(&self, o: &UnitVector) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn to_geo(&self) -> GeoPoint {
        let lat = self.z.atan2((self.x * self.x + self.y * self.y).sqrt()).to_degrees();
        let lon = self.y.atan2(self.x).to_degrees();
        GeoPoint { lat: lat.clamp(-90.0, 90.0), lon: wrap_lon(lon) }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Geographic convention: `(0, 0)` maps to `+x`, the north pole to `+z`.
pub fn latlon_to_unit(p: GeoPoint) -> Result<UnitVector> {
    if !p.lat.is_finite() || !p.lon.is_finite() {
        return Err(Error::InvalidCoordinate(format!("non-finite ({}, {})", p.lat, p.lon)));
    }
    let (lat, lon) = (p.lat.to_radians(), p.lon.to_radians());
    Ok(UnitVector {
        x: lat.cos() * lon.cos(),
        y: lat.cos() * lon.sin(),
        z: lat.sin(),
    })
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn great_circle_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    // atan2 of |a×b| and a·b is well conditioned for both tiny and antipodal separations.
    let (Ok(u), Ok(v)) = (latlon_to_unit(*a), latlon_to_unit(*b)) else {
        return f64::NAN;
    };
    let cx = u.y * v.z - u.z * v.y;
    let cy = u.z * v.x - u.x * v.z;
    let cz = u.x * v.y - u.y * v.x;
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    EARTH_RADIUS_KM * cross.atan2(u.dot(&v))
}

/// Quadratic transform from face-local `s ∈ [0,1]` to cube coordinate `u ∈ [-1,1]`.
pub fn st_to_uv(s: f64) -> f64 {
    if s >= 0.5 {
        (4.0 * s * s - 1.0) / 3.0
    } else {
        (1.0 - 4.0 * (1.0 - s) * (1.0 - s)) / 3.0
    }
}

pub fn uv_to_st(u: f64) -> f64 {
    if u >= 0.0 {
        0.5 * (1.0 + 3.0 * u).sqrt()
    } else {
        1.0 - 0.5 * (1.0 - 3.0 * u).sqrt()
    }
}

/// Face of a vector: largest-magnitude axis, ties resolved x > y > z.
pub fn face_of(p: &UnitVector) -> u8 {
    let a = p.as_array();
    let mut axis = 0;
    for k in 1..3 {
        if a[k].abs() > a[axis].abs() {
            axis = k;
        }
    }
    if a[axis] < 0.0 {
        axis as u8 + 3
    } else {
        axis as u8
    }
}

pub fn xyz_to_face_uv(p: &UnitVector) -> (u8, f64, f64) {
    let face = face_of(p);
    let (x, y, z) = (p.x, p.y, p.z);
    let (u, v) = match face {
        0 => (y / x, z / x),
        1 => (-x / y, z / y),
        2 => (-x / z, -y / z),
        3 => (z / x, y / x),
        4 => (z / y, -x / y),
        _ => (-y / z, -x / z),
    };
    (face, u, v)
}

pub fn face_uv_to_xyz(face: u8, u: f64, v: f64) -> UnitVector {
    let (x, y, z) = match face {
        0 => (1.0, u, v),
        1 => (-u, 1.0, v),
        2 => (-u, -v, 1.0),
        3 => (-1.0, -v, -u),
        4 => (v, -1.0, -u),
        _ => (v, u, -1.0),
    };
    UnitVector::normalized(x, y, z)
}

/// Face index and face-local `(s, t)` of a point, clamped to `[0, 1]`.
pub fn face_st(p: &UnitVector) -> (u8, f64, f64) {
    let (face, u, v) = xyz_to_face_uv(p);
    (face, uv_to_st(u).clamp(0.0, 1.0), uv_to_st(v).clamp(0.0, 1.0))
}

/// A node of one of the six face quad-trees.
///
/// `i` and `j` index the cell along `s` and `t` at its own level. The path
/// digit at depth `k` is `2·bit_i + bit_j`, taken from bit `level-1-k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellId {
    face: u8,
    level: u8,
    i: u32,
    j: u32,
}

impl CellId {
    pub fn from_face(face: u8) -> Result<Self> {
        if face >= NUM_FACES {
            return Err(Error::InvalidToken(format!("face {face}")));
        }
        Ok(CellId { face, level: 0, i: 0, j: 0 })
    }

    pub fn from_face_ij(face: u8, level: usize, i: u32, j: u32) -> Result<Self> {
        check_level(level)?;
        if face >= NUM_FACES || u64::from(i) >= 1u64 << level || u64::from(j) >= 1u64 << level {
            return Err(Error::InvalidToken(format!("face {face} level {level} ({i}, {j})")));
        }
        Ok(CellId { face, level: level as u8, i, j })
    }

    pub fn from_digits(face: u8, digits: &[u8]) -> Result<Self> {
        let mut c = CellId::from_face(face)?;
        for &d in digits {
            if d > 3 {
                return Err(Error::InvalidToken(format!("digit {d}")));
            }
            c = c.child(d).ok_or(Error::InvalidLevel { level: MAX_LEVEL + 1, max: MAX_LEVEL })?;
        }
        Ok(c)
    }

    /// The cell at `level` containing `p`.
    pub fn from_point(p: &GeoPoint, level: usize) -> Result<Self> {
        check_level(level)?;
        let (face, s, t) = face_st(&latlon_to_unit(*p)?);
        Ok(CellId { face, level: level as u8, i: st_index(s, level), j: st_index(t, level) })
    }

    pub fn face(&self) -> u8 {
        self.face
    }

    pub fn level(&self) -> usize {
        self.level as usize
    }

    pub fn ij(&self) -> (u32, u32) {
        (self.i, self.j)
    }

    pub fn digit(&self, depth: usize) -> u8 {
        debug_assert!(depth < self.level());
        let shift = self.level() - 1 - depth;
        ((((self.i >> shift) & 1) << 1) | ((self.j >> shift) & 1)) as u8
    }

    pub fn digits(&self) -> Vec<u8> {
        (0..self.level()).map(|k| self.digit(k)).collect()
    }

    pub fn parent(&self) -> Option<CellId> {
        (self.level > 0).then(|| CellId {
            face: self.face,
            level: self.level - 1,
            i: self.i >> 1,
            j: self.j >> 1,
        })
    }

    /// Ancestor at `level`, or `self` when already at that level.
    pub fn ancestor(&self, level: usize) -> Option<CellId> {
        if level > self.level() {
            return None;
        }
        let shift = self.level() - level;
        Some(CellId { face: self.face, level: level as u8, i: self.i >> shift, j: self.j >> shift })
    }

    pub fn child(&self, digit: u8) -> Option<CellId> {
        if self.level() >= MAX_LEVEL || digit > 3 {
            return None;
        }
        Some(CellId {
            face: self.face,
            level: self.level + 1,
            i: (self.i << 1) | u32::from(digit >> 1),
            j: (self.j << 1) | u32::from(digit & 1),
        })
    }

    /// Children in digit order; `None` at [`MAX_LEVEL`].
    pub fn children(&self) -> Option<[CellId; 4]> {
        Some([self.child(0)?, self.child(1)?, self.child(2)?, self.child(3)?])
    }

    /// True if `self` is a strict ancestor of `other`.
    pub fn is_ancestor_of(&self, other: &CellId) -> bool {
        other.level > self.level && other.ancestor(self.level()) == Some(*self)
    }

    /// `(s_lo, s_hi, t_lo, t_hi)` of the cell rectangle.
    pub fn st_bounds(&self) -> (f64, f64, f64, f64) {
        let size = (1u64 << self.level) as f64;
        (
            f64::from(self.i) / size,
            f64::from(self.i + 1) / size,
            f64::from(self.j) / size,
            f64::from(self.j + 1) / size,
        )
    }

    pub fn center_st(&self) -> (f64, f64) {
        let (s0, s1, t0, t1) = self.st_bounds();
        (0.5 * (s0 + s1), 0.5 * (t0 + t1))
    }

    pub fn center_unit(&self) -> UnitVector {
        let (s, t) = self.center_st();
        face_uv_to_xyz(self.face, st_to_uv(s), st_to_uv(t))
    }

    /// Midpoint of the face-local rectangle, projected onto the sphere.
    pub fn center(&self) -> GeoPoint {
        self.center_unit().to_geo()
    }

    /// Corners in counter-clockwise order (seen from outside the sphere).
    pub fn vertices(&self) -> [UnitVector; 4] {
        let (s0, s1, t0, t1) = self.st_bounds();
        let (u0, u1, v0, v1) = (st_to_uv(s0), st_to_uv(s1), st_to_uv(t0), st_to_uv(t1));
        [
            face_uv_to_xyz(self.face, u0, v0),
            face_uv_to_xyz(self.face, u1, v0),
            face_uv_to_xyz(self.face, u1, v1),
            face_uv_to_xyz(self.face, u0, v1),
        ]
    }

    /// Exact area of the geodesic quadrilateral (cell edges lie on great circles).
    pub fn area_steradians(&self) -> f64 {
        let [a, b, c, d] = self.vertices();
        triangle_area(&a, &b, &c) + triangle_area(&a, &c, &d)
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        let Ok(u) = latlon_to_unit(*p) else {
            return false;
        };
        let (face, s, t) = face_st(&u);
        face == self.face && st_index(s, self.level()) == self.i && st_index(t, self.level()) == self.j
    }

    pub fn token(&self) -> String {
        let mut out = String::with_capacity(2 + self.level());
        out.push(char::from(b'0' + self.face));
        out.push('-');
        for k in 0..self.level() {
            out.push(char::from(b'0' + self.digit(k)));
        }
        out
    }

    pub fn from_token(token: &str) -> Result<Self> {
        let bad = || Error::InvalidToken(token.to_string());
        let bytes = token.as_bytes();
        if bytes.len() < 2 || bytes[1] != b'-' || !(b'0'..b'6').contains(&bytes[0]) {
            return Err(bad());
        }
        if bytes.len() - 2 > MAX_LEVEL {
            return Err(bad());
        }
        let mut c = CellId::from_face(bytes[0] - b'0')?;
        for &b in &bytes[2..] {
            if !(b'0'..=b'3').contains(&b) {
                return Err(bad());
            }
            c = c.child(b - b'0').ok_or_else(bad)?;
        }
        Ok(c)
    }
}

fn check_level(level: usize) -> Result<()> {
    if level > MAX_LEVEL {
        return Err(Error::InvalidLevel { level, max: MAX_LEVEL });
    }
    Ok(())
}

/// Index of the half-open interval containing `s`; `s = 1` falls in the last one.
fn st_index(s: f64, level: usize) -> u32 {
    let n = 1u64 << level;
    // Scaling by a power of two is exact, so this agrees with comparisons against i/2^L.
    let k = (s * n as f64).floor() as u64;
    k.min(n - 1) as u32
}

/// Solid angle of a geodesic triangle (Van Oosterom–Strackee).
fn triangle_area(a: &UnitVector, b: &UnitVector, c: &UnitVector) -> f64 {
    let (ab, ac) = (sub(b, a), sub(c, a));
    let cross = [
        ab[1] * ac[2] - ab[2] * ac[1],
        ab[2] * ac[0] - ab[0] * ac[2],
        ab[0] * ac[1] - ab[1] * ac[0],
    ];
    let triple = a.x * cross[0] + a.y * cross[1] + a.z * cross[2];
    let denom = 1.0 + a.dot(b) + b.dot(c) + c.dot(a);
    2.0 * triple.abs().atan2(denom)
}

fn sub(a: &UnitVector, b: &UnitVector) -> [f64; 3] {
    [a.x - b.x, a.y - b.y, a.z - b.z]
}

/// Token order: face, then path digits, a prefix before its extensions.
impl Ord for CellId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.face.cmp(&other.face).then_with(|| {
            let common = self.level.min(other.level) as usize;
            (0..common)
                .map(|k| self.digit(k).cmp(&other.digit(k)))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or_else(|| self.level.cmp(&other.level))
        })
    }
}

impl PartialOrd for CellId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.token())
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellId::from_token(s)
    }
}

impl Serialize for CellId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.token())
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        CellId::from_token(&s).map_err(serde::de::Error::custom)
    }
}

pub fn cell_from_point(p: &GeoPoint, level: usize) -> Result<CellId> {
    CellId::from_point(p, level)
}

pub fn cell_contains(c: &CellId, p: &GeoPoint) -> bool {
    c.contains(p)
}

pub fn cell_center(c: &CellId) -> GeoPoint {
    c.center()
}

pub fn cell_area_steradians(c: &CellId) -> f64 {
    c.area_steradians()
}

/// All `6·4^level` cells at one level, in token order.
pub fn cells_at_level(level: usize) -> Result<Vec<CellId>> {
    check_level(level)?;
    let mut out = Vec::with_capacity(6usize << (2 * level));
    for face in 0..NUM_FACES {
        let mut stack = vec![CellId::from_face(face)?];
        while let Some(c) = stack.pop() {
            if c.level() == level {
                out.push(c);
            } else if let Some(ch) = c.children() {
                stack.extend(ch.iter().rev());
            }
        }
    }
    Ok(out)
}

/// Largest over smallest cell area at one level.
pub fn area_ratio_at_level(level: usize) -> Result<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for c in cells_at_level(level)? {
        let a = c.area_steradians();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    Ok(hi / lo)
}

pub const SPHERE_AREA: f64 = 4.0 * PI;
