//! Cross-shape scribbles: two roughly perpendicular segments drawn across a
//! target. Coordinates are continuous image coordinates (x = column, y = row);
//! pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Crossings flatter than this are rejected.
pub const MIN_CROSSING_ANGLE_DEG: f64 = 5.0;
/// Crossings flatter than this are accepted with a warning.
pub const SOFT_CROSSING_ANGLE_DEG: f64 = 30.0;
/// Shortest accepted arm, in pixels.
pub const MIN_ARM_LENGTH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate segment (zero length)")]
    DegenerateSegment,
    #[error("segments are parallel or cross at less than {MIN_CROSSING_ANGLE_DEG}° (sin θ = {sin_theta:.4})")]
    ParallelSegments { sin_theta: f64 },
    #[error("segments do not cross (t1 = {t1:.4}, t2 = {t2:.4})")]
    NoCrossing { t1: f64, t2: f64 },
    #[error("arm {arm} is shorter than {MIN_ARM_LENGTH} px ({length:.4})")]
    DegenerateArm { arm: &'static str, length: f64 },
    #[error("shrink rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

impl GeometryError {
    /// Stable short name used in diagnostics and HTTP error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            GeometryError::DegenerateSegment => "DegenerateSegment",
            GeometryError::ParallelSegments { .. } => "ParallelSegments",
            GeometryError::NoCrossing { .. } => "NoCrossing",
            GeometryError::DegenerateArm { .. } => "DegenerateArm",
            GeometryError::InvalidRate(_) => "InvalidRate",
            GeometryError::NonFinite => "NonFinite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn unit(self) -> Point2 {
        self * (1.0 / self.norm())
    }

    /// Counter-clockwise rotation (in the x-right, y-down image frame this
    /// appears clockwise on screen).
    pub fn rotated(self, angle_rad: f64) -> Point2 {
        let (s, c) = angle_rad.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Point2 { x, y }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[Point2; 2]", into = "[Point2; 2]")]
pub struct Segment {
    pub a: Point2,
    pub b: Point2,
}

impl Segment {
    pub const fn new(a: Point2, b: Point2) -> Self {
        Self { a, b }
    }

    pub fn from_coords(ax: f64, ay: f64, bx: f64, by: f64) -> Self {
        Self::new(Point2::new(ax, ay), Point2::new(bx, by))
    }

    pub fn direction(&self) -> Point2 {
        self.b - self.a
    }

    pub fn length(&self) -> f64 {
        self.direction().norm()
    }

    pub fn at(&self, t: f64) -> Point2 {
        self.a + self.direction() * t
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if self.length() <= 0.0 {
            return Err(GeometryError::DegenerateSegment);
        }
        Ok(())
    }
}

impl From<[Point2; 2]> for Segment {
    fn from([a, b]: [Point2; 2]) -> Self {
        Segment { a, b }
    }
}

impl From<Segment> for [Point2; 2] {
    fn from(s: Segment) -> Self {
        [s.a, s.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intersection {
    pub point: Point2,
    /// Parameter along the first segment, in `(0, 1)`.
    pub t1: f64,
    /// Parameter along the second segment, in `(0, 1)`.
    pub t2: f64,
}

/// |sin θ| between the supporting lines of two segments.
pub fn crossing_sine(seg1: &Segment, seg2: &Segment) -> f64 {
    let (d1, d2) = (seg1.direction(), seg2.direction());
    (d1.cross(d2) / (d1.norm() * d2.norm())).abs()
}

/// Intersects two segments by solving the 2×2 system of their supporting
/// lines, then requires the solution to lie strictly inside both segments.
pub fn intersect(seg1: &Segment, seg2: &Segment) -> Result<Intersection, GeometryError> {
    seg1.validate()?;
    seg2.validate()?;
    let sin_theta = crossing_sine(seg1, seg2);
    if sin_theta < MIN_CROSSING_ANGLE_DEG.to_radians().sin() {
        return Err(GeometryError::ParallelSegments { sin_theta });
    }
    let (d1, d2) = (seg1.direction(), seg2.direction());
    let denom = d1.cross(d2);
    let w = seg2.a - seg1.a;
    let t1 = w.cross(d2) / denom;
    let t2 = w.cross(d1) / denom;
    if !(t1 > 0.0 && t1 < 1.0 && t2 > 0.0 && t2 < 1.0) {
        return Err(GeometryError::NoCrossing { t1, t2 });
    }
    // Average both parametrizations so the result is symmetric in its arguments.
    let point = (seg1.at(t1) + seg2.at(t2)) * 0.5;
    Ok(Intersection { point, t1, t2 })
}

/// Lengths of the four arms measured from the crossing point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arms {
    pub oa: f64,
    pub ob: f64,
    pub oc: f64,
    pub od: f64,
}

impl Arms {
    pub fn scaled(self, k: f64) -> Arms {
        Arms {
            oa: self.oa * k,
            ob: self.ob * k,
            oc: self.oc * k,
            od: self.od * k,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.oa, self.ob, self.oc, self.od]
    }
}

/// A validated cross: segment AB, segment CD, crossing point O and the target
/// direction OE along which the mask's y-axis is laid out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossScribble {
    pub seg_ab: Segment,
    pub seg_cd: Segment,
    pub origin: Point2,
    pub arms: Arms,
    /// Unit vector OE.
    pub direction: Point2,
}

impl CrossScribble {
    /// Unit vector from O towards A.
    pub fn axis_a(&self) -> Point2 {
        (self.seg_ab.a - self.origin).unit()
    }

    /// Unit vector from O towards D.
    pub fn axis_d(&self) -> Point2 {
        (self.seg_cd.b - self.origin).unit()
    }

    pub fn sin_theta(&self) -> f64 {
        crossing_sine(&self.seg_ab, &self.seg_cd)
    }

    /// Acute crossing angle in degrees.
    pub fn crossing_angle_deg(&self) -> f64 {
        self.sin_theta().clamp(0.0, 1.0).asin().to_degrees()
    }

    /// Area of the outer parallelogram spanned by the four arms.
    pub fn parallelogram_area(&self) -> f64 {
        (self.arms.oa + self.arms.ob) * (self.arms.oc + self.arms.od) * self.sin_theta()
    }

    /// Whether the target direction differs from OA.
    pub fn has_direction_override(&self) -> bool {
        self.direction.distance(self.axis_a()) > 1e-12
    }
}

/// Builds a cross from segment AB and segment CD. The target direction
/// defaults to unit(A − O); `direction_override_deg` replaces it with the unit
/// vector at that angle from the +x axis.
pub fn build_cross(
    seg_ab: Segment,
    seg_cd: Segment,
    direction_override_deg: Option<f64>,
) -> Result<CrossScribble, GeometryError> {
    let hit = intersect(&seg_ab, &seg_cd)?;
    let o = hit.point;
    let arms = Arms {
        oa: o.distance(seg_ab.a),
        ob: o.distance(seg_ab.b),
        oc: o.distance(seg_cd.a),
        od: o.distance(seg_cd.b),
    };
    for (arm, length) in [("OA", arms.oa), ("OB", arms.ob), ("OC", arms.oc), ("OD", arms.od)] {
        if length < MIN_ARM_LENGTH {
            return Err(GeometryError::DegenerateArm { arm, length });
        }
    }
    let direction = match direction_override_deg {
        Some(deg) if !deg.is_finite() => return Err(GeometryError::NonFinite),
        Some(deg) => {
            let r = deg.to_radians();
            Point2::new(r.cos(), r.sin())
        }
        None => (seg_ab.a - o).unit(),
    };
    let cross = CrossScribble {
        seg_ab,
        seg_cd,
        origin: o,
        arms,
        direction,
    };
    if cross.crossing_angle_deg() < SOFT_CROSSING_ANGLE_DEG {
        log::warn!(
            "cross at ({:.1}, {:.1}) is far from perpendicular ({:.1}°)",
            o.x,
            o.y,
            cross.crossing_angle_deg()
        );
    }
    Ok(cross)
}

/// Scales every arm by `1 − rate` about the crossing point. Simulates a
/// rougher annotator who stops short of the target boundary.
pub fn shrink_cross(cross: &CrossScribble, rate: f64) -> Result<CrossScribble, GeometryError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GeometryError::InvalidRate(rate));
    }
    let k = 1.0 - rate;
    let o = cross.origin;
    let scale = |p: Point2| o + (p - o) * k;
    Ok(CrossScribble {
        seg_ab: Segment::new(scale(cross.seg_ab.a), scale(cross.seg_ab.b)),
        seg_cd: Segment::new(scale(cross.seg_cd.a), scale(cross.seg_cd.b)),
        origin: o,
        arms: cross.arms.scaled(k),
        direction: cross.direction,
    })
}
