//! Core vector types, configuration and elementary geometry.
//!
//! Coordinates are normalized to `[0, 1]²` with x to the right and y
//! downward. Under that frame a positive shoelace value means the ring is
//! traversed clockwise on screen.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consecutive points closer than this are treated as duplicates.
pub const DISTINCT_EPS: f64 = 1e-9;

/// Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Manhattan distance, the `l1` used throughout the matching costs.
    pub fn l1(self, other: Point) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point::new(x, y)
    }
}

/// Topology of a vector instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    /// Closed ring, at least three distinct points.
    Polygon,
    /// Open directed chain, at least two points.
    Polyline,
    /// Open, exactly two points.
    Segment,
}

impl StructureKind {
    pub fn is_closed(self) -> bool {
        matches!(self, StructureKind::Polygon)
    }

    pub fn min_points(self) -> usize {
        match self {
            StructureKind::Polygon => 3,
            StructureKind::Polyline | StructureKind::Segment => 2,
        }
    }

    pub fn max_points(self) -> Option<usize> {
        match self {
            StructureKind::Segment => Some(2),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StructureKind::Polygon => "polygon",
            StructureKind::Polyline => "polyline",
            StructureKind::Segment => "segment",
        }
    }

    pub fn parse(s: &str) -> Option<StructureKind> {
        match s {
            "polygon" => Some(StructureKind::Polygon),
            "polyline" => Some(StructureKind::Polyline),
            "segment" => Some(StructureKind::Segment),
            _ => None,
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const CLASS_BUILDING: u32 = 0;
pub const CLASS_ROAD_BOUNDARY: u32 = 1;
pub const CLASS_CENTER_LINE: u32 = 2;

/// Fixed class → structure mapping. Structure is never predicted on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    entries: Vec<(String, StructureKind)>,
}

impl Default for ClassTable {
    fn default() -> Self {
        ClassTable {
            entries: vec![
                ("building".into(), StructureKind::Polygon),
                ("road_boundary".into(), StructureKind::Polyline),
                ("center_line".into(), StructureKind::Segment),
            ],
        }
    }
}

impl ClassTable {
    pub fn kind(&self, class_id: u32) -> Option<StructureKind> {
        self.entries.get(class_id as usize).map(|(_, k)| *k)
    }

    pub fn name(&self, class_id: u32) -> Option<&str> {
        self.entries.get(class_id as usize).map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str, StructureKind)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, k))| (i as u32, n.as_str(), *k))
    }
}

/// Model and pipeline dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    /// Maximum instances per image.
    pub n_instances: usize,
    /// Points per vector.
    pub m_points: usize,
    /// Channel width.
    pub channels: usize,
    /// Sampling points per query, split evenly across pyramid levels.
    pub e_samples: usize,
    /// Decoder layers.
    pub layers: usize,
    /// Coarse query count.
    pub k_coarse: usize,
    /// Pyramid down-sampling factors.
    pub scales: Vec<usize>,
    /// Attention heads in every attention block.
    pub heads: usize,
    /// Key-point probability threshold used when extracting vectors.
    pub keypoint_threshold: f64,
    /// Minimum class probability for an extracted instance.
    pub score_threshold: f64,
    pub class_table: ClassTable,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            n_instances: 50,
            m_points: 40,
            channels: 64,
            e_samples: 16,
            layers: 6,
            k_coarse: 900,
            scales: vec![8, 16, 32, 64],
            heads: 8,
            keypoint_threshold: 0.5,
            score_threshold: 0.3,
            class_table: ClassTable::default(),
        }
    }
}

impl Config {
    pub fn num_classes(&self) -> usize {
        self.class_table.len()
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_instances < 1 {
            return fail("N must be ≥ 1".into());
        }
        if self.m_points < 2 {
            return fail("M must be ≥ 2".into());
        }
        if self.channels < 4 || !self.channels.is_multiple_of(2) {
            return fail(format!("C must be even and ≥ 4, got {}", self.channels));
        }
        if self.e_samples < 1 {
            return fail("E must be ≥ 1".into());
        }
        if self.layers < 1 {
            return fail("L must be ≥ 1".into());
        }
        if self.k_coarse < self.n_instances {
            return fail(format!(
                "K ({}) must be ≥ N ({})",
                self.k_coarse, self.n_instances
            ));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return fail("scales must be non-empty and positive".into());
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!(
                "heads ({}) must divide C ({})",
                self.heads, self.channels
            ));
        }
        if !(0.0..=1.0).contains(&self.keypoint_threshold)
            || !(0.0..=1.0).contains(&self.score_threshold)
        {
            return fail("thresholds must lie in [0, 1]".into());
        }
        if self.class_table.is_empty() {
            return fail("class table is empty".into());
        }
        Ok(())
    }
}

/// One vector object.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorInstance {
    pub id: u64,
    pub class_id: u32,
    pub kind: StructureKind,
    pub points: Vec<Point>,
}

impl VectorInstance {
    pub fn new(id: u64, class_id: u32, kind: StructureKind, points: Vec<Point>) -> Self {
        VectorInstance {
            id,
            class_id,
            kind,
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    /// Square raster side in pixels.
    pub raster_size: u32,
    pub instances: Vec<VectorInstance>,
}

/// Axis-aligned box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }
}

/// A single broken invariant of a [`VectorInstance`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    PointCount { kind: StructureKind, got: usize },
    NonFinite { index: usize },
    OutOfRange { index: usize },
    DuplicatePoint { index: usize },
    UnknownClass { class_id: u32 },
    ClassKindMismatch { class_id: u32, expected: StructureKind },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PointCount { kind, got } => {
                write!(f, "point count: {kind} cannot have {got} points")
            }
            Violation::NonFinite { index } => write!(f, "non-finite coordinate at point {index}"),
            Violation::OutOfRange { index } => write!(f, "out of range coordinate at point {index}"),
            Violation::DuplicatePoint { index } => {
                write!(f, "duplicate consecutive point at {index}")
            }
            Violation::UnknownClass { class_id } => write!(f, "unknown class {class_id}"),
            Violation::ClassKindMismatch { class_id, expected } => {
                write!(f, "class {class_id} must be a {expected}")
            }
        }
    }
}

/// Checks every [`VectorInstance`] invariant; an empty list means valid.
pub fn validate_instance(v: &VectorInstance, cfg: &Config) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = v.points.len();
    let count_ok = n >= v.kind.min_points() && v.kind.max_points().is_none_or(|max| n <= max);
    if !count_ok {
        out.push(Violation::PointCount { kind: v.kind, got: n });
    }
    for (i, p) in v.points.iter().enumerate() {
        if !p.is_finite() {
            out.push(Violation::NonFinite { index: i });
        } else if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
            out.push(Violation::OutOfRange { index: i });
        }
    }
    for i in 1..n {
        if v.points[i].dist(v.points[i - 1]) <= DISTINCT_EPS {
            out.push(Violation::DuplicatePoint { index: i });
        }
    }
    if v.kind.is_closed() && n >= 2 && v.points[0].dist(v.points[n - 1]) <= DISTINCT_EPS {
        out.push(Violation::DuplicatePoint { index: 0 });
    }
    match cfg.class_table.kind(v.class_id) {
        None => out.push(Violation::UnknownClass {
            class_id: v.class_id,
        }),
        Some(k) if k != v.kind => out.push(Violation::ClassKindMismatch {
            class_id: v.class_id,
            expected: k,
        }),
        Some(_) => {}
    }
    out
}

/// Shoelace value with wraparound; positive means clockwise on screen.
pub fn signed_area(points: &[Point]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    Ok(shoelace(points))
}

pub(crate) fn shoelace(points: &[Point]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

pub fn bbox_of(v: &VectorInstance) -> BBox {
    bbox_of_points(&v.points)
}

pub fn bbox_of_points(points: &[Point]) -> BBox {
    let mut b = BBox {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for p in points {
        b.x_min = b.x_min.min(p.x);
        b.y_min = b.y_min.min(p.y);
        b.x_max = b.x_max.max(p.x);
        b.y_max = b.y_max.max(p.y);
    }
    b
}

/// Euclidean distance from `p` to the closed segment `a`–`b`.
pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (t, _) = project_onto_segment(p, a, b);
    p.dist(a.lerp(b, t))
}

/// Parameter `t ∈ [0,1]` of the closest point on `a`–`b`, and its squared distance.
pub fn project_onto_segment(p: Point, a: Point, b: Point) -> (f64, f64) {
    let d = b - a;
    let len2 = d.dot(d);
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((p - a).dot(d) / len2).clamp(0.0, 1.0)
    };
    let q = a.lerp(b, t);
    let e = p - q;
    (t, e.dot(e))
}

/// Edges of a point sequence, including the closing edge for rings.
pub fn edges(points: &[Point], closed: bool) -> impl Iterator<Item = (Point, Point)> + '_ {
    let n = points.len();
    let count = if closed { n } else { n.saturating_sub(1) };
    (0..count).map(move |i| (points[i], points[(i + 1) % n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&p| p.into()).collect()
    }

    fn inst(kind: StructureKind, p: &[(f64, f64)]) -> VectorInstance {
        let class_id = match kind {
            StructureKind::Polygon => CLASS_BUILDING,
            StructureKind::Polyline => CLASS_ROAD_BOUNDARY,
            StructureKind::Segment => CLASS_CENTER_LINE,
        };
        VectorInstance::new(0, class_id, kind, pts(p))
    }

    #[test]
    fn minimal_polygon_is_valid() {
        let v = inst(StructureKind::Polygon, &[(0.1, 0.1), (0.5, 0.1), (0.3, 0.4)]);
        assert!(validate_instance(&v, &Config::default()).is_empty());
    }

    #[test]
    fn segment_with_three_points_fails_count() {
        let v = inst(StructureKind::Segment, &[(0.1, 0.1), (0.5, 0.1), (0.3, 0.4)]);
        let errs = validate_instance(&v, &Config::default());
        assert_eq!(errs.len(), 1);
        assert!(errs[0].to_string().contains("point count"));
    }

    #[test]
    fn polyline_out_of_range() {
        let v = inst(StructureKind::Polyline, &[(1.2, 0.5), (0.5, 0.5)]);
        let errs = validate_instance(&v, &Config::default());
        assert!(errs.iter().any(|e| e.to_string().contains("out of range")));
    }

    #[test]
    fn duplicates_and_class_mismatch_reported() {
        let mut v = inst(StructureKind::Polyline, &[(0.2, 0.2), (0.2, 0.2), (0.5, 0.5)]);
        v.class_id = CLASS_BUILDING;
        let errs = validate_instance(&v, &Config::default());
        assert!(errs.contains(&Violation::DuplicatePoint { index: 1 }));
        assert!(errs.iter().any(|e| matches!(e, Violation::ClassKindMismatch { .. })));
    }

    #[test]
    fn shoelace_examples() {
        let sq = pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        assert_eq!(signed_area(&sq).unwrap(), 1.0);
        let mut rev = sq.clone();
        rev.reverse();
        assert_eq!(signed_area(&rev).unwrap(), -1.0);
        let line = pts(&[(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)]);
        assert_eq!(signed_area(&line).unwrap(), 0.0);
        assert!(signed_area(&sq[..2]).is_err());
    }

    #[test]
    fn bbox_examples() {
        let sq = inst(
            StructureKind::Polygon,
            &[(0.2, 0.2), (0.4, 0.2), (0.4, 0.4), (0.2, 0.4)],
        );
        assert_eq!(
            bbox_of(&sq),
            BBox { x_min: 0.2, y_min: 0.2, x_max: 0.4, y_max: 0.4 }
        );
        let seg = inst(StructureKind::Segment, &[(0.1, 0.9), (0.3, 0.1)]);
        assert_eq!(
            bbox_of(&seg),
            BBox { x_min: 0.1, y_min: 0.1, x_max: 0.3, y_max: 0.9 }
        );
        let flat = inst(StructureKind::Polyline, &[(0.1, 0.5), (0.4, 0.5), (0.9, 0.5)]);
        let b = bbox_of(&flat);
        assert_eq!(b.y_min, 0.5);
        assert_eq!(b.y_max, 0.5);
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.n_instances, cfg.m_points, cfg.k_coarse), (50, 40, 900));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn reversal_negates_area(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..12)) {
            let p = pts(&raw);
            let mut r = p.clone();
            r.reverse();
            let a = signed_area(&p).unwrap();
            let b = signed_area(&r).unwrap();
            prop_assert!((a + b).abs() <= 1e-12);
        }

        #[test]
        fn bbox_is_order_invariant(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..12), rot in 0usize..12) {
            let p = pts(&raw);
            let mut q = p.clone();
            let k = rot % q.len();
            q.rotate_left(k);
            q.reverse();
            prop_assert_eq!(bbox_of_points(&p), bbox_of_points(&q));
        }
    }
}
