//! Canonical uniform resampling of vectors into fixed-length point sequences.
//!
//! Polygons are walked clockwise (shoelace ≥ 0 in the y-down frame) starting
//! from the top-left vertex; open vectors keep their given direction and may
//! additionally be offered reversed. After placing `M` samples at equal
//! arc-length steps, every original key point replaces the sample nearest to
//! it along the curve, so the `T` key points survive exactly and are flagged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{edges, shoelace, Point, StructureKind, VectorInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Forward,
    Reversed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub points: Vec<Point>,
    pub key_flags: Vec<bool>,
    pub source_id: u64,
    pub kind: StructureKind,
    pub orientation: Orientation,
}

impl SampledSequence {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn key_indices(&self) -> Vec<usize> {
        self.key_flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }

    pub fn key_points(&self) -> Vec<Point> {
        self.key_indices().into_iter().map(|i| self.points[i]).collect()
    }

    /// Same samples walked the other way round.
    pub fn reversed(&self) -> SampledSequence {
        let mut points = self.points.clone();
        let mut key_flags = self.key_flags.clone();
        points.reverse();
        key_flags.reverse();
        SampledSequence {
            points,
            key_flags,
            source_id: self.source_id,
            kind: self.kind,
            orientation: match self.orientation {
                Orientation::Forward => Orientation::Reversed,
                Orientation::Reversed => Orientation::Forward,
            },
        }
    }
}

pub fn arc_length(v: &VectorInstance) -> f64 {
    polyline_length(&v.points, v.kind.is_closed())
}

pub(crate) fn polyline_length(points: &[Point], closed: bool) -> f64 {
    edges(points, closed).map(|(a, b)| a.dist(b)).sum()
}

/// Index of the vertex with the smallest `(y, x)`.
pub fn top_left_start(points: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = points[best];
        if p.y < b.y || (p.y == b.y && p.x < b.x) {
            best = i;
        }
    }
    best
}

/// Key points in canonical traversal order: clockwise from the top-left
/// vertex for polygons, unchanged for open kinds.
pub fn canonical_key_points(v: &VectorInstance) -> Vec<Point> {
    let mut pts = v.points.clone();
    if v.kind.is_closed() {
        if shoelace(&pts) < 0.0 {
            pts.reverse();
        }
        let start = top_left_start(&pts);
        pts.rotate_left(start);
    }
    pts
}

pub fn resample_uniform(v: &VectorInstance, m: usize) -> Result<SampledSequence> {
    let keys = canonical_key_points(v);
    let t = keys.len();
    if m < t || m < 2 {
        return Err(Error::InsufficientResolution {
            key_points: t,
            samples: m,
        });
    }
    let closed = v.kind.is_closed();

    let mut cum = Vec::with_capacity(t + 1);
    cum.push(0.0);
    for (a, b) in edges(&keys, closed) {
        let last = *cum.last().unwrap();
        cum.push(last + a.dist(b));
    }
    let total = *cum.last().unwrap();
    let intervals = if closed { m } else { m - 1 };
    let spacing = total / intervals as f64;

    let mut points = Vec::with_capacity(m);
    let mut edge = 0;
    let n_edges = cum.len() - 1;
    for k in 0..m {
        if !closed && k == m - 1 {
            points.push(keys[t - 1]);
            break;
        }
        let s = k as f64 * spacing;
        while edge + 1 < n_edges && cum[edge + 1] <= s {
            edge += 1;
        }
        let a = keys[edge];
        let b = keys[(edge + 1) % t];
        let len = cum[edge + 1] - cum[edge];
        let frac = if len > 0.0 {
            ((s - cum[edge]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        points.push(a.lerp(b, frac));
    }

    // Key-point positions measured in sample steps.
    let positions: Vec<f64> = cum[..t].iter().map(|c| c / spacing).collect();
    let slots = snap_slots(&positions, m, closed);
    let mut key_flags = vec![false; m];
    for (i, &k) in slots.iter().enumerate() {
        points[k] = keys[i];
        key_flags[k] = true;
    }

    Ok(SampledSequence {
        points,
        key_flags,
        source_id: v.id,
        kind: v.kind,
        orientation: Orientation::Forward,
    })
}

/// Strictly increasing sample slots minimizing total displacement
/// `Σ |position_i − slot_i|`; ties resolve to the lexicographically smallest
/// slot vector. The first key point is pinned to slot 0 and, for open
/// vectors, the last one to slot `m − 1`.
fn snap_slots(positions: &[f64], m: usize, closed: bool) -> Vec<usize> {
    let t = positions.len();
    let lo = |i: usize| i;
    let hi = |i: usize| m - t + i;
    let allowed = |i: usize, k: usize| {
        if i == 0 {
            k == 0
        } else if !closed && i == t - 1 {
            k == m - 1
        } else {
            k >= lo(i) && k <= hi(i)
        }
    };

    // best[i][k]: cost of keys i.. with key i at slot k.
    // suffix[i][k]: min over k' ≥ k of best[i][k'].
    let inf = f64::INFINITY;
    let mut best = vec![vec![inf; m + 1]; t];
    let mut suffix = vec![vec![inf; m + 1]; t];
    for i in (0..t).rev() {
        for k in 0..m {
            if !allowed(i, k) {
                continue;
            }
            let here = (positions[i] - k as f64).abs();
            let rest = if i + 1 == t { 0.0 } else { suffix[i + 1][k + 1] };
            if rest.is_finite() {
                best[i][k] = here + rest;
            }
        }
        for k in (0..m).rev() {
            suffix[i][k] = best[i][k].min(suffix[i][k + 1]);
        }
    }

    let mut slots = Vec::with_capacity(t);
    let mut from = 0;
    for i in 0..t {
        let target = suffix[i][from];
        let k = (from..m)
            .find(|&k| best[i][k] == target)
            .expect("M ≥ T guarantees a feasible slot");
        slots.push(k);
        from = k + 1;
    }
    slots
}

/// One canonical candidate for polygons; forward and reversed for open kinds.
pub fn orientation_candidates(v: &VectorInstance, m: usize) -> Result<Vec<SampledSequence>> {
    let forward = resample_uniform(v, m)?;
    if v.kind.is_closed() {
        Ok(vec![forward])
    } else {
        let reversed = forward.reversed();
        Ok(vec![forward, reversed])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CLASS_BUILDING, CLASS_CENTER_LINE, CLASS_ROAD_BOUNDARY};

    fn shape(kind: StructureKind, p: &[(f64, f64)]) -> VectorInstance {
        let class = match kind {
            StructureKind::Polygon => CLASS_BUILDING,
            StructureKind::Polyline => CLASS_ROAD_BOUNDARY,
            StructureKind::Segment => CLASS_CENTER_LINE,
        };
        VectorInstance::new(3, class, kind, p.iter().map(|&q| q.into()).collect())
    }

    /// Walks the curve and places samples by repeated subtraction, a
    /// different route to the cumulative-length search used above.
    fn walk_oracle(keys: &[(f64, f64)], closed: bool, m: usize) -> Vec<(f64, f64)> {
        let pts: Vec<Point> = keys.iter().map(|&q| q.into()).collect();
        let segs: Vec<(Point, Point)> = edges(&pts, closed).collect();
        let total: f64 = segs.iter().map(|(a, b)| a.dist(*b)).sum();
        let step = total / if closed { m } else { m - 1 } as f64;
        (0..m)
            .map(|k| {
                let mut rem = step * k as f64;
                for (a, b) in &segs {
                    let l = a.dist(*b);
                    if rem <= l {
                        let p = a.lerp(*b, rem / l);
                        return (p.x, p.y);
                    }
                    rem -= l;
                }
                let p = segs.last().unwrap().1;
                (p.x, p.y)
            })
            .collect()
    }

    fn assert_close(got: &[Point], want: &[(f64, f64)]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g.x - w.0).abs() < 1e-12 && (g.y - w.1).abs() < 1e-12, "{g:?} vs {w:?}");
        }
    }

    #[test]
    fn arc_length_examples() {
        let sq = shape(StructureKind::Polygon, &[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        assert_eq!(arc_length(&sq), 4.0);
        let seg = shape(StructureKind::Segment, &[(0.0, 0.0), (0.0, 0.5)]);
        assert_eq!(arc_length(&seg), 0.5);
        let pl = shape(StructureKind::Polyline, &[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]);
        assert_eq!(arc_length(&pl), 2.0);
    }

    #[test]
    fn top_left_examples() {
        let p = |v: &[(f64, f64)]| v.iter().map(|&q| q.into()).collect::<Vec<Point>>();
        assert_eq!(top_left_start(&p(&[(0.5, 0.5), (0.1, 0.1), (0.9, 0.1)])), 1);
        assert_eq!(top_left_start(&p(&[(0.3, 0.1), (0.1, 0.1), (0.5, 0.5)])), 1);
        assert_eq!(top_left_start(&p(&[(0.6, 0.2), (0.4, 0.2), (0.2, 0.2)])), 2);
    }

    #[test]
    fn unit_square_eight_samples() {
        let keys = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let s = resample_uniform(&shape(StructureKind::Polygon, &keys), 8).unwrap();
        let oracle = walk_oracle(&keys, true, 8);
        assert_close(&s.points, &oracle);
        assert_close(
            &s.points,
            &[(0.0, 0.0), (0.5, 0.0), (1.0, 0.0), (1.0, 0.5), (1.0, 1.0), (0.5, 1.0), (0.0, 1.0), (0.0, 0.5)],
        );
        assert_eq!(s.key_indices(), vec![0, 2, 4, 6]);
    }

    #[test]
    fn counter_clockwise_square_is_reoriented() {
        let keys = [(0.0, 1.0), (1.0, 1.0), (1.0, 0.0), (0.0, 0.0)];
        let s = resample_uniform(&shape(StructureKind::Polygon, &keys), 8).unwrap();
        assert_eq!(s.points[0], Point::new(0.0, 0.0));
        assert_eq!(s.points[2], Point::new(1.0, 0.0));
    }

    #[test]
    fn segment_midpoint() {
        let s = resample_uniform(&shape(StructureKind::Segment, &[(0.0, 0.0), (1.0, 0.0)]), 3).unwrap();
        assert_close(&s.points, &[(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)]);
    }

    #[test]
    fn polyline_five_samples() {
        let keys = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)];
        let s = resample_uniform(&shape(StructureKind::Polyline, &keys), 5).unwrap();
        let oracle = walk_oracle(&keys, false, 5);
        assert_close(&s.points, &oracle);
        assert_close(&s.points, &[(0.0, 0.0), (0.5, 0.0), (1.0, 0.0), (1.0, 0.5), (1.0, 1.0)]);
    }

    #[test]
    fn too_few_samples_rejected() {
        let v = shape(StructureKind::Polygon, &[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        assert!(matches!(
            resample_uniform(&v, 3),
            Err(Error::InsufficientResolution { key_points: 4, samples: 3 })
        ));
    }

    #[test]
    fn crowded_key_points_stay_injective() {
        // Three vertices within one sample step.
        let v = shape(
            StructureKind::Polyline,
            &[(0.0, 0.0), (0.01, 0.0), (0.02, 0.0), (1.0, 0.0)],
        );
        let s = resample_uniform(&v, 5).unwrap();
        assert_eq!(s.key_indices(), vec![0, 1, 2, 4]);
        assert_eq!(s.key_points(), v.points);
    }

    #[test]
    fn candidates() {
        let sq = shape(StructureKind::Polygon, &[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        assert_eq!(orientation_candidates(&sq, 8).unwrap().len(), 1);
        let seg = shape(StructureKind::Segment, &[(0.0, 0.0), (1.0, 0.0)]);
        let c = orientation_candidates(&seg, 3).unwrap();
        assert_eq!(c.len(), 2);
        assert_close(&c[1].points, &[(1.0, 0.0), (0.5, 0.0), (0.0, 0.0)]);
        assert_eq!(c[1].orientation, Orientation::Reversed);
        let pl = shape(StructureKind::Polyline, &[(0.1, 0.1), (0.5, 0.2), (0.9, 0.7)]);
        let c = orientation_candidates(&pl, 7).unwrap();
        let mut a = c[0].points.clone();
        a.reverse();
        assert_eq!(a, c[1].points);
    }
}
