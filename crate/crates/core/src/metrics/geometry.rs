use crate::error::{Error, Result};
use crate::model::{point_segment_distance, signed_area, Point};

fn check_polygon(p: &[Point]) -> Result<()> {
    if p.len() < 3 || signed_area(p)? == 0.0 {
        return Err(Error::DegeneratePolygon);
    }
    Ok(())
}

fn boundary_distance(p: Point, ring: &[Point]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| point_segment_distance(p, ring[i], ring[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

/// Symmetrized mean vertex-to-boundary distance.
pub fn polis(a: &[Point], b: &[Point]) -> Result<f64> {
    check_polygon(a)?;
    check_polygon(b)?;
    let ab: f64 = a.iter().map(|&p| boundary_distance(p, b)).sum();
    let ba: f64 = b.iter().map(|&p| boundary_distance(p, a)).sum();
    Ok(ab / (2.0 * a.len() as f64) + ba / (2.0 * b.len() as f64))
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed segments `a0–a1` and `b0–b1` share at least one point.
fn segments_touch(a0: Point, a1: Point, b0: Point, b1: Point) -> bool {
    let d1 = cross(b0, b1, a0);
    let d2 = cross(b0, b1, a1);
    let d3 = cross(a0, a1, b0);
    let d4 = cross(a0, a1, b1);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(a0, b0, b1))
        || (d2 == 0.0 && on_segment(a1, b0, b1))
        || (d3 == 0.0 && on_segment(b0, a0, a1))
        || (d4 == 0.0 && on_segment(b1, a0, a1))
}

/// True when two non-adjacent edges of the ring touch, or two adjacent
/// edges fold back onto each other.
pub fn is_self_intersecting(ring: &[Point]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a0, a1) = (ring[i], ring[(i + 1) % n]);
        for j in i + 1..n {
            let (b0, b1) = (ring[j], ring[(j + 1) % n]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Shared vertex; only a collinear overlap counts.
                let shared = if j == i + 1 { a1 } else { a0 };
                let (p, q) = if j == i + 1 { (a0, b1) } else { (a1, b0) };
                if cross(shared, p, q) == 0.0 && (p - shared).dot(q - shared) > 0.0 {
                    return true;
                }
            } else if segments_touch(a0, a1, b0, b1) {
                return true;
            }
        }
    }
    false
}

/// Clips a polygon by a counter-clockwise (positive shoelace) convex
/// triangle.
fn clip_by_triangle(subject: &[Point], tri: [Point; 3]) -> Vec<Point> {
    let mut out = subject.to_vec();
    for k in 0..3 {
        let (e0, e1) = (tri[k], tri[(k + 1) % 3]);
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            break;
        }
        let inside = |p: Point| cross(e0, e1, p) >= 0.0;
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci != pi {
                let dp = cross(e0, e1, prev);
                let dc = cross(e0, e1, cur);
                out.push(prev.lerp(cur, dp / (dp - dc)));
            }
            if ci {
                out.push(cur);
            }
        }
    }
    out
}

fn area(points: &[Point]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (points[i], points[(i + 1) % n]);
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

/// Fan triangles from `origin`, each with its orientation sign, oriented
/// positively so clipping can treat them as convex windows.
fn fan(ring: &[Point], origin: Point) -> Vec<([Point; 3], f64)> {
    let n = ring.len();
    (0..n)
        .filter_map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            let s = cross(origin, a, b);
            if s > 0.0 {
                Some(([origin, a, b], 1.0))
            } else if s < 0.0 {
                Some(([origin, b, a], -1.0))
            } else {
                None
            }
        })
        .collect()
}

/// Area of the intersection of two simple polygons, as a signed sum of
/// pairwise intersections of their fan triangles.
pub fn intersection_area(a: &[Point], b: &[Point]) -> f64 {
    let sa = if area(a) < 0.0 { -1.0 } else { 1.0 };
    let sb = if area(b) < 0.0 { -1.0 } else { 1.0 };
    let origin = a[0];
    let fa = fan(a, origin);
    let fb = fan(b, origin);
    let mut total = 0.0;
    for (ta, sta) in &fa {
        for (tb, stb) in &fb {
            let clipped = clip_by_triangle(tb, *ta);
            total += sta * stb * area(&clipped);
        }
    }
    (total * sa * sb).max(0.0)
}

/// Intersection over union of two simple polygons.
pub fn polygon_iou(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.len() < 3 || b.len() < 3 {
        return Err(Error::DegeneratePolygon);
    }
    if is_self_intersecting(a) || is_self_intersecting(b) {
        return Err(Error::SelfIntersecting);
    }
    check_polygon(a)?;
    check_polygon(b)?;
    let (aa, ab) = (area(a).abs(), area(b).abs());
    let inter = intersection_area(a, b).min(aa).min(ab);
    let union = aa + ab - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// IoU discounted by the relative difference in vertex count.
pub fn ciou(a: &[Point], b: &[Point]) -> Result<f64> {
    let iou = polygon_iou(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    Ok(iou * (1.0 - (na - nb).abs() / (na + nb)))
}
