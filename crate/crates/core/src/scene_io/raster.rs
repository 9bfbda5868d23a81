//! Rasterization rules:
//!
//! * pixel `(row, col)` has its centre at `((col + 0.5)/S, (row + 0.5)/S)`;
//! * polygons are filled even-odd on pixel centres, with the scanline
//!   crossing test half-open in y (`a.y ≤ y` differs from `b.y ≤ y`), then
//!   outlined with a 1-pixel stroke so thin footprints stay visible;
//! * a normalized point maps to pixel `min(floor(v·S), S−1)` on each axis;
//! * lines are integer Bresenham between endpoint pixels, each pixel stamped
//!   with a `w×w` square covering offsets `−(w−1)/2 ..= w/2`.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::model::{edges, Point, Scene};

#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub size: usize,
    /// Row-major, values in `[0, 1]`.
    pub data: Vec<f64>,
}

impl RasterImage {
    pub fn zeros(size: usize) -> Self {
        RasterImage {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    fn set(&mut self, row: i64, col: i64) {
        let s = self.size as i64;
        if (0..s).contains(&row) && (0..s).contains(&col) {
            self.data[(row * s + col) as usize] = 1.0;
        }
    }

    pub fn lit_count(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0).count()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.data.iter().map(|v| *v > 0.0).collect()
    }

    /// Binary 8-bit PGM.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() + 32);
        write!(buf, "P5\n{} {}\n255\n", self.size, self.size)?;
        buf.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        crate::scene_io::write_atomic(path, &buf)
    }

    pub fn draw_polyline(&mut self, points: &[Point], closed: bool, stroke: usize) {
        for (a, b) in edges(points, closed) {
            self.draw_line(a, b, stroke);
        }
    }

    fn pixel_of(&self, p: Point) -> (i64, i64) {
        let s = self.size as f64;
        let max = self.size as i64 - 1;
        let col = ((p.x * s).floor() as i64).clamp(0, max);
        let row = ((p.y * s).floor() as i64).clamp(0, max);
        (row, col)
    }

    pub fn draw_line(&mut self, a: Point, b: Point, stroke: usize) {
        let (r0, c0) = self.pixel_of(a);
        let (r1, c1) = self.pixel_of(b);
        let lo = -((stroke as i64 - 1) / 2);
        let hi = stroke as i64 / 2;
        let dc = (c1 - c0).abs();
        let dr = -(r1 - r0).abs();
        let sc = if c0 < c1 { 1 } else { -1 };
        let sr = if r0 < r1 { 1 } else { -1 };
        let (mut c, mut r) = (c0, r0);
        let mut err = dc + dr;
        loop {
            for or in lo..=hi {
                for oc in lo..=hi {
                    self.set(r + or, c + oc);
                }
            }
            if c == c1 && r == r1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dr {
                err += dr;
                c += sc;
            }
            if e2 <= dc {
                err += dc;
                r += sr;
            }
        }
    }

    pub fn fill_polygon(&mut self, ring: &[Point]) {
        let s = self.size as f64;
        let mut xs = Vec::new();
        for row in 0..self.size {
            let y = (row as f64 + 0.5) / s;
            xs.clear();
            for (a, b) in edges(ring, true) {
                if (a.y <= y) != (b.y <= y) {
                    xs.push(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // Centres with pair[0] ≤ (col+0.5)/S < pair[1].
                let first = (pair[0] * s - 0.5).ceil().max(0.0) as usize;
                for col in first..self.size {
                    let x = (col as f64 + 0.5) / s;
                    if x >= pair[1] {
                        break;
                    }
                    self.data[row * self.size + col] = 1.0;
                }
            }
        }
    }
}

/// Renders polygons filled and open vectors stroked at `stroke_px`.
pub fn rasterize(scene: &Scene, stroke_px: usize) -> RasterImage {
    let mut img = RasterImage::zeros(scene.raster_size as usize);
    let stroke = stroke_px.max(1);
    for v in &scene.instances {
        if v.kind.is_closed() {
            img.fill_polygon(&v.points);
            img.draw_polyline(&v.points, true, 1);
        } else {
            img.draw_polyline(&v.points, false, stroke);
        }
    }
    img
}

/// Exact Euclidean distance (in pixels) from every pixel to the nearest set
/// pixel of `mask`; `f64::INFINITY` everywhere when the mask is empty.
/// Two-pass lower-envelope transform over squared distances.
pub fn distance_transform(mask: &[bool], size: usize) -> Vec<f64> {
    let inf = f64::INFINITY;
    let mut grid: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { inf }).collect();
    let mut line = vec![0.0; size];
    let mut out = vec![0.0; size];
    for c in 0..size {
        for r in 0..size {
            line[r] = grid[r * size + c];
        }
        envelope_1d(&line, &mut out);
        for r in 0..size {
            grid[r * size + c] = out[r];
        }
    }
    for r in 0..size {
        line.copy_from_slice(&grid[r * size..(r + 1) * size]);
        envelope_1d(&line, &mut out);
        grid[r * size..(r + 1) * size].copy_from_slice(&out);
    }
    grid.iter_mut().for_each(|v| *v = v.sqrt());
    grid
}

/// `out[q] = min_p (q − p)² + f[p]`.
fn envelope_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{StructureKind, VectorInstance, CLASS_BUILDING, CLASS_CENTER_LINE};

    fn scene(size: u32, instances: Vec<VectorInstance>) -> Scene {
        Scene {
            image_id: 1,
            raster_size: size,
            instances,
        }
    }

    #[test]
    fn full_square_fills_everything() {
        let sq = VectorInstance::new(
            1,
            CLASS_BUILDING,
            StructureKind::Polygon,
            vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(1.0, 1.0),
                Point::new(0.0, 1.0),
            ],
        );
        let img = rasterize(&scene(16, vec![sq]), 1);
        assert!(img.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn empty_scene_is_black() {
        let img = rasterize(&scene(16, vec![]), 3);
        assert_eq!(img.lit_count(), 0);
    }

    /// Bresenham along a row lights exactly the pixels whose column lies
    /// between the endpoint columns.
    #[test]
    fn horizontal_segment_lights_one_row() {
        let seg = VectorInstance::new(
            1,
            CLASS_CENTER_LINE,
            StructureKind::Segment,
            vec![Point::new(0.0, 0.5), Point::new(1.0, 0.5)],
        );
        let img = rasterize(&scene(16, vec![seg]), 1);
        assert_eq!(img.lit_count(), 16);
        assert!((0..16).all(|c| img.get(8, c) == 1.0));
    }

    #[test]
    fn stroke_width_widens_line() {
        let seg = VectorInstance::new(
            1,
            CLASS_CENTER_LINE,
            StructureKind::Segment,
            vec![Point::new(0.0, 0.5), Point::new(1.0, 0.5)],
        );
        let img = rasterize(&scene(16, vec![seg]), 3);
        assert_eq!(img.lit_count(), 48);
    }

    fn brute_force_dt(mask: &[bool], size: usize) -> Vec<f64> {
        let lit: Vec<(usize, usize)> = (0..size * size)
            .filter(|&i| mask[i])
            .map(|i| (i / size, i % size))
            .collect();
        (0..size * size)
            .map(|i| {
                let (r, c) = (i / size, i % size);
                lit.iter()
                    .map(|&(a, b)| ((r as f64 - a as f64).powi(2) + (c as f64 - b as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for trial in 0..20 {
            let size = 5 + trial % 13;
            let mask: Vec<bool> = (0..size * size).map(|_| rng.gen_bool(0.08)).collect();
            let fast = distance_transform(&mask, size);
            let slow = brute_force_dt(&mask, size);
            for (a, b) in fast.iter().zip(&slow) {
                assert!(a == b || (a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn distance_transform_of_empty_mask_is_infinite() {
        assert!(distance_transform(&[false; 9], 3).iter().all(|d| d.is_infinite()));
    }
}
