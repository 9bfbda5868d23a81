//! Deterministic multi-scale feature pyramid standing in for a trained
//! backbone and encoder.
//!
//! Each level is built from six raw per-pixel channels (intensity,
//! horizontal and vertical central differences, distance to the nearest lit
//! pixel divided by the raster size, x and y of the pixel centre),
//! average-pooled by the level's down-sampling factor and projected to `C`
//! channels with a seeded Xavier-uniform matrix shared by all levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Config, Point};
use crate::scene_io::{distance_transform, RasterImage};

pub const RAW_CHANNELS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub factor: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `height × width × channels`, row-major.
    pub data: Vec<f64>,
    /// Pooled raw channels before projection.
    pub raw: Vec<[f64; RAW_CHANNELS]>,
}

impl FeatureLevel {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Normalized centre of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        Point::new(
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn channels(&self) -> usize {
        self.levels.first().map_or(0, |l| l.channels)
    }

    pub fn token_count(&self) -> usize {
        self.levels.iter().map(FeatureLevel::cells).sum()
    }
}

pub fn build_pyramid(img: &RasterImage, cfg: &Config, seed: u64) -> FeaturePyramid {
    let s = img.size;
    let raw = raw_channels(img);
    let proj = projection(cfg.channels, seed);
    let levels = cfg
        .scales
        .iter()
        .map(|&factor| {
            let n = s.div_ceil(factor);
            let mut pooled = vec![[0.0; RAW_CHANNELS]; n * n];
            for i in 0..n {
                for j in 0..n {
                    let rows = i * factor..((i + 1) * factor).min(s);
                    let cols = j * factor..((j + 1) * factor).min(s);
                    let count = (rows.len() * cols.len()) as f64;
                    let acc = &mut pooled[i * n + j];
                    for r in rows {
                        for c in cols.clone() {
                            for (a, v) in acc.iter_mut().zip(&raw[r * s + c]) {
                                *a += v;
                            }
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= count);
                }
            }
            let mut data = Vec::with_capacity(n * n * cfg.channels);
            for cell in &pooled {
                for w in &proj {
                    data.push(w.iter().zip(cell).map(|(a, b)| a * b).sum());
                }
            }
            FeatureLevel {
                factor,
                height: n,
                width: n,
                channels: cfg.channels,
                data,
                raw: pooled,
            }
        })
        .collect();
    FeaturePyramid { levels }
}

fn raw_channels(img: &RasterImage) -> Vec<[f64; RAW_CHANNELS]> {
    let s = img.size;
    let dist = distance_transform(&img.mask(), s);
    let at = |r: usize, c: usize| img.data[r * s + c];
    let mut out = Vec::with_capacity(s * s);
    for r in 0..s {
        for c in 0..s {
            let gx = 0.5 * (at(r, (c + 1).min(s - 1)) - at(r, c.saturating_sub(1)));
            let gy = 0.5 * (at((r + 1).min(s - 1), c) - at(r.saturating_sub(1), c));
            let d = dist[r * s + c];
            let d = if d.is_finite() { (d / s as f64).min(1.0) } else { 1.0 };
            out.push([
                at(r, c),
                gx,
                gy,
                d,
                (c as f64 + 0.5) / s as f64,
                (r as f64 + 0.5) / s as f64,
            ]);
        }
    }
    out
}

fn projection(channels: usize, seed: u64) -> Vec<[f64; RAW_CHANNELS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xfea7);
    let bound = (6.0 / (RAW_CHANNELS + channels) as f64).sqrt();
    (0..channels)
        .map(|_| {
            let mut row = [0.0; RAW_CHANNELS];
            row.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
            row
        })
        .collect()
}

/// Bilinear read with half-pixel alignment (`u ↦ u·W − 0.5`) and zero
/// padding outside the grid.
pub fn bilinear_sample(level: &FeatureLevel, xy: Point) -> Vec<f64> {
    let mut out = vec![0.0; level.channels];
    bilinear_accumulate(level, xy, 1.0, &mut out);
    out
}

/// Adds `weight × bilinear_sample(level, xy)` into `out`.
pub fn bilinear_accumulate(level: &FeatureLevel, xy: Point, weight: f64, out: &mut [f64]) {
    let u = xy.x * level.width as f64 - 0.5;
    let v = xy.y * level.height as f64 - 0.5;
    if !u.is_finite() || !v.is_finite() {
        return;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1.0, (1.0 - fy) * fx),
        (y0 + 1.0, x0, fy * (1.0 - fx)),
        (y0 + 1.0, x0 + 1.0, fy * fx),
    ];
    for (r, c, w) in corners {
        if w == 0.0 || r < 0.0 || c < 0.0 || r >= level.height as f64 || c >= level.width as f64 {
            continue;
        }
        let cell = level.cell(r as usize, c as usize);
        for (o, f) in out.iter_mut().zip(cell) {
            *o += weight * w * f;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Scene;
    use crate::scene_io::{generate_scenes, rasterize, GenParams};

    fn cfg(c: usize) -> Config {
        Config {
            channels: c,
            ..Config::default()
        }
    }

    #[test]
    fn level_sizes_use_ceiling_division() {
        let img = RasterImage::zeros(64);
        let p = build_pyramid(&img, &cfg(8), 0);
        let sizes: Vec<usize> = p.levels.iter().map(|l| l.width).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1]);
        let odd = build_pyramid(&RasterImage::zeros(50), &cfg(8), 0);
        assert_eq!(odd.levels[0].width, 7);
    }

    #[test]
    fn zero_raster_has_zero_signal_channels() {
        let img = RasterImage::zeros(32);
        let p = build_pyramid(&img, &cfg(8), 3);
        for l in &p.levels {
            for (i, raw) in l.raw.iter().enumerate() {
                assert_eq!(&raw[..3], &[0.0, 0.0, 0.0]);
                let (r, c) = (i / l.width, i % l.width);
                let center = l.cell_center(r, c);
                assert!((raw[4] - center.x).abs() < 1e-12);
                assert!((raw[5] - center.y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_is_deterministic() {
        let scene: Scene = generate_scenes(&GenParams::default()).unwrap().remove(0);
        let img = rasterize(&scene, 1);
        let a = build_pyramid(&img, &cfg(16), 5);
        let b = build_pyramid(&img, &cfg(16), 5);
        assert_eq!(a, b);
        assert!(a.levels.iter().all(|l| l.data.iter().all(|v| v.is_finite())));
    }

    fn level(w: usize, c: usize, f: impl FnMut(usize) -> f64) -> FeatureLevel {
        FeatureLevel {
            factor: 1,
            height: w,
            width: w,
            channels: c,
            data: (0..w * w * c).map(f).collect(),
            raw: vec![[0.0; RAW_CHANNELS]; w * w],
        }
    }

    #[test]
    fn sampling_cell_centres_and_midpoints() {
        let l = level(4, 3, |i| (i as f64 * 0.37).sin());
        let at = bilinear_sample(&l, l.cell_center(2, 1));
        assert_eq!(at, l.cell(2, 1));
        let mid = bilinear_sample(&l, Point::new(2.0 / 4.0, 2.5 / 4.0));
        for k in 0..3 {
            let want = 0.5 * (l.cell(2, 1)[k] + l.cell(2, 2)[k]);
            assert!((mid[k] - want).abs() < 1e-12);
        }
        assert_eq!(bilinear_sample(&l, Point::new(-10.0, -10.0)), vec![0.0; 3]);
    }

    #[test]
    fn sampling_is_lipschitz() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let w = rng.gen_range(2..10);
            let l = level(w, 2, |_| rng.gen_range(-1.0..1.0));
            let max = l.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let p = Point::new(rng.gen_range(-0.2..1.2), rng.gen_range(-0.2..1.2));
            let delta = 1e-4;
            let q = Point::new(p.x + delta, p.y);
            let a = bilinear_sample(&l, p);
            let b = bilinear_sample(&l, q);
            let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff <= 2.0 * w as f64 * max * delta + 1e-12);
        }
    }
}
