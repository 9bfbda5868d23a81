use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Point, Scene, StructureKind, VectorInstance, CLASS_BUILDING, CLASS_CENTER_LINE,
    CLASS_ROAD_BOUNDARY, DISTINCT_EPS,
};

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    pub n_scenes: usize,
    /// Inclusive range of instances per scene.
    pub instances_min: usize,
    pub instances_max: usize,
    /// Probabilities of building, road boundary and center line.
    pub class_mix: [f64; 3],
    pub raster_size: u32,
    /// Positional noise std for predicted-like copies, normalized units.
    pub jitter: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            n_scenes: 1,
            instances_min: 10,
            instances_max: 10,
            class_mix: [0.706, 0.189, 0.105],
            raster_size: 256,
            jitter: 0.005,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!(
                "class mix must be non-negative and sum to 1, got {:?}",
                self.class_mix
            )));
        }
        if self.instances_min > self.instances_max {
            return Err(Error::Config("instance range is empty".into()));
        }
        if self.raster_size == 0 {
            return Err(Error::Config("raster size must be positive".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Independent stream keyed by `(seed, scene, instance)`; the ChaCha stream
/// id carries the two indices so generation order never matters.
pub fn stream_rng(seed: u64, scene: u32, instance: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((scene as u64) << 32) | instance as u64);
    rng
}

const COUNT_STREAM: u32 = u32::MAX;
const MARGIN: f64 = 0.02;

pub fn generate_scenes(p: &GenParams) -> Result<Vec<Scene>> {
    p.validate()?;
    let scenes = (0..p.n_scenes)
        .into_par_iter()
        .map(|s| generate_scene(p, s as u32))
        .collect();
    Ok(scenes)
}

fn generate_scene(p: &GenParams, scene: u32) -> Scene {
    let mut count_rng = stream_rng(p.seed, scene, COUNT_STREAM);
    let count = count_rng.gen_range(p.instances_min..=p.instances_max);
    let instances = (0..count)
        .map(|i| {
            let mut rng = stream_rng(p.seed, scene, i as u32);
            let class_id = pick_class(&mut rng, &p.class_mix);
            let id = scene as u64 * (p.instances_max as u64 + 1) + i as u64 + 1;
            match class_id {
                CLASS_BUILDING => VectorInstance::new(
                    id,
                    class_id,
                    StructureKind::Polygon,
                    building(&mut rng),
                ),
                CLASS_ROAD_BOUNDARY => VectorInstance::new(
                    id,
                    class_id,
                    StructureKind::Polyline,
                    road_boundary(&mut rng),
                ),
                _ => VectorInstance::new(
                    id,
                    CLASS_CENTER_LINE,
                    StructureKind::Segment,
                    center_line(&mut rng),
                ),
            }
        })
        .collect();
    Scene {
        image_id: scene as u64 + 1,
        raster_size: p.raster_size,
        instances,
    }
}

fn pick_class(rng: &mut ChaCha8Rng, mix: &[f64; 3]) -> u32 {
    let u: f64 = rng.gen();
    if u < mix[0] {
        CLASS_BUILDING
    } else if u < mix[0] + mix[1] {
        CLASS_ROAD_BOUNDARY
    } else {
        CLASS_CENTER_LINE
    }
}

/// Convex (ellipse-inscribed) or rectilinear footprint, 4–12 vertices.
fn building(rng: &mut ChaCha8Rng) -> Vec<Point> {
    let radius = rng.gen_range(0.03..0.12);
    let local = if rng.gen_bool(0.5) {
        convex_ring(rng)
    } else {
        rectilinear_ring(rng)
    };
    let rot = rng.gen_range(-PI / 4.0..PI / 4.0);
    let (s, c) = rot.sin_cos();
    let lo = MARGIN + radius;
    let hi = 1.0 - MARGIN - radius;
    let center = Point::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi));
    // Local rings lie in the unit disc.
    local
        .into_iter()
        .map(|q| Point::new(c * q.x - s * q.y, s * q.x + c * q.y) * radius + center)
        .collect()
}

fn convex_ring(rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = rng.gen_range(4..=12);
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let aspect = rng.gen_range(0.5..1.0);
    let mut theta = rng.gen_range(0.0..2.0 * PI);
    weights
        .iter()
        .map(|w| {
            let p = Point::new(theta.cos(), aspect * theta.sin());
            theta += 2.0 * PI * w / total;
            p
        })
        .collect()
}

fn rectilinear_ring(rng: &mut ChaCha8Rng) -> Vec<Point> {
    let w = rng.gen_range(0.6..1.0);
    let h = rng.gen_range(0.6..1.0);
    let raw: Vec<(f64, f64)> = match rng.gen_range(0..3) {
        0 => vec![(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)],
        1 => {
            let a = rng.gen_range(0.3..0.7) * w;
            let b = rng.gen_range(0.3..0.7) * h;
            vec![(0.0, 0.0), (w, 0.0), (w, b), (a, b), (a, h), (0.0, h)]
        }
        _ => {
            let a = rng.gen_range(0.15..0.35) * w;
            let b = rng.gen_range(0.15..0.35) * h;
            vec![
                (0.0, 0.0),
                (w - a, 0.0),
                (w - a, b),
                (w, b),
                (w, h),
                (a, h),
                (a, h - b),
                (0.0, h - b),
            ]
        }
    };
    // Centre on the box and scale into the unit disc.
    let scale = 1.0 / (0.5 * w).hypot(0.5 * h);
    raw.into_iter()
        .map(|(x, y)| Point::new((x - 0.5 * w) * scale, (y - 0.5 * h) * scale))
        .collect()
}

/// Smooth open chain with bounded turning, fitted into a random sub-box.
fn road_boundary(rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = rng.gen_range(3..=15);
    let mut heading = rng.gen_range(0.0..2.0 * PI);
    let mut p = Point::new(0.0, 0.0);
    let mut local = vec![p];
    for _ in 1..n {
        let step = rng.gen_range(0.5..1.5);
        heading += rng.gen_range(-0.35..0.35);
        p = p + Point::new(heading.cos(), heading.sin()) * step;
        local.push(p);
    }
    let min_x = local.iter().map(|q| q.x).fold(f64::INFINITY, f64::min);
    let min_y = local.iter().map(|q| q.y).fold(f64::INFINITY, f64::min);
    let max_x = local.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max);
    let max_y = local.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max);
    let extent = rng.gen_range(0.2..0.8);
    let scale = extent / (max_x - min_x).max(max_y - min_y);
    let span = 1.0 - 2.0 * MARGIN;
    let off_x = MARGIN + rng.gen_range(0.0..=(span - scale * (max_x - min_x)));
    let off_y = MARGIN + rng.gen_range(0.0..=(span - scale * (max_y - min_y)));
    local
        .into_iter()
        .map(|q| Point::new(off_x + (q.x - min_x) * scale, off_y + (q.y - min_y) * scale))
        .collect()
}

fn center_line(rng: &mut ChaCha8Rng) -> Vec<Point> {
    let lo = MARGIN;
    let hi = 1.0 - MARGIN;
    loop {
        let a = Point::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        let b = Point::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        let d = a.dist(b);
        if (0.05..=0.5).contains(&d) {
            return vec![a, b];
        }
    }
}

/// Predicted-like copy: every coordinate gets Gaussian-ish noise of the
/// given std, clamped to the image. Noise that would collapse two
/// consecutive points keeps the original point instead.
pub fn perturb_scene(scene: &Scene, jitter: f64, seed: u64) -> Scene {
    let instances = scene
        .instances
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = stream_rng(seed, scene.image_id as u32, i as u32);
            let mut pts: Vec<Point> = Vec::with_capacity(v.points.len());
            for (k, p) in v.points.iter().enumerate() {
                let q = Point::new(
                    (p.x + jitter * normal(&mut rng)).clamp(0.0, 1.0),
                    (p.y + jitter * normal(&mut rng)).clamp(0.0, 1.0),
                );
                let collides = k > 0 && q.dist(pts[k - 1]) <= DISTINCT_EPS;
                pts.push(if collides { *p } else { q });
            }
            VectorInstance { points: pts, ..v.clone() }
        })
        .collect();
    Scene {
        instances,
        ..scene.clone()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_instance, Config};

    fn params(seed: u64) -> GenParams {
        GenParams {
            seed,
            n_scenes: 1,
            instances_min: 10,
            instances_max: 10,
            ..GenParams::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_scenes(&params(7)).unwrap();
        let b = generate_scenes(&params(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].instances.len(), 10);
    }

    #[test]
    fn seeds_differ() {
        let a = generate_scenes(&params(7)).unwrap();
        let b = generate_scenes(&params(8)).unwrap();
        let pa: Vec<Point> = a[0].instances.iter().flat_map(|v| v.points.clone()).collect();
        let pb: Vec<Point> = b[0].instances.iter().flat_map(|v| v.points.clone()).collect();
        assert_ne!(pa, pb);
    }

    #[test]
    fn pure_building_mix() {
        let p = GenParams {
            class_mix: [1.0, 0.0, 0.0],
            n_scenes: 3,
            ..params(1)
        };
        for s in generate_scenes(&p).unwrap() {
            assert!(s.instances.iter().all(|v| v.kind == StructureKind::Polygon));
        }
    }

    #[test]
    fn every_instance_is_valid() {
        let p = GenParams {
            n_scenes: 50,
            instances_min: 5,
            instances_max: 30,
            ..params(3)
        };
        let cfg = Config::default();
        for s in generate_scenes(&p).unwrap() {
            for v in &s.instances {
                let errs = validate_instance(v, &cfg);
                assert!(errs.is_empty(), "{:?}: {errs:?}", v);
                let n = v.points.len();
                match v.kind {
                    StructureKind::Polygon => assert!((4..=12).contains(&n)),
                    StructureKind::Polyline => assert!((3..=15).contains(&n)),
                    StructureKind::Segment => assert_eq!(n, 2),
                }
            }
        }
    }

    #[test]
    fn class_mix_frequencies() {
        let p = GenParams {
            n_scenes: 500,
            instances_min: 20,
            instances_max: 20,
            ..params(11)
        };
        let mut counts = [0usize; 3];
        let scenes = generate_scenes(&p).unwrap();
        for v in scenes.iter().flat_map(|s| &s.instances) {
            counts[v.class_id as usize] += 1;
        }
        let total: usize = counts.iter().sum();
        assert!(total >= 10_000);
        for (c, want) in counts.iter().zip(p.class_mix) {
            assert!((*c as f64 / total as f64 - want).abs() < 0.02);
        }
    }

    #[test]
    fn bad_mix_rejected() {
        let p = GenParams {
            class_mix: [0.5, 0.5, 0.5],
            ..params(0)
        };
        assert!(generate_scenes(&p).is_err());
    }

    #[test]
    fn perturbed_copy_stays_valid() {
        let cfg = Config::default();
        let s = &generate_scenes(&params(5)).unwrap()[0];
        let q = perturb_scene(s, 0.01, 9);
        assert_ne!(s, &q);
        for v in &q.instances {
            assert!(validate_instance(v, &cfg).is_empty());
        }
    }
}
