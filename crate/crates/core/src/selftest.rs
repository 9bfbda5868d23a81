//! Runtime invariant suite behind `vextract selftest`.
//!
//! Each check draws seeded random inputs, runs a module against an
//! independent reference computation and reports pass or fail with the
//! worst deviation seen.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assignment::min_cost;
use crate::decoder::decode;
use crate::dsc::{loss_vsl, loss_vsl_at, match_cost, point_match, LossWeights, MatchMode, MatchProblem};
use crate::encoder::encode;
use crate::features::build_pyramid;
use crate::metrics::{evaluate, EvalImage, EvalOptions};
use crate::model::{shoelace, Config, Point, Scene, StructureKind, VectorInstance};
use crate::nn::Trace;
use crate::params::Network;
use crate::sampling::{canonical_key_points, orientation_candidates, resample_uniform, top_left_start};
use crate::scene_io::{export, generate_scenes, import_geojson, rasterize, scenes_from_json, scenes_to_json, ExportFormat, GenParams};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(module: &'static str, name: &'static str, f: impl FnOnce() -> Result<String, String>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckResult {
        module,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every check with inputs derived from `seed`.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        timed("sampling", "uniform spacing and canonical start", || sampling_check(seed)),
        timed("assignment", "optimal assignment vs enumeration", || assignment_check(seed)),
        timed("dsc", "point matching vs enumeration", || matching_check(seed)),
        timed("dsc", "loss gradients vs finite differences", || gradient_check(seed)),
        timed("igdecoder", "softmax, references, fixed point, equivariance", || decoder_check(seed)),
        timed("metrics", "self-evaluation identities", || metrics_check(seed)),
        timed("scene-io", "JSON and GeoJSON round trips", || io_check(seed)),
    ]
}

fn random_polygon(rng: &mut ChaCha8Rng) -> VectorInstance {
    let n = rng.gen_range(3..9);
    let c = Point::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
    let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    if rng.gen_bool(0.5) {
        angles.reverse();
    }
    let points = angles
        .iter()
        .map(|a| {
            let r = rng.gen_range(0.05..0.25);
            Point::new(c.x + r * a.cos(), c.y + r * a.sin())
        })
        .collect();
    VectorInstance::new(1, 0, StructureKind::Polygon, points)
}

fn random_open(rng: &mut ChaCha8Rng) -> VectorInstance {
    let n = rng.gen_range(2..7);
    let points = (0..n).map(|_| Point::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect();
    let kind = if n == 2 { StructureKind::Segment } else { StructureKind::Polyline };
    VectorInstance::new(1, 1, kind, points)
}

/// Point at arc length `s` along the key points.
fn point_at(keys: &[Point], closed: bool, s: f64) -> Point {
    let n = if closed { keys.len() } else { keys.len() - 1 };
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (keys[i], keys[(i + 1) % keys.len()]);
        let len = a.dist(b);
        if s <= acc + len || i == n - 1 {
            return a.lerp(b, ((s - acc) / len).clamp(0.0, 1.0));
        }
        acc += len;
    }
    keys[0]
}

fn sampling_check(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let closed = rng.gen_bool(0.5);
        let v = if closed { random_polygon(&mut rng) } else { random_open(&mut rng) };
        let m = rng.gen_range(v.len().max(2)..=24);
        let s = resample_uniform(&v, m).map_err(|e| e.to_string())?;
        let keys = canonical_key_points(&v);
        if s.key_points() != keys {
            return Err("key points not preserved in order".into());
        }
        if closed {
            if shoelace(&keys) < 0.0 || top_left_start(&keys) != 0 {
                return Err("polygon not clockwise from top-left".into());
            }
        } else {
            let c = orientation_candidates(&v, m).map_err(|e| e.to_string())?;
            let mut back = c[1].points.clone();
            back.reverse();
            if back != c[0].points {
                return Err("reversed candidate is not the exact reversal".into());
            }
        }
        let total: f64 = crate::sampling::arc_length(&v);
        let step = total / if closed { m } else { m - 1 } as f64;
        for (k, (&p, &key)) in s.points.iter().zip(&s.key_flags).enumerate() {
            if !key {
                let want = point_at(&keys, closed, k as f64 * step);
                worst = worst.max(p.dist(want) / total);
            }
        }
    }
    if worst <= 1e-9 {
        Ok(format!("300 vectors, worst relative spacing error {worst:.1e}"))
    } else {
        Err(format!("relative spacing error {worst:.1e}"))
    }
}

fn permutations(n: usize, k: usize, prefix: &mut Vec<usize>, out: &mut dyn FnMut(&[usize])) {
    if prefix.len() == k {
        out(prefix);
        return;
    }
    for j in 0..n {
        if !prefix.contains(&j) {
            prefix.push(j);
            permutations(n, k, prefix, out);
            prefix.pop();
        }
    }
}

fn assignment_check(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5);
    for _ in 0..200 {
        let r = rng.gen_range(1..5);
        let c = rng.gen_range(r..6);
        let cost: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let mut best = f64::INFINITY;
        permutations(c, r, &mut Vec::new(), &mut |p| {
            best = best.min(p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum());
        });
        let got = min_cost(&cost);
        if (got - best).abs() > 1e-12 {
            return Err(format!("cost {got} vs enumerated {best}"));
        }
    }
    Ok("200 problems".into())
}

fn random_problem(rng: &mut ChaCha8Rng, m: usize, t: usize) -> MatchProblem {
    let kind = match rng.gen_range(0..3) {
        0 if t >= 3 => StructureKind::Polygon,
        2 if t == 2 => StructureKind::Segment,
        _ => StructureKind::Polyline,
    };
    let pts = (0..m).map(|_| Point::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect();
    let probs = (0..m).map(|_| rng.gen_range(0.01..0.99)).collect();
    let gt = (0..t).map(|_| Point::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect();
    MatchProblem::new(pts, probs, gt, kind).expect("valid random problem")
}

fn matching_check(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
    let w = LossWeights::default();
    for _ in 0..200 {
        let m = rng.gen_range(2..7);
        let t = rng.gen_range(2..=m.min(4));
        let prob = random_problem(&mut rng, m, t);
        for mode in [MatchMode::Monotone, MatchMode::Hungarian] {
            let got = point_match(&prob, &w, mode).map_err(|e| e.to_string())?;
            let mut orders = vec![prob.gt.clone()];
            if !prob.kind.is_closed() && mode == MatchMode::Monotone {
                orders.push(prob.gt.iter().rev().copied().collect());
            }
            let mut best = f64::INFINITY;
            for gt in &orders {
                permutations(m, t, &mut Vec::new(), &mut |b| {
                    if mode == MatchMode::Hungarian || b.windows(2).all(|w| w[0] < w[1]) {
                        best = best.min(match_cost(&prob.pred_points, &prob.pred_probs, gt, b, w.alpha_p, w.alpha_c));
                    }
                });
            }
            if (got.cost - best).abs() > 1e-12 {
                return Err(format!("{mode:?}: cost {} vs enumerated {best}", got.cost));
            }
        }
    }
    Ok("200 problems, both modes".into())
}

fn gradient_check(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let w = LossWeights::default();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..30 {
        let t = rng.gen_range(3..6);
        let prob = random_problem(&mut rng, 8, t);
        let out = loss_vsl(&prob, &w, MatchMode::Monotone).map_err(|e| e.to_string())?;
        let at = |p: &MatchProblem| loss_vsl_at(p, &w, &crate::dsc::point_match(p, &w, MatchMode::Monotone).unwrap()).unwrap();
        let eval = |p: &MatchProblem| {
            let o = at(p);
            (o.value.total, o.matching.beta)
        };
        let mut coords: Vec<(usize, usize, f64)> = Vec::new();
        for j in 0..8 {
            for c in 0..3 {
                let (mut plus, mut minus) = (prob.clone(), prob.clone());
                match c {
                    0 => {
                        plus.pred_points[j].x += h;
                        minus.pred_points[j].x -= h;
                    }
                    1 => {
                        plus.pred_points[j].y += h;
                        minus.pred_points[j].y -= h;
                    }
                    _ => {
                        plus.pred_probs[j] += h;
                        minus.pred_probs[j] -= h;
                    }
                }
                let (fp, bp) = eval(&plus);
                let (fm, bm) = eval(&minus);
                if bp != out.matching.beta || bm != out.matching.beta {
                    continue;
                }
                coords.push((j, c, (fp - fm) / (2.0 * h)));
            }
        }
        for (j, c, numeric) in coords {
            let analytic = match c {
                0 => out.grad_points[j].x,
                1 => out.grad_points[j].y,
                _ => out.grad_probs[j],
            };
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0));
            checked += 1;
        }
    }
    if worst < 1e-4 {
        Ok(format!("{checked} coordinates, worst relative error {worst:.1e}"))
    } else {
        Err(format!("relative gradient error {worst:.1e}"))
    }
}

fn decoder_check(seed: u64) -> Result<String, String> {
    let cfg = Config {
        n_instances: 6,
        m_points: 8,
        channels: 16,
        e_samples: 8,
        layers: 3,
        k_coarse: 20,
        scales: vec![8, 16],
        heads: 4,
        ..Config::default()
    };
    let scene = generate_scenes(&GenParams {
        seed,
        raster_size: 64,
        ..GenParams::default()
    })
    .map_err(|e| e.to_string())?
    .remove(0);
    let f = build_pyramid(&rasterize(&scene, 1), &cfg, seed);
    let net = Network::seeded(&cfg, seed).map_err(|e| e.to_string())?;
    let mut trace = Trace::new();
    let state = encode(&f, &net, &cfg, &mut trace).map_err(|e| e.to_string())?;
    let preds = decode(&state, &f, &net, &cfg, &mut trace);
    if trace.max_row_error > 1e-6 {
        return Err(format!("softmax row error {:.1e}", trace.max_row_error));
    }
    if !(trace.ref_min > 0.0 && trace.ref_max < 1.0) {
        return Err(format!("references left (0,1): [{}, {}]", trace.ref_min, trace.ref_max));
    }
    let zero = Network::zeros(&cfg).map_err(|e| e.to_string())?;
    let r_ins = state.reference_points();
    for p in decode(&state, &f, &zero, &cfg, &mut Trace::new()) {
        for (row, r) in p.points.iter().zip(&r_ins) {
            if row.iter().any(|q| q != r) {
                return Err("zero network moved a point away from its instance reference".into());
            }
        }
    }
    let perm: Vec<usize> = (0..state.len()).rev().collect();
    let permuted = decode(&state.permuted(&perm), &f, &net, &cfg, &mut Trace::new());
    for (a, b) in preds.iter().zip(&permuted) {
        for (new, &old) in perm.iter().enumerate() {
            if a.points[old] != b.points[new] || a.class_logits[old] != b.class_logits[new] {
                return Err("decoder is not permutation equivariant".into());
            }
        }
    }
    Ok(format!("{} softmax rows", trace.softmax_rows))
}

fn metrics_check(seed: u64) -> Result<String, String> {
    let scenes = generate_scenes(&GenParams {
        seed,
        n_scenes: 3,
        ..GenParams::default()
    })
    .map_err(|e| e.to_string())?;
    let images: Vec<EvalImage> = scenes.iter().map(EvalImage::identity).collect();
    let r = evaluate(&images, &Config::default(), &EvalOptions::default());
    let a = &r.aggregate;
    let one = |v: Option<f64>| v.is_none_or(|x| (x - 1.0).abs() <= 1e-9);
    if one(a.map) && one(a.iou) && one(a.ciou) && one(a.f1) && one(a.apls) && one(a.sap10) && a.polis.is_none_or(|p| p.abs() <= 1e-9) {
        Ok("3 scenes".into())
    } else {
        Err(format!("{a:?}"))
    }
}

fn io_check(seed: u64) -> Result<String, String> {
    let scenes = generate_scenes(&GenParams {
        seed,
        n_scenes: 3,
        ..GenParams::default()
    })
    .map_err(|e| e.to_string())?;
    let text = scenes_to_json(&scenes).map_err(|e| e.to_string())?;
    let back = scenes_from_json(&text).map_err(|e| e.to_string())?;
    if back != scenes {
        return Err("scene JSON round trip changed the scenes".into());
    }
    let dir = std::env::temp_dir().join(format!("vextract-selftest-{}-{seed}", std::process::id()));
    let result = geojson_round_trip(&scenes, &dir);
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn geojson_round_trip(scenes: &[Scene], dir: &std::path::Path) -> Result<String, String> {
    let paths = export(scenes, ExportFormat::GeoJson, dir).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (s, p) in scenes.iter().zip(&paths) {
        let back = import_geojson(p).map_err(|e| e.to_string())?;
        if back.instances.len() != s.instances.len() {
            return Err("GeoJSON round trip lost instances".into());
        }
        for (a, b) in s.instances.iter().zip(&back.instances) {
            if a.points.len() != b.points.len() {
                return Err("GeoJSON round trip changed a point count".into());
            }
            for (p, q) in a.points.iter().zip(&b.points) {
                worst = worst.max((p.x - q.x).abs().max((p.y - q.y).abs()));
            }
        }
    }
    if worst <= 1e-12 {
        Ok(format!("worst GeoJSON deviation {worst:.1e}"))
    } else {
        Err(format!("GeoJSON deviation {worst:.1e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in run_all(11) {
            assert!(r.passed, "{} / {}: {}", r.module, r.name, r.detail);
        }
    }
}
