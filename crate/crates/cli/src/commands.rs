use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use vextract_core::decoder::{decode, extract_vectors};
use vextract_core::dsc::{
    descent_fit, instance_match, loss_vsl_at, point_match, FitOptions, InstanceCandidate, InstanceWeights, LossBreakdown, LossWeights,
    MatchMode, MatchProblem,
};
use vextract_core::encoder::encode;
use vextract_core::features::build_pyramid;
use vextract_core::metrics::{describe, evaluate, polis, to_csv, EvalImage, EvalOptions};
use vextract_core::model::CLASS_BUILDING;
use vextract_core::nn::Trace;
use vextract_core::params::{Network, ParameterSet};
use vextract_core::sampling::{canonical_key_points, resample_uniform};
use vextract_core::scene_io::{
    export, generate_scenes, load_predictions, load_scenes_with, perturb_scene, rasterize, save_predictions, save_scenes, write_atomic,
    ExportFormat, GenParams, LoadOptions, PredictionSet,
};
use vextract_core::selftest::run_all;
use vextract_core::{Config, Error, Point, Result, Scene, StructureKind, VectorInstance};

use crate::args::{Cli, Command, EvalArgs, ExportArgs, FitArgs, GenArgs, InferArgs, MatchArgs, RasterizeArgs, SelftestArgs};

/// One JSON object per line on stderr.
pub fn log(level: &str, message: &str) {
    eprintln!("{}", json!({ "level": level, "message": message }));
}

fn log_run_config(cli: &Cli, resolved: Value) {
    let record = json!({
        "level": "info",
        "run_config": {
            "jobs": cli.jobs,
            "command": &cli.command,
            "resolved": resolved,
        }
    });
    eprintln!("{record}");
}

fn emit(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_opts(pixel_coords: bool) -> LoadOptions {
    LoadOptions { pixel_coords }
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<u8> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Gen(a) => gen(&cli, a),
        Command::Rasterize(a) => rasterize_cmd(&cli, a),
        Command::Infer(a) => infer(&cli, a),
        Command::Match(a) => match_cmd(&cli, a, false),
        Command::Loss(a) => match_cmd(&cli, a, true),
        Command::Fit(a) => fit(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Export(a) => export_cmd(&cli, a),
        Command::Selftest(a) => selftest(&cli, a),
    }
}

fn gen(cli: &Cli, a: &GenArgs) -> Result<u8> {
    let [b, r, c] = a.class_mix[..] else {
        return Err(Error::Config(format!("--class-mix needs three values, got {}", a.class_mix.len())));
    };
    let params = GenParams {
        seed: a.seed,
        n_scenes: a.count,
        instances_min: a.instances_min,
        instances_max: a.instances_max,
        class_mix: [b, r, c],
        raster_size: a.raster_size,
        ..GenParams::default()
    };
    log_run_config(cli, json!({ "gen": &params }));
    params.validate()?;
    let scenes = generate_scenes(&params)?;
    save_scenes(&scenes, &a.out)?;
    emit(None, &json!({ "scenes": scenes.len(), "out": a.out }))?;
    Ok(0)
}

fn rasterize_cmd(cli: &Cli, a: &RasterizeArgs) -> Result<u8> {
    log_run_config(cli, Value::Null);
    if a.stroke == 0 {
        return Err(Error::Config("--stroke must be at least 1".into()));
    }
    let scenes = load_scenes_with(&a.scenes, load_opts(a.pixel_coords))?;
    fs::create_dir_all(&a.out_dir)?;
    let paths = scenes
        .par_iter()
        .map(|s| {
            let path = a.out_dir.join(format!("scene_{}.pgm", s.image_id));
            rasterize(s, a.stroke).write_pgm(&path)?;
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    emit(None, &json!({ "rasters": paths }))?;
    Ok(0)
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<u8> {
    let cfg = a.model.config();
    log_run_config(cli, json!({ "config": &cfg }));
    cfg.validate()?;
    let net = match &a.params {
        Some(p) => Network::from_params(&cfg, &ParameterSet::load(p)?)?,
        None => Network::seeded(&cfg, a.seed)?,
    };
    let scenes = load_scenes_with(&a.scenes, load_opts(a.pixel_coords))?;
    let sets = scenes
        .par_iter()
        .map(|s| infer_scene(s, &cfg, &net, a))
        .collect::<Result<Vec<_>>>()?;
    save_predictions(&sets, &a.out)?;
    let total: usize = sets.iter().map(|s| s.instances.len()).sum();
    emit(None, &json!({ "images": sets.len(), "instances": total, "out": a.out }))?;
    Ok(0)
}

fn infer_scene(s: &Scene, cfg: &Config, net: &Network, a: &InferArgs) -> Result<PredictionSet> {
    let img = rasterize(s, a.stroke);
    let f = build_pyramid(&img, cfg, a.feature_seed);
    let tokens = f.token_count();
    let mut cfg = cfg.clone();
    if cfg.k_coarse > tokens {
        log(
            "warn",
            &format!("image {}: K = {} exceeds {tokens} feature tokens; using {tokens}", s.image_id, cfg.k_coarse),
        );
        cfg.k_coarse = tokens;
        if cfg.n_instances > tokens {
            log("warn", &format!("image {}: N reduced to {tokens}", s.image_id));
            cfg.n_instances = tokens;
        }
    }
    let mut trace = Trace::new();
    let state = encode(&f, net, &cfg, &mut trace)?;
    let preds = decode(&state, &f, net, &cfg, &mut trace);
    let last = preds.last().expect("at least one decoder layer");
    Ok(PredictionSet {
        image_id: s.image_id,
        raster_size: s.raster_size,
        instances: extract_vectors(last, &cfg),
    })
}

fn load_pair(pred: &Path, gt: &Path, pixel_coords: bool) -> Result<(Vec<PredictionSet>, Vec<Scene>)> {
    let preds = load_predictions(pred, load_opts(pixel_coords))?;
    let gts = load_scenes_with(gt, load_opts(pixel_coords))?;
    Ok((preds, gts))
}

fn by_image(preds: Vec<PredictionSet>) -> HashMap<u64, PredictionSet> {
    preds.into_iter().map(|p| (p.image_id, p)).collect()
}

#[derive(Serialize)]
struct PointRecord {
    gt: u64,
    pred: u64,
    cost: f64,
    orientation: vextract_core::sampling::Orientation,
    beta: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    losses: Option<LossBreakdown>,
}

#[derive(Serialize)]
struct SkipRecord {
    gt: u64,
    pred: u64,
    reason: String,
}

#[derive(Serialize)]
struct ImageMatch {
    image_id: u64,
    /// `(gt id, pred id)`.
    pairs: Vec<(u64, u64)>,
    points: Vec<PointRecord>,
    skipped: Vec<SkipRecord>,
}

fn mean_losses(all: &[LossBreakdown]) -> Option<LossBreakdown> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| all.iter().map(f).sum::<f64>() / n;
    Some(LossBreakdown {
        dir: sum(|l| l.dir),
        kp: sum(|l| l.kp),
        cls: sum(|l| l.cls),
        total: sum(|l| l.total),
    })
}

fn match_image(gt: &Scene, pred: Option<&PredictionSet>, w: &LossWeights, iw: &InstanceWeights, mode: MatchMode, losses: bool) -> Result<ImageMatch> {
    let n_classes = vextract_core::ClassTable::default().len();
    let preds = pred.map(|p| p.instances.as_slice()).unwrap_or_default();
    let cands: Vec<InstanceCandidate> = preds
        .iter()
        .map(|p| {
            let mut class_probs = vec![0.0; n_classes + 1];
            if let Some(c) = class_probs.get_mut(p.instance.class_id as usize) {
                *c = p.score;
            }
            class_probs[n_classes] = 1.0 - p.score;
            InstanceCandidate {
                class_probs,
                points: p.sequence.clone().unwrap_or_else(|| p.instance.points.clone()),
                keypoint_prob: p.sequence_keypoint_prob.clone().unwrap_or_else(|| p.keypoint_prob.clone()),
            }
        })
        .collect();
    let pairs = instance_match(&cands, &gt.instances, iw);
    let mut out = ImageMatch {
        image_id: gt.image_id,
        pairs: Vec::with_capacity(pairs.len()),
        points: Vec::new(),
        skipped: Vec::new(),
    };
    for (g, p) in pairs {
        let (gv, pv) = (&gt.instances[g], &preds[p]);
        out.pairs.push((gv.id, pv.instance.id));
        let problem = match MatchProblem::from_instance(cands[p].points.clone(), cands[p].keypoint_prob.clone(), gv) {
            Ok(prob) => prob,
            Err(e) => {
                log("warn", &format!("image {}: skipping gt {} / pred {}: {e}", gt.image_id, gv.id, pv.instance.id));
                out.skipped.push(SkipRecord {
                    gt: gv.id,
                    pred: pv.instance.id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let m = point_match(&problem, w, mode)?;
        let l = if losses { Some(loss_vsl_at(&problem, w, &m)?.value) } else { None };
        out.points.push(PointRecord {
            gt: gv.id,
            pred: pv.instance.id,
            cost: m.cost,
            orientation: m.orientation,
            beta: m.beta,
            losses: l,
        });
    }
    Ok(out)
}

fn match_cmd(cli: &Cli, a: &MatchArgs, losses: bool) -> Result<u8> {
    let w = a.loss.weights();
    let iw = InstanceWeights {
        lambda_cls: a.lambda_cls,
        lambda_pts: a.lambda_pts,
    };
    log_run_config(cli, json!({ "loss_weights": &w, "instance_weights": &iw, "mode": a.loss.mode }));
    w.validate()?;
    if !(iw.lambda_cls >= 0.0 && iw.lambda_pts >= 0.0) {
        return Err(Error::Config("instance pairing factors must be non-negative".into()));
    }
    let (preds, gts) = load_pair(&a.pred, &a.gt, a.pixel_coords)?;
    let preds = by_image(preds);
    let images = gts
        .par_iter()
        .map(|g| match_image(g, preds.get(&g.image_id), &w, &iw, a.loss.mode, losses))
        .collect::<Result<Vec<_>>>()?;
    let costs: Vec<f64> = images.iter().flat_map(|i| i.points.iter().map(|p| p.cost)).collect();
    let all: Vec<LossBreakdown> = images.iter().flat_map(|i| i.points.iter().filter_map(|p| p.losses)).collect();
    let cost = (!costs.is_empty()).then(|| costs.iter().sum::<f64>() / costs.len() as f64);
    let mut doc = json!({
        "mode": a.loss.mode,
        "images": images,
        "matched": costs.len(),
        "cost": cost,
    });
    if losses {
        doc["losses"] = json!(mean_losses(&all));
    }
    emit(a.out.as_deref(), &doc)?;
    Ok(0)
}

fn default_square() -> VectorInstance {
    let p = |x, y| Point::new(x, y);
    VectorInstance::new(1, CLASS_BUILDING, StructureKind::Polygon, vec![p(0.3, 0.3), p(0.7, 0.3), p(0.7, 0.7), p(0.3, 0.7)])
}

fn fit_target(a: &FitArgs) -> Result<VectorInstance> {
    let Some(path) = &a.gt else {
        return Ok(default_square());
    };
    let scenes = load_scenes_with(path, LoadOptions::default())?;
    let scene = match a.image_id {
        Some(id) => scenes.iter().find(|s| s.image_id == id),
        None => scenes.first(),
    }
    .ok_or_else(|| Error::Schema("no matching image in the target file".into()))?;
    match a.instance_id {
        Some(id) => scene.instances.iter().find(|v| v.id == id),
        None => scene.instances.first(),
    }
    .cloned()
    .ok_or_else(|| Error::Schema("no matching instance in the target image".into()))
}

/// Uniform resampling of the target with seeded noise on every point.
pub fn jittered_start(target: &VectorInstance, m: usize, jitter: f64, seed: u64) -> Result<Vec<Point>> {
    let samples = resample_uniform(target, m)?;
    let carrier = Scene {
        image_id: 0,
        raster_size: 1,
        instances: vec![VectorInstance::new(0, target.class_id, target.kind, samples.points)],
    };
    Ok(perturb_scene(&carrier, jitter, seed).instances.remove(0).points)
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<u8> {
    let w = a.loss.weights();
    let opts = FitOptions {
        steps: a.steps,
        lr: a.lr,
        schedule: a.schedule,
        mode: a.loss.mode,
    };
    log_run_config(cli, json!({ "loss_weights": &w, "fit": &opts }));
    if !(0.0..=1.0).contains(&a.init_prob) {
        return Err(Error::Config("--init-prob must lie in [0, 1]".into()));
    }
    if !(a.jitter >= 0.0) {
        return Err(Error::Config("--jitter must be non-negative".into()));
    }
    let target = fit_target(a)?;
    let start = jittered_start(&target, a.m_points, a.jitter, a.seed)?;
    let probs = vec![a.init_prob; start.len()];
    let gt = canonical_key_points(&target);
    let r = descent_fit(&start, &probs, &gt, target.kind, &w, &opts)?;
    let keypoint_polis = if target.kind.is_closed() {
        polis(&r.matching.matched, &r.matching.gt).ok()
    } else {
        None
    };
    let max_error = r.matching.matched.iter().zip(&r.matching.gt).map(|(p, q)| p.dist(*q)).fold(0.0, f64::max);
    emit(
        a.out.as_deref(),
        &json!({
            "target": { "id": target.id, "structure": target.kind, "points": gt },
            "start": start,
            "result": r,
            "initial_loss": r.losses.first(),
            "final_loss": r.losses.last(),
            "keypoint_polis": keypoint_polis,
            "max_keypoint_error": max_error,
        }),
    )?;
    Ok(0)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<u8> {
    if a.describe {
        log_run_config(cli, Value::Null);
        print!("{}", describe());
        return Ok(0);
    }
    let opts = EvalOptions {
        pixel_tolerance_px: a.pixel_tolerance,
        stroke_px: a.stroke,
        apls_snap_px: a.apls_snap,
        apls_pairs: a.apls_pairs,
        seed: a.seed,
        ..EvalOptions::default()
    };
    log_run_config(cli, json!({ "eval": &opts }));
    if !(opts.pixel_tolerance_px >= 0.0 && opts.apls_snap_px >= 0.0) || opts.stroke_px == 0 || opts.apls_pairs == 0 {
        return Err(Error::Config("tolerances must be non-negative and stroke and pair count positive".into()));
    }
    let (pred, gt) = (a.pred.as_ref().expect("required by clap"), a.gt.as_ref().expect("required by clap"));
    let (preds, gts) = load_pair(pred, gt, a.pixel_coords)?;
    let mut preds = by_image(preds);
    let images: Vec<EvalImage> = gts
        .into_iter()
        .map(|g| EvalImage {
            preds: preds.remove(&g.image_id).map(|p| p.instances).unwrap_or_default(),
            gt: g,
        })
        .collect();
    if !preds.is_empty() {
        log("warn", &format!("{} prediction images have no ground truth and are ignored", preds.len()));
    }
    let report = evaluate(&images, &Config::default(), &opts);
    if let Some(p) = &a.csv {
        write_atomic(p, to_csv(&report).as_bytes())?;
    }
    emit(a.out.as_deref(), &report)?;
    Ok(0)
}

fn export_cmd(cli: &Cli, a: &ExportArgs) -> Result<u8> {
    log_run_config(cli, Value::Null);
    let format = if a.format == "geojson" { ExportFormat::GeoJson } else { ExportFormat::Svg };
    let scenes: Vec<Scene> = load_predictions(&a.scenes, load_opts(a.pixel_coords))?
        .iter()
        .map(PredictionSet::to_scene)
        .collect();
    let paths = export(&scenes, format, &a.out_dir)?;
    emit(None, &json!({ "files": paths }))?;
    Ok(0)
}

fn selftest(cli: &Cli, a: &SelftestArgs) -> Result<u8> {
    log_run_config(cli, Value::Null);
    let results = run_all(a.seed);
    if a.json {
        emit(None, &results)?;
    } else {
        println!("{:<10} {:<48} {:<6} {:>8}  detail", "module", "check", "result", "seconds");
        for r in &results {
            println!(
                "{:<10} {:<48} {:<6} {:>8.3}  {}",
                r.module,
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.seconds,
                r.detail
            );
        }
    }
    Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
}
