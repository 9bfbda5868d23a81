//! Instance-geometry interactive decoding.
//!
//! References are carried as logits so that a zero offset leaves them
//! bit-identical from layer to layer.

use crate::deformable::{DeformableSampler, QueryPlan};
use crate::encoder::InstanceState;
use crate::features::FeaturePyramid;
use crate::model::{BBox, Config, Point, VectorInstance, DISTINCT_EPS};
use crate::nn::{inverse_sigmoid, sigmoid, softmax_in_place, Mat, Mlp, Reduction, Trace, LOGIT_LIMIT};
use crate::params::{DecoderLayer, Network, PredictionHeads};
use crate::scene_io::PredictedInstance;

pub type Logit2 = [f64; 2];

/// Instance and point references of one layer, in logit space.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceState {
    pub layer: usize,
    /// `N`.
    pub ins_logits: Vec<Logit2>,
    /// `N × M`.
    pub geo_logits: Vec<Vec<Logit2>>,
}

impl ReferenceState {
    pub fn r_ins(&self) -> Vec<Point> {
        self.ins_logits.iter().map(|l| to_point(*l)).collect()
    }

    pub fn r_geo(&self) -> Vec<Vec<Point>> {
        self.geo_logits
            .iter()
            .map(|row| row.iter().map(|l| to_point(*l)).collect())
            .collect()
    }
}

/// Sampling geometry of every query: row `i` holds the instance query
/// followed by its `M` point queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub queries: Vec<Vec<QueryPlan>>,
}

/// Head outputs of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub layer: usize,
    /// `N × (classes + 1)`, background last.
    pub class_logits: Vec<Vec<f64>>,
    /// Box logits `(cx, cy, w, h)` before the sigmoid.
    pub box_logits: Vec<[f64; 4]>,
    pub bbox: Vec<BBox>,
    pub points: Vec<Vec<Point>>,
    pub point_logits: Vec<Vec<Logit2>>,
    pub keypoint_prob: Vec<Vec<f64>>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.class_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_logits.is_empty()
    }

    /// Softmax class probabilities, background last.
    pub fn class_probs(&self, i: usize) -> Vec<f64> {
        let mut p = self.class_logits[i].clone();
        softmax_in_place(&mut p, Reduction::Sequential);
        p
    }
}

fn to_point(l: Logit2) -> Point {
    Point::new(sigmoid(l[0]), sigmoid(l[1]))
}

fn clamp_logit(v: f64) -> f64 {
    v.clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
}

/// Logits of points, with the inverse sigmoid's input clamp.
pub fn logits_of(points: &[Point]) -> Vec<Logit2> {
    points
        .iter()
        .map(|p| [inverse_sigmoid(p.x), inverse_sigmoid(p.y)])
        .collect()
}

/// Repeats each instance reference for all `m` points.
pub fn broadcast(ins_logits: &[Logit2], m: usize) -> Vec<Vec<Logit2>> {
    ins_logits.iter().map(|l| vec![*l; m]).collect()
}

/// `σ⁻¹(R) + MLP(Q_geo)` for every point, where `base` holds `σ⁻¹(R)`:
/// the broadcast instance reference on the first layer, the previous
/// layer's point reference afterwards.
pub fn update_geo_refs(base: &[Vec<Logit2>], q_geo: &[Mat], mlp: &Mlp) -> Vec<Vec<Logit2>> {
    base.iter()
        .zip(q_geo)
        .map(|(row, g)| {
            row.iter()
                .enumerate()
                .map(|(j, l)| {
                    let d = mlp.forward_row(g.row(j));
                    [clamp_logit(l[0] + d[0]), clamp_logit(l[1] + d[1])]
                })
                .collect()
        })
        .collect()
}

/// Deformable read for every instance query (at `R_ins`) and point query (at
/// `R_geo`), updated in place with a residual connection.
pub fn structured_deform_attn(
    q_ins: &mut Mat,
    q_geo: &mut [Mat],
    refs: &ReferenceState,
    f: &FeaturePyramid,
    sampler: &DeformableSampler,
    trace: &mut Trace,
) -> SamplingPlan {
    let r_ins = refs.r_ins();
    let r_geo = refs.r_geo();
    let mut queries = Vec::with_capacity(q_ins.rows);
    for i in 0..q_ins.rows {
        let mut row = Vec::with_capacity(q_geo[i].rows + 1);
        let (y, plan) = sampler.update(q_ins.row(i), r_ins[i], f, trace);
        q_ins.row_mut(i).copy_from_slice(&y);
        row.push(plan);
        for j in 0..q_geo[i].rows {
            let (y, plan) = sampler.update(q_geo[i].row(j), r_geo[i][j], f, trace);
            q_geo[i].row_mut(j).copy_from_slice(&y);
            row.push(plan);
        }
        queries.push(row);
    }
    SamplingPlan { queries }
}

/// Self-attention across instances and, separately per instance, across
/// its point queries; each followed by a feed-forward block.
pub fn intra_level_interaction(q_ins: &Mat, q_geo: &[Mat], layer: &DecoderLayer, trace: &mut Trace) -> (Mat, Vec<Mat>) {
    let ins = layer
        .instance_ffn
        .forward(&layer.instance_attn.forward(q_ins, Reduction::OrderFree, trace));
    let geo = q_geo
        .iter()
        .map(|g| layer.point_ffn.forward(&layer.point_attn.forward(g, Reduction::Sequential, trace)))
        .collect();
    (ins, geo)
}

/// Per instance: the instance query attends to its points and the points
/// attend to the instance query. Both directions read the inputs.
pub fn cross_level_interaction(q_ins: &Mat, q_geo: &[Mat], layer: &DecoderLayer, trace: &mut Trace) -> (Mat, Vec<Mat>) {
    let mut ins = Mat::zeros(q_ins.rows, q_ins.cols);
    let mut geo = Vec::with_capacity(q_geo.len());
    for (i, g) in q_geo.iter().enumerate() {
        let qi = Mat::from_vec(1, q_ins.cols, q_ins.row(i).to_vec());
        let upd = layer
            .instance_cross_ffn
            .forward(&layer.instance_cross.forward(&qi, g, Reduction::Sequential, trace));
        ins.row_mut(i).copy_from_slice(upd.row(0));
        geo.push(
            layer
                .point_cross_ffn
                .forward(&layer.point_cross.forward(g, &qi, Reduction::Sequential, trace)),
        );
    }
    (ins, geo)
}

pub fn predict_heads(
    q_ins: &Mat,
    q_geo: &[Mat],
    box_logits: &[[f64; 4]],
    refs: &ReferenceState,
    heads: &PredictionHeads,
) -> Prediction {
    let n = q_ins.rows;
    let mut class_logits = Vec::with_capacity(n);
    let mut new_boxes = Vec::with_capacity(n);
    let mut bbox = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    let mut point_logits = Vec::with_capacity(n);
    let mut keypoint_prob = Vec::with_capacity(n);
    for i in 0..n {
        let q = q_ins.row(i);
        class_logits.push(heads.class.forward_row(q));
        let d = heads.bbox.forward_row(q);
        let mut b = [0.0; 4];
        for k in 0..4 {
            b[k] = clamp_logit(box_logits[i][k] + d[k]);
        }
        let (cx, cy, w, h) = (sigmoid(b[0]), sigmoid(b[1]), sigmoid(b[2]), sigmoid(b[3]));
        bbox.push(BBox {
            x_min: (cx - 0.5 * w).max(0.0),
            y_min: (cy - 0.5 * h).max(0.0),
            x_max: (cx + 0.5 * w).min(1.0),
            y_max: (cy + 0.5 * h).min(1.0),
        });
        new_boxes.push(b);
        let g = &q_geo[i];
        let mut logits = Vec::with_capacity(g.rows);
        let mut probs = Vec::with_capacity(g.rows);
        for j in 0..g.rows {
            let d = heads.point.forward_row(g.row(j));
            let base = refs.geo_logits[i][j];
            logits.push([clamp_logit(base[0] + d[0]), clamp_logit(base[1] + d[1])]);
            probs.push(sigmoid(heads.keypoint.forward_row(g.row(j))[0]));
        }
        points.push(logits.iter().map(|l| to_point(*l)).collect());
        point_logits.push(logits);
        keypoint_prob.push(probs);
    }
    Prediction {
        layer: refs.layer,
        class_logits,
        box_logits: new_boxes,
        bbox,
        points,
        point_logits,
        keypoint_prob,
    }
}

/// Carried between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub q_ins: Mat,
    pub q_geo: Vec<Mat>,
    pub box_logits: Vec<[f64; 4]>,
    /// `None` before the first layer.
    pub geo_logits: Option<Vec<Vec<Logit2>>>,
}

impl DecoderState {
    pub fn from_instances(state: &InstanceState) -> Self {
        DecoderState {
            q_ins: state.instance_matrix(),
            q_geo: state.queries.iter().map(|q| q.geometric.clone()).collect(),
            box_logits: state.box_logits.clone(),
            geo_logits: None,
        }
    }
}

/// One decoder layer; returns the layer's prediction and advances `s`.
pub fn decode_layer(
    s: &mut DecoderState,
    l: usize,
    layer: &DecoderLayer,
    f: &FeaturePyramid,
    m: usize,
    trace: &mut Trace,
) -> Prediction {
    let ins_logits: Vec<Logit2> = s.box_logits.iter().map(|b| [b[0], b[1]]).collect();
    let base = s.geo_logits.take().unwrap_or_else(|| broadcast(&ins_logits, m));
    let refs = ReferenceState {
        layer: l,
        geo_logits: update_geo_refs(&base, &s.q_geo, &layer.geo_ref),
        ins_logits,
    };
    for l in refs.ins_logits.iter().chain(refs.geo_logits.iter().flatten()) {
        trace.record_ref(sigmoid(l[0]));
        trace.record_ref(sigmoid(l[1]));
    }
    structured_deform_attn(&mut s.q_ins, &mut s.q_geo, &refs, f, &layer.sampler, trace);
    let (ins, geo) = intra_level_interaction(&s.q_ins, &s.q_geo, layer, trace);
    let (ins, geo) = cross_level_interaction(&ins, &geo, layer, trace);
    let pred = predict_heads(&ins, &geo, &s.box_logits, &refs, &layer.heads);
    s.q_ins = ins;
    s.q_geo = geo;
    s.box_logits = pred.box_logits.clone();
    s.geo_logits = Some(pred.point_logits.clone());
    pred
}

/// Runs all decoder layers; the last prediction is the final one.
pub fn decode(state: &InstanceState, f: &FeaturePyramid, net: &Network, cfg: &Config, trace: &mut Trace) -> Vec<Prediction> {
    let mut s = DecoderState::from_instances(state);
    net.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| decode_layer(&mut s, l, layer, f, cfg.m_points, trace))
        .collect()
}

fn select_points(probs: &[f64], tau: f64, min: usize, max: Option<usize>) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..probs.len()).filter(|&j| probs[j] >= tau).collect();
    let want = if keep.len() < min {
        Some(min)
    } else {
        max.filter(|&mx| keep.len() > mx)
    };
    if let Some(count) = want {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        keep = order.into_iter().take(count).collect();
        keep.sort_unstable();
    }
    keep
}

/// Turns one layer's prediction into vector instances.
///
/// An instance is kept when its most likely class is not background and
/// that class's probability reaches `score_threshold`. Points with
/// probability at least `keypoint_threshold` are kept in sequence order;
/// when fewer than the kind's minimum survive, the most probable ones are
/// used instead. Points that coincide with the previously kept point are
/// dropped, and an instance left below its minimum is discarded.
pub fn extract_vectors(pred: &Prediction, cfg: &Config) -> Vec<PredictedInstance> {
    let classes = cfg.num_classes();
    let mut out = Vec::new();
    for i in 0..pred.len() {
        let probs = pred.class_probs(i);
        let mut best = 0;
        for c in 1..probs.len() {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        if best >= classes || probs[best] < cfg.score_threshold {
            continue;
        }
        let Some(kind) = cfg.class_table.kind(best as u32) else {
            continue;
        };
        let kp = &pred.keypoint_prob[i];
        let idx = select_points(kp, cfg.keypoint_threshold, kind.min_points(), kind.max_points());
        let mut points: Vec<Point> = Vec::with_capacity(idx.len());
        let mut kept_probs = Vec::with_capacity(idx.len());
        for &j in &idx {
            let p = pred.points[i][j];
            if points.last().is_some_and(|q: &Point| q.dist(p) <= DISTINCT_EPS) {
                continue;
            }
            points.push(p);
            kept_probs.push(kp[j]);
        }
        if kind.is_closed() && points.len() > 1 && points[0].dist(*points.last().unwrap()) <= DISTINCT_EPS {
            points.pop();
            kept_probs.pop();
        }
        if points.len() < kind.min_points() {
            continue;
        }
        out.push(PredictedInstance {
            instance: VectorInstance::new(i as u64 + 1, best as u32, kind, points),
            score: probs[best],
            keypoint_prob: kept_probs,
            layer: pred.layer,
            sequence: Some(pred.points[i].clone()),
            sequence_keypoint_prob: Some(kp.clone()),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode;
    use crate::features::build_pyramid;
    use crate::model::StructureKind;
    use crate::nn::Linear;
    use crate::params::ParameterSet;
    use crate::scene_io::{generate_scenes, rasterize, GenParams};

    fn small() -> Config {
        Config {
            n_instances: 5,
            m_points: 4,
            channels: 8,
            e_samples: 4,
            layers: 2,
            k_coarse: 10,
            scales: vec![8, 16],
            heads: 2,
            ..Config::default()
        }
    }

    fn pyramid(cfg: &Config, seed: u64) -> FeaturePyramid {
        let scene = generate_scenes(&GenParams {
            seed,
            raster_size: 32,
            ..GenParams::default()
        })
        .unwrap()
        .remove(0);
        build_pyramid(&rasterize(&scene, 1), cfg, 0)
    }

    fn zero_mlp(out: usize) -> Mlp {
        Mlp {
            fc1: Linear {
                weight: Mat::zeros(3, 2),
                bias: vec![0.0; 3],
            },
            fc2: Linear {
                weight: Mat::zeros(out, 3),
                bias: vec![0.0; out],
            },
        }
    }

    #[test]
    fn geo_refs_zero_offset_and_clamp() {
        let base = broadcast(&logits_of(&[Point::new(0.5, 0.5), Point::new(1.0, 0.3)]), 3);
        let q = vec![Mat::from_rows(&vec![vec![1.0, -2.0]; 3]); 2];
        let out = update_geo_refs(&base, &q, &zero_mlp(2));
        for l in &out[0] {
            assert_eq!(to_point(*l), Point::new(0.5, 0.5));
        }
        let p = to_point(out[1][2]);
        assert!((p.x - (1.0 - 1e-6)).abs() < 1e-12);
        assert!((p.y - 0.3).abs() < 1e-9);
        assert!((sigmoid(inverse_sigmoid(0.3)) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_points(&[0.9, 0.1, 0.9, 0.2], 0.5, 2, None), vec![0, 2]);
        assert_eq!(select_points(&[0.9, 0.1, 0.8, 0.2, 0.3], 0.5, 3, None), vec![0, 2, 4]);
        assert_eq!(select_points(&[0.9, 0.7, 0.8], 0.5, 2, Some(2)), vec![0, 2]);
    }

    fn pred_with(class_logits: Vec<Vec<f64>>, pts: Vec<Vec<Point>>, kp: Vec<Vec<f64>>) -> Prediction {
        let n = class_logits.len();
        Prediction {
            layer: 0,
            class_logits,
            box_logits: vec![[0.0; 4]; n],
            bbox: vec![
                BBox {
                    x_min: 0.0,
                    y_min: 0.0,
                    x_max: 1.0,
                    y_max: 1.0
                };
                n
            ],
            point_logits: pts.iter().map(|r| logits_of(r)).collect(),
            points: pts,
            keypoint_prob: kp,
        }
    }

    #[test]
    fn extraction_cases() {
        let cfg = Config::default();
        let pts: Vec<Point> = (0..5).map(|j| Point::new(0.1 + 0.15 * j as f64, 0.2 + 0.1 * (j % 2) as f64)).collect();
        let road = pred_with(vec![vec![0.0, 5.0, 0.0, 0.0]], vec![pts.clone()], vec![vec![0.9, 0.1, 0.9, 0.1, 0.9]]);
        let out = extract_vectors(&road, &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].instance.kind, StructureKind::Polyline);
        assert_eq!(out[0].instance.points, vec![pts[0], pts[2], pts[4]]);

        let building = pred_with(vec![vec![5.0, 0.0, 0.0, 0.0]], vec![pts.clone()], vec![vec![0.9, 0.1, 0.2, 0.3, 0.9]]);
        let out = extract_vectors(&building, &cfg);
        assert_eq!(out[0].instance.points, vec![pts[0], pts[3], pts[4]]);

        let bg = pred_with(vec![vec![0.0, 0.0, 0.0, 9.0]; 2], vec![pts.clone(); 2], vec![vec![0.9; 5]; 2]);
        assert!(extract_vectors(&bg, &cfg).is_empty());
    }

    #[test]
    fn zero_network_is_fixed_point_for_any_depth() {
        for layers in [1, 2, 4] {
            let cfg = Config { layers, ..small() };
            let f = pyramid(&cfg, 3);
            let enc = Network::seeded(&cfg, 1).unwrap();
            let state = encode(&f, &enc, &cfg, &mut Trace::new()).unwrap();
            let zero = Network::zeros(&cfg).unwrap();
            let mut trace = Trace::new();
            let preds = decode(&state, &f, &zero, &cfg, &mut trace);
            assert_eq!(preds.len(), layers);
            let r_ins = state.reference_points();
            for p in &preds {
                for (row, r) in p.points.iter().zip(&r_ins) {
                    assert!(row.iter().all(|q| q == r));
                }
                assert!(p.keypoint_prob.iter().flatten().all(|&c| c == 0.5));
            }
            assert!(trace.max_row_error < 1e-6);
        }
    }

    #[test]
    fn single_layer_is_manual_composition() {
        let cfg = Config { layers: 1, ..small() };
        let f = pyramid(&cfg, 4);
        let net = Network::seeded(&cfg, 2).unwrap();
        let state = encode(&f, &net, &cfg, &mut Trace::new()).unwrap();
        let got = decode(&state, &f, &net, &cfg, &mut Trace::new());
        let layer = &net.layers[0];
        let mut t = Trace::new();
        let mut q_ins = state.instance_matrix();
        let mut q_geo: Vec<Mat> = state.queries.iter().map(|q| q.geometric.clone()).collect();
        let ins_logits: Vec<Logit2> = state.box_logits.iter().map(|b| [b[0], b[1]]).collect();
        let refs = ReferenceState {
            layer: 0,
            geo_logits: update_geo_refs(&broadcast(&ins_logits, cfg.m_points), &q_geo, &layer.geo_ref),
            ins_logits,
        };
        structured_deform_attn(&mut q_ins, &mut q_geo, &refs, &f, &layer.sampler, &mut t);
        let (a, b) = intra_level_interaction(&q_ins, &q_geo, layer, &mut t);
        let (a, b) = cross_level_interaction(&a, &b, layer, &mut t);
        let want = predict_heads(&a, &b, &state.box_logits, &refs, &layer.heads);
        assert_eq!(got, vec![want]);
    }

    #[test]
    fn references_stay_inside_unit_square() {
        let cfg = Config { layers: 3, ..small() };
        let f = pyramid(&cfg, 5);
        let set = ParameterSet::init(&cfg, 6).unwrap();
        let net = Network::from_params(&cfg, &set).unwrap();
        let state = encode(&f, &net, &cfg, &mut Trace::new()).unwrap();
        let mut trace = Trace::new();
        let preds = decode(&state, &f, &net, &cfg, &mut trace);
        assert!(trace.ref_min > 0.0 && trace.ref_max < 1.0);
        assert!(trace.max_row_error < 1e-6);
        for p in &preds {
            assert!(p.points.iter().flatten().all(|q| q.x > 0.0 && q.x < 1.0 && q.y > 0.0 && q.y < 1.0));
            assert!(p.keypoint_prob.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn decode_is_instance_permutation_equivariant() {
        let cfg = small();
        let f = pyramid(&cfg, 7);
        let net = Network::seeded(&cfg, 8).unwrap();
        let state = encode(&f, &net, &cfg, &mut Trace::new()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let a = decode(&state, &f, &net, &cfg, &mut Trace::new());
        let b = decode(&state.permuted(&perm), &f, &net, &cfg, &mut Trace::new());
        for (pa, pb) in a.iter().zip(&b) {
            for (new, &old) in perm.iter().enumerate() {
                assert_eq!(pb.points[new], pa.points[old]);
                assert_eq!(pb.class_logits[new], pa.class_logits[old]);
                assert_eq!(pb.keypoint_prob[new], pa.keypoint_prob[old]);
            }
        }
    }

    #[test]
    fn point_paths_are_isolated_per_instance() {
        let cfg = small();
        let net = Network::seeded(&cfg, 9).unwrap();
        let layer = &net.layers[0];
        let q_ins = Mat::from_rows(&(0..3).map(|i| (0..8).map(|c| ((i * 8 + c) as f64 * 0.3).sin()).collect()).collect::<Vec<_>>());
        let geo: Vec<Mat> = (0..3)
            .map(|i| Mat::from_rows(&(0..4).map(|j| (0..8).map(|c| ((i * 32 + j * 8 + c) as f64 * 0.7).cos()).collect()).collect::<Vec<_>>()))
            .collect();
        let mut changed = geo.clone();
        changed[1] = Mat::zeros(4, 8);
        let (_, a) = intra_level_interaction(&q_ins, &geo, layer, &mut Trace::new());
        let (_, b) = intra_level_interaction(&q_ins, &changed, layer, &mut Trace::new());
        assert_eq!(a[0], b[0]);
        assert_eq!(a[2], b[2]);
        let (_, a) = cross_level_interaction(&q_ins, &geo, layer, &mut Trace::new());
        let (_, b) = cross_level_interaction(&q_ins, &changed, layer, &mut Trace::new());
        assert_eq!(a[0], b[0]);
        assert_eq!(a[2], b[2]);
    }
}
