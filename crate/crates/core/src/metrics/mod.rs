//! Evaluation metrics and the aggregate report.

mod ap;
mod apls;
mod geometry;
mod pixel;

pub use ap::{class_ap, coco_map, coco_thresholds, interpolated_ap, max_f_score, sap_sf, segment_distance, ScoredSegment, SegmentScore};
pub use apls::{apls, AplsOptions, RoadGraph};
pub use geometry::{ciou, intersection_area, is_self_intersecting, polis, polygon_iou};
pub use pixel::{pixel_counts, pixel_prf, PixelCounts, Prf};

use rayon::prelude::*;
use serde::Serialize;

use crate::assignment::min_cost_assignment;
use crate::model::{Config, Point, Scene, StructureKind};
use crate::scene_io::PredictedInstance;

/// Ground truth and predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub gt: Scene,
    pub preds: Vec<PredictedInstance>,
}

impl EvalImage {
    /// Ground truth evaluated against itself with score 1.
    pub fn identity(scene: &Scene) -> EvalImage {
        EvalImage {
            gt: scene.clone(),
            preds: scene
                .instances
                .iter()
                .map(|v| PredictedInstance {
                    instance: v.clone(),
                    score: 1.0,
                    keypoint_prob: vec![1.0; v.points.len()],
                    layer: 0,
                    sequence: None,
                    sequence_keypoint_prob: None,
                })
                .collect(),
        }
    }

    fn pred_scene(&self) -> Scene {
        Scene {
            image_id: self.gt.image_id,
            raster_size: self.gt.raster_size,
            instances: self.preds.iter().map(|p| p.instance.clone()).collect(),
        }
    }

    fn restricted(&self, classes: &[u32]) -> EvalImage {
        EvalImage {
            gt: Scene {
                instances: self.gt.instances.iter().filter(|v| classes.contains(&v.class_id)).cloned().collect(),
                ..self.gt.clone()
            },
            preds: self.preds.iter().filter(|p| classes.contains(&p.instance.class_id)).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOptions {
    pub pixel_tolerance_px: f64,
    pub stroke_px: usize,
    pub apls_snap_px: f64,
    pub apls_pairs: usize,
    pub seed: u64,
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            pixel_tolerance_px: 10.0,
            stroke_px: 1,
            apls_snap_px: 10.0,
            apls_pairs: 200,
            seed: 0,
            iou_thresholds: coco_thresholds(),
        }
    }
}

/// Metric values over one subset of classes; `None` where the subset has
/// nothing to measure.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricValues {
    pub gt_instances: usize,
    pub pred_instances: usize,
    pub matched_polygons: usize,
    pub map: Option<f64>,
    pub iou: Option<f64>,
    pub ciou: Option<f64>,
    pub polis: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub apls: Option<f64>,
    pub sap10: Option<f64>,
    pub sap15: Option<f64>,
    pub sf10: Option<f64>,
    pub sf15: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub name: String,
    pub structure: StructureKind,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: usize,
    #[serde(flatten)]
    pub aggregate: MetricValues,
    /// Always null; see `notes`.
    pub ecm: Option<f64>,
    pub notes: Vec<String>,
    pub per_class: Vec<ClassReport>,
    pub options: EvalOptions,
}

/// Hungarian pairing of same-class polygons by IoU in one image; returns
/// `(iou, ciou, polis)` per pair and the number of unpaired instances.
fn polygon_pairs(img: &EvalImage, classes: &[u32]) -> (Vec<(f64, f64, Option<f64>)>, usize) {
    let mut pairs = Vec::new();
    let mut unpaired = 0;
    for &c in classes {
        let g: Vec<&Vec<Point>> = img.gt.instances.iter().filter(|v| v.class_id == c).map(|v| &v.points).collect();
        let p: Vec<&Vec<Point>> = img.preds.iter().filter(|v| v.instance.class_id == c).map(|v| &v.instance.points).collect();
        let iou: Vec<Vec<f64>> = g
            .iter()
            .map(|a| p.iter().map(|b| polygon_iou(a, b).unwrap_or(0.0)).collect())
            .collect();
        let cost: Vec<Vec<f64>> = iou.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
        let matched = min_cost_assignment(&cost);
        unpaired += g.len() + p.len() - 2 * matched.len();
        for (i, j) in matched {
            let v = iou[i][j];
            let ci = ciou(g[i], p[j]).unwrap_or(0.0);
            let pl = if v > 0.0 { polis(g[i], p[j]).ok() } else { None };
            pairs.push((v, ci, pl));
        }
    }
    (pairs, unpaired)
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn segments_of(img: &EvalImage) -> (Vec<ScoredSegment>, Vec<(Point, Point)>) {
    let s = img.gt.raster_size as f64;
    let preds = img
        .preds
        .iter()
        .filter(|p| p.instance.kind == StructureKind::Segment && p.instance.points.len() >= 2)
        .map(|p| ScoredSegment {
            a: p.instance.points[0] * s,
            b: *p.instance.points.last().unwrap() * s,
            score: p.score,
        })
        .collect();
    let gts = img
        .gt
        .instances
        .iter()
        .filter(|v| v.kind == StructureKind::Segment && v.points.len() >= 2)
        .map(|v| (v.points[0] * s, *v.points.last().unwrap() * s))
        .collect();
    (preds, gts)
}

fn evaluate_subset(images: &[EvalImage], classes: &[u32], cfg: &Config, opts: &EvalOptions) -> MetricValues {
    let imgs: Vec<EvalImage> = images.iter().map(|i| i.restricted(classes)).collect();
    let kind_of = |c: u32| cfg.class_table.kind(c);
    let polygon_classes: Vec<u32> = classes.iter().copied().filter(|&c| kind_of(c) == Some(StructureKind::Polygon)).collect();
    let has_open = classes.iter().any(|&c| kind_of(c).is_some_and(|k| !k.is_closed()));
    let has_segments = classes.iter().any(|&c| kind_of(c) == Some(StructureKind::Segment));

    let mut v = MetricValues {
        gt_instances: imgs.iter().map(|i| i.gt.instances.len()).sum(),
        pred_instances: imgs.iter().map(|i| i.preds.len()).sum(),
        ..MetricValues::default()
    };

    if !polygon_classes.is_empty() {
        v.map = coco_map(&imgs, &polygon_classes, &opts.iou_thresholds);
        let per_image: Vec<_> = imgs.par_iter().map(|i| polygon_pairs(i, &polygon_classes)).collect();
        let mut ious = Vec::new();
        let mut cious = Vec::new();
        let mut polises = Vec::new();
        for (pairs, unpaired) in per_image {
            for (iou, ci, pl) in pairs {
                ious.push(iou);
                cious.push(ci);
                polises.extend(pl);
            }
            ious.extend(std::iter::repeat_n(0.0, unpaired));
            cious.extend(std::iter::repeat_n(0.0, unpaired));
        }
        v.matched_polygons = polises.len();
        v.iou = mean(&ious);
        v.ciou = mean(&cious);
        v.polis = mean(&polises);
    }

    if has_open {
        let counts = imgs
            .par_iter()
            .map(|i| pixel_counts(&i.pred_scene(), &i.gt, opts.pixel_tolerance_px, opts.stroke_px))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(PixelCounts::default(), PixelCounts::add);
        let prf = counts.prf();
        v.precision = Some(prf.precision);
        v.recall = Some(prf.recall);
        v.f1 = Some(prf.f1);
        let aopts = AplsOptions {
            snap_radius: opts.apls_snap_px,
            max_pairs: opts.apls_pairs,
            seed: opts.seed,
        };
        let scores: Vec<Option<f64>> = imgs
            .par_iter()
            .map(|i| {
                let s = i.gt.raster_size as f64;
                let g = RoadGraph::from_instances(&i.gt.instances, s);
                let p = RoadGraph::from_instances(i.preds.iter().map(|p| &p.instance), s);
                if g.is_empty() && p.is_empty() {
                    None
                } else {
                    Some(apls(&p, &g, &aopts))
                }
            })
            .collect();
        v.apls = mean(&scores.into_iter().flatten().collect::<Vec<_>>());
    }

    if has_segments {
        let segs: Vec<_> = imgs.iter().map(segments_of).collect();
        if let Some(r) = sap_sf(&segs, &[10.0, 15.0]) {
            v.sap10 = Some(r[0].sap);
            v.sf10 = Some(r[0].sf);
            v.sap15 = Some(r[1].sap);
            v.sf15 = Some(r[1].sf);
        }
    }
    v
}

/// Evaluates all images, in aggregate and per class.
pub fn evaluate(images: &[EvalImage], cfg: &Config, opts: &EvalOptions) -> MetricReport {
    let all: Vec<u32> = cfg.class_table.iter().map(|(id, _, _)| id).collect();
    let per_class = cfg
        .class_table
        .iter()
        .map(|(id, name, kind)| ClassReport {
            class_id: id,
            name: name.to_string(),
            structure: kind,
            values: evaluate_subset(images, &[id], cfg, opts),
        })
        .collect();
    MetricReport {
        images: images.len(),
        aggregate: evaluate_subset(images, &all, cfg, opts),
        ecm: None,
        notes: vec!["ecm is not computed; no definition of it is implemented".into()],
        per_class,
        options: opts.clone(),
    }
}

/// Human-readable definitions of every reported number.
pub fn describe() -> &'static str {
    "\
map        COCO-style mask AP over polygon classes: predictions ranked by score are greedily
           matched to the unmatched ground-truth polygon of highest IoU (>= threshold);
           101-point interpolated precision, averaged over IoU thresholds 0.50:0.05:0.95
           and over classes that have ground truth.
iou        Per image and class, polygons are paired by optimal assignment on 1 - IoU;
           mean IoU over all pairs plus every unpaired polygon counted as 0.
ciou       As iou, with each pair's IoU multiplied by 1 - |Na - Nb| / (Na + Nb),
           N being vertex counts.
polis      Mean over pairs with positive IoU of
           sum_a d(a, boundary B) / (2|A|) + sum_b d(b, boundary A) / (2|B|),
           in normalized units.
precision  Open structures rasterized with the given stroke; a predicted pixel is correct
recall     when within the tolerance (Euclidean, pixels) of a ground-truth pixel, and
f1         symmetrically for recall. Pixel counts are pooled over images. Empty prediction
           gives precision 1, empty ground truth recall 1, F1 = 1 only when both are empty.
apls       Graphs from open structures (nodes = key points, edges = consecutive key
           points). For node pairs of one graph, nodes are snapped onto the other graph
           within the snap radius; penalty min(1, |L - L'| / L), or 1 when unsnapped or
           unreachable. Score 1 - mean penalty, all pairs or a seeded sample; the two
           directions are combined by harmonic mean; averaged over non-empty images.
sap10/15   Segments ranked by score; each is compared with its nearest ground-truth segment
sf10/15    by the smaller summed squared endpoint distance over both endpoint orders (pixels)
           and is a hit when that segment is unclaimed and the distance <= threshold^2.
           101-point interpolated AP; sF is the best F-score along the curve.
ecm        Not computed (always null).
"
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One `scope,class_id,class,metric,value` row per number.
pub fn to_csv(report: &MetricReport) -> String {
    let mut out = String::from("scope,class_id,class,metric,value\n");
    let mut rows = |scope: &str, id: String, name: &str, v: &MetricValues| {
        let items = [
            ("map", v.map),
            ("iou", v.iou),
            ("ciou", v.ciou),
            ("polis", v.polis),
            ("precision", v.precision),
            ("recall", v.recall),
            ("f1", v.f1),
            ("apls", v.apls),
            ("sap10", v.sap10),
            ("sap15", v.sap15),
            ("sf10", v.sf10),
            ("sf15", v.sf15),
            ("gt_instances", Some(v.gt_instances as f64)),
            ("pred_instances", Some(v.pred_instances as f64)),
        ];
        for (m, x) in items {
            out.push_str(&format!("{scope},{id},{name},{m},{}\n", fmt(x)));
        }
    };
    rows("all", String::new(), "", &report.aggregate);
    for c in &report.per_class {
        rows("class", c.class_id.to_string(), &c.name, &c.values);
    }
    out
}
