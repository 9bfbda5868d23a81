use serde::Serialize;

use super::geometry::polygon_iou;
use super::EvalImage;
use crate::model::Point;

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Precision at each rank of a score-sorted list of hits.
fn pr_curve(hits: &[bool], n_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    (precision, recall)
}

/// 101-point interpolated average precision of score-sorted hits.
pub fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || hits.is_empty() {
        return 0.0;
    }
    let (mut precision, recall) = pr_curve(hits, n_gt);
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        let k = recall.partition_point(|&x| x < r);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// Highest F-score along the precision/recall curve.
pub fn max_f_score(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let (precision, recall) = pr_curve(hits, n_gt);
    precision
        .iter()
        .zip(&recall)
        .map(|(&p, &r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        .fold(0.0, f64::max)
}

/// Score-sorted detections of one class: `(image, prediction index, score)`.
fn ranked(images: &[EvalImage], class_id: u32) -> Vec<(usize, usize, f64)> {
    let mut dets: Vec<(usize, usize, f64)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| {
            img.preds
                .iter()
                .enumerate()
                .filter(move |(_, p)| p.instance.class_id == class_id)
                .map(move |(j, p)| (i, j, p.score))
        })
        .collect();
    dets.sort_by(|a, b| b.2.total_cmp(&a.2));
    dets
}

/// COCO-style mask AP for one class, averaged over `thresholds`; `None` when
/// the class has no ground truth.
pub fn class_ap(images: &[EvalImage], class_id: u32, thresholds: &[f64]) -> Option<f64> {
    let gts: Vec<Vec<usize>> = images
        .iter()
        .map(|img| {
            (0..img.gt.instances.len())
                .filter(|&g| img.gt.instances[g].class_id == class_id)
                .collect()
        })
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let dets = ranked(images, class_id);
    // IoU of every detection against the same-class ground truth of its image.
    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|&(i, j, _)| {
            let p = &images[i].preds[j].instance.points;
            gts[i]
                .iter()
                .map(|&g| polygon_iou(p, &images[i].gt.instances[g].points).unwrap_or(0.0))
                .collect()
        })
        .collect();
    let mut total = 0.0;
    for &thr in thresholds {
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = dets
            .iter()
            .zip(&ious)
            .map(|(&(i, _, _), row)| {
                let mut best: Option<usize> = None;
                for (g, &iou) in row.iter().enumerate() {
                    if taken[i][g] || iou < thr {
                        continue;
                    }
                    if best.is_none_or(|b| iou > row[b]) {
                        best = Some(g);
                    }
                }
                if let Some(g) = best {
                    taken[i][g] = true;
                }
                best.is_some()
            })
            .collect();
        total += interpolated_ap(&hits, n_gt);
    }
    Some(total / thresholds.len() as f64)
}

/// Mean of [`class_ap`] over the given classes that have ground truth.
pub fn coco_map(images: &[EvalImage], class_ids: &[u32], thresholds: &[f64]) -> Option<f64> {
    let aps: Vec<f64> = class_ids.iter().filter_map(|&c| class_ap(images, c, thresholds)).collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// Scored line segment in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSegment {
    pub a: Point,
    pub b: Point,
    pub score: f64,
}

/// Sum of squared endpoint distances under the better endpoint order.
pub fn segment_distance(a0: Point, a1: Point, b0: Point, b1: Point) -> f64 {
    let sq = |p: Point, q: Point| {
        let d = p - q;
        d.dot(d)
    };
    (sq(a0, b0) + sq(a1, b1)).min(sq(a0, b1) + sq(a1, b0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentScore {
    pub threshold: f64,
    pub sap: f64,
    pub sf: f64,
}

/// Structural AP and best F-score for segments. Each prediction, in score
/// order, is compared with its nearest ground-truth segment and counts as a
/// hit when that segment is still free and the distance is at most
/// `threshold²`. `None` when there is no ground truth at all.
pub fn sap_sf(images: &[(Vec<ScoredSegment>, Vec<(Point, Point)>)], thresholds: &[f64]) -> Option<Vec<SegmentScore>> {
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<(usize, usize, f64)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, (p, _))| p.iter().enumerate().map(move |(j, s)| (i, j, s.score)))
        .collect();
    dets.sort_by(|a, b| b.2.total_cmp(&a.2));
    let nearest: Vec<Option<(usize, f64)>> = dets
        .iter()
        .map(|&(i, j, _)| {
            let s = images[i].0[j];
            images[i]
                .1
                .iter()
                .enumerate()
                .map(|(g, &(b0, b1))| (g, segment_distance(s.a, s.b, b0, b1)))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 <= cur.1 => Some(b),
                    _ => Some(cur),
                })
        })
        .collect();
    Some(
        thresholds
            .iter()
            .map(|&thr| {
                let mut taken: Vec<Vec<bool>> = images.iter().map(|(_, g)| vec![false; g.len()]).collect();
                let hits: Vec<bool> = dets
                    .iter()
                    .zip(&nearest)
                    .map(|(&(i, _, _), near)| match near {
                        Some((g, d)) if *d <= thr * thr && !taken[i][*g] => {
                            taken[i][*g] = true;
                            true
                        }
                        _ => false,
                    })
                    .collect();
                SegmentScore {
                    threshold: thr,
                    sap: interpolated_ap(&hits, n_gt),
                    sf: max_f_score(&hits, n_gt),
                }
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Scene, StructureKind, VectorInstance};
    use crate::scene_io::PredictedInstance;

    fn square(x: f64, y: f64, s: f64) -> Vec<Point> {
        vec![Point::new(x, y), Point::new(x + s, y), Point::new(x + s, y + s), Point::new(x, y + s)]
    }

    fn pred(points: Vec<Point>, score: f64) -> PredictedInstance {
        PredictedInstance {
            instance: VectorInstance::new(1, 0, StructureKind::Polygon, points),
            score,
            keypoint_prob: Vec::new(),
            layer: 0,
            sequence: None,
            sequence_keypoint_prob: None,
        }
    }

    fn image(gt: Vec<Vec<Point>>, preds: Vec<PredictedInstance>) -> EvalImage {
        EvalImage {
            gt: Scene {
                image_id: 1,
                raster_size: 100,
                instances: gt
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| VectorInstance::new(i as u64 + 1, 0, StructureKind::Polygon, p))
                    .collect(),
            },
            preds,
        }
    }

    #[test]
    fn ap_examples() {
        let g = square(0.1, 0.1, 0.2);
        let perfect = image(vec![g.clone()], vec![pred(g.clone(), 1.0)]);
        assert_eq!(coco_map(&[perfect], &[0], &coco_thresholds()), Some(1.0));
        let none = image(vec![g.clone()], vec![]);
        assert_eq!(coco_map(&[none], &[0], &coco_thresholds()), Some(0.0));
        let two = image(vec![g.clone()], vec![pred(square(0.6, 0.6, 0.2), 1.0), pred(g.clone(), 0.9)]);
        assert!((class_ap(&[two], 0, &[0.5]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(coco_map(&[image(vec![], vec![])], &[0], &[0.5]), None);
    }

    #[test]
    fn sap_examples() {
        let gt = vec![(Point::new(10.0, 10.0), Point::new(50.0, 10.0))];
        let exact = vec![ScoredSegment { a: gt[0].0, b: gt[0].1, score: 1.0 }];
        let r = sap_sf(&[(exact, gt.clone())], &[10.0, 15.0]).unwrap();
        assert_eq!(r[0].sap, 1.0);
        assert_eq!(r[0].sf, 1.0);
        let r = sap_sf(&[(vec![], gt.clone())], &[10.0]).unwrap();
        assert_eq!((r[0].sap, r[0].sf), (0.0, 0.0));
        let off = vec![ScoredSegment {
            a: Point::new(53.0, 10.0),
            b: Point::new(10.0, 13.0),
            score: 0.7,
        }];
        assert_eq!(segment_distance(off[0].a, off[0].b, gt[0].0, gt[0].1), 18.0);
        let r = sap_sf(&[(off, gt)], &[10.0]).unwrap();
        assert_eq!(r[0].sap, 1.0);
    }

    #[test]
    fn interpolation_uses_right_envelope() {
        assert!((interpolated_ap(&[false, true], 1) - 0.5).abs() < 1e-12);
        assert_eq!(interpolated_ap(&[true, true], 2), 1.0);
        // Recall 0.5 at precision 1, then recall 1 at precision 2/3.
        let want = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((interpolated_ap(&[true, false, true], 2) - want).abs() < 1e-12);
        assert!((max_f_score(&[true, false, true], 2) - 0.8).abs() < 1e-12);
    }
}
