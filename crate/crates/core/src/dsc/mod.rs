//! Dynamic shape constraint: instance pairing, key-point matching between a
//! predicted point sequence and ground-truth key points, and the vector
//! shape losses built on that matching.

mod loss;

pub use loss::{
    descent_fit, loss_cls, loss_dir, loss_kp, loss_vsl, loss_vsl_at, FitOptions, FitResult, LossBreakdown, StepSchedule,
    VslOutput, BCE_EPS,
};

use serde::{Deserialize, Serialize};

use crate::assignment::{min_cost_assignment, near_optimal_assignments};
use crate::decoder::Prediction;
use crate::error::{Error, Result};
use crate::model::{Point, StructureKind, VectorInstance};
use crate::sampling::{canonical_key_points, orientation_candidates, Orientation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Order-preserving matches only.
    #[default]
    Monotone,
    /// Any injective match.
    Hungarian,
}

impl MatchMode {
    pub fn parse(s: &str) -> Option<MatchMode> {
        match s {
            "monotone" => Some(MatchMode::Monotone),
            "hungarian" => Some(MatchMode::Hungarian),
            _ => None,
        }
    }
}

/// Matching-cost factors and loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Point term of the matching cost.
    pub alpha_p: f64,
    /// Key-point probability term of the matching cost.
    pub alpha_c: f64,
    pub alpha_dir: f64,
    pub alpha_kp: f64,
    pub alpha_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_p: 1.0,
            alpha_c: 1.0,
            alpha_dir: 1.0,
            alpha_kp: 10.0,
            alpha_cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_p", self.alpha_p),
            ("alpha_c", self.alpha_c),
            ("alpha_dir", self.alpha_dir),
            ("alpha_kp", self.alpha_kp),
            ("alpha_cls", self.alpha_cls),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> LossWeights {
        LossWeights {
            alpha_p: self.alpha_p * k,
            alpha_c: self.alpha_c * k,
            alpha_dir: self.alpha_dir * k,
            alpha_kp: self.alpha_kp * k,
            alpha_cls: self.alpha_cls * k,
        }
    }
}

/// One predicted sequence against one set of ground-truth key points.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProblem {
    pub pred_points: Vec<Point>,
    pub pred_probs: Vec<f64>,
    /// Key points in canonical order.
    pub gt: Vec<Point>,
    pub kind: StructureKind,
}

impl MatchProblem {
    pub fn new(pred_points: Vec<Point>, pred_probs: Vec<f64>, gt: Vec<Point>, kind: StructureKind) -> Result<Self> {
        if pred_points.len() != pred_probs.len() {
            return Err(Error::LengthMismatch {
                left: pred_points.len(),
                right: pred_probs.len(),
            });
        }
        if gt.len() > pred_points.len() {
            return Err(Error::TooManyKeyPoints {
                key_points: gt.len(),
                predicted: pred_points.len(),
            });
        }
        if gt.len() < kind.min_points() {
            return Err(Error::TooFewPoints {
                needed: kind.min_points(),
                got: gt.len(),
            });
        }
        Ok(MatchProblem {
            pred_points,
            pred_probs,
            gt,
            kind,
        })
    }

    /// Uses the canonical key points of `gt` as targets.
    pub fn from_instance(pred_points: Vec<Point>, pred_probs: Vec<f64>, gt: &VectorInstance) -> Result<Self> {
        MatchProblem::new(pred_points, pred_probs, canonical_key_points(gt), gt.kind)
    }

    pub fn m(&self) -> usize {
        self.pred_points.len()
    }

    pub fn t(&self) -> usize {
        self.gt.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// `beta[i]` is the predicted index matched to key point `i`.
    pub beta: Vec<usize>,
    pub cost: f64,
    pub orientation: Orientation,
    /// Ground-truth key points in the chosen orientation.
    pub gt: Vec<Point>,
    /// Predicted points at `beta`.
    pub matched: Vec<Point>,
}

/// Cost of pairing key point `p` with a prediction of position `q` and
/// probability `c`.
fn pair_cost(p: Point, q: Point, c: f64, alpha_p: f64, alpha_c: f64) -> f64 {
    alpha_p * p.l1(q) + alpha_c * (1.0 - c).abs()
}

/// Matching cost of a given alignment, summed in key-point order and
/// divided by `T`.
pub fn match_cost(pred: &[Point], probs: &[f64], gt: &[Point], beta: &[usize], alpha_p: f64, alpha_c: f64) -> f64 {
    let mut s = 0.0;
    for (i, &j) in beta.iter().enumerate() {
        s += pair_cost(gt[i], pred[j], probs[j], alpha_p, alpha_c);
    }
    s / gt.len() as f64
}

fn cost_matrix(pred: &[Point], probs: &[f64], gt: &[Point], alpha_p: f64, alpha_c: f64) -> Vec<Vec<f64>> {
    gt.iter()
        .map(|&p| {
            pred.iter()
                .zip(probs)
                .map(|(&q, &c)| pair_cost(p, q, c, alpha_p, alpha_c))
                .collect()
        })
        .collect()
}

/// Near-optimal alignments considered when breaking ties.
const TIE_LIMIT: usize = 256;

/// Strictly increasing alignments within `1e-11` relative of the minimum
/// cost, in lexicographic order, at most `limit` of them.
fn monotone_alignments(cost: &[Vec<f64>], limit: usize) -> Vec<Vec<usize>> {
    let t = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    // best[i][j]: cheapest way to place key points i.. at indices ≥ j.
    let mut best = vec![vec![f64::INFINITY; m + 2]; t + 1];
    best[t].iter_mut().for_each(|v| *v = 0.0);
    for i in (0..t).rev() {
        for j in (0..m).rev() {
            best[i][j] = (cost[i][j] + best[i + 1][j + 1]).min(best[i][j + 1]);
        }
    }
    let bound = best[0][0] + 1e-11 * best[0][0].abs().max(1.0);
    let mut found = Vec::new();
    let mut beta = Vec::with_capacity(t);
    descend_monotone(cost, &best, bound, 0.0, 0, &mut beta, &mut found, limit.max(1));
    if found.is_empty() {
        // Rounding rejected every branch; follow the table exactly instead.
        let mut start = 0;
        for i in 0..t {
            let j = (start..m)
                .find(|&j| cost[i][j] + best[i + 1][j + 1] == best[i][start])
                .expect("a finite alignment exists when T ≤ M");
            beta.push(j);
            start = j + 1;
        }
        found.push(beta);
    }
    found
}

#[allow(clippy::too_many_arguments)]
fn descend_monotone(
    cost: &[Vec<f64>],
    best: &[Vec<f64>],
    bound: f64,
    prefix: f64,
    start: usize,
    beta: &mut Vec<usize>,
    found: &mut Vec<Vec<usize>>,
    limit: usize,
) {
    let i = beta.len();
    if i == cost.len() {
        found.push(beta.clone());
        return;
    }
    for j in start..cost[i].len() {
        if found.len() >= limit {
            return;
        }
        let here = prefix + cost[i][j];
        if here + best[i + 1][j + 1] <= bound {
            beta.push(j);
            descend_monotone(cost, best, bound, here, j + 1, beta, found, limit);
            beta.pop();
        }
    }
}

/// Best alignment of `gt` in the given order. Near-ties of the solver are
/// settled on the cost as `match_cost` computes it, then lexicographically.
pub fn align(pred: &[Point], probs: &[f64], gt: &[Point], alpha_p: f64, alpha_c: f64, mode: MatchMode) -> (Vec<usize>, f64) {
    let cost = cost_matrix(pred, probs, gt, alpha_p, alpha_c);
    let candidates = match mode {
        MatchMode::Monotone => monotone_alignments(&cost, TIE_LIMIT),
        MatchMode::Hungarian => near_optimal_assignments(&cost, TIE_LIMIT),
    };
    let mut best: Option<(Vec<usize>, f64)> = None;
    for beta in candidates {
        let c = match_cost(pred, probs, gt, &beta, alpha_p, alpha_c);
        if best.as_ref().is_none_or(|(_, b)| c < *b) {
            best = Some((beta, c));
        }
    }
    best.expect("at least one alignment")
}

/// Matches the key points against the predicted sequence. In monotone mode
/// open kinds also try the reversed key points and keep the reversal only
/// when it is strictly cheaper. Hungarian matches ignore order, so the
/// reversal offers the same pairings and is not tried.
pub fn point_match(prob: &MatchProblem, w: &LossWeights, mode: MatchMode) -> Result<MatchResult> {
    if prob.t() > prob.m() {
        return Err(Error::TooManyKeyPoints {
            key_points: prob.t(),
            predicted: prob.m(),
        });
    }
    let (mut beta, mut cost) = align(&prob.pred_points, &prob.pred_probs, &prob.gt, w.alpha_p, w.alpha_c, mode);
    let mut orientation = Orientation::Forward;
    let mut gt = prob.gt.clone();
    if !prob.kind.is_closed() && mode == MatchMode::Monotone {
        let rev: Vec<Point> = prob.gt.iter().rev().copied().collect();
        let (rb, rc) = align(&prob.pred_points, &prob.pred_probs, &rev, w.alpha_p, w.alpha_c, mode);
        if rc < cost {
            beta = rb;
            cost = rc;
            orientation = Orientation::Reversed;
            gt = rev;
        }
    }
    let matched = beta.iter().map(|&j| prob.pred_points[j]).collect();
    Ok(MatchResult {
        beta,
        cost,
        orientation,
        gt,
        matched,
    })
}

/// Factors of the instance-level pairing cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceWeights {
    pub lambda_cls: f64,
    pub lambda_pts: f64,
}

impl Default for InstanceWeights {
    fn default() -> Self {
        InstanceWeights {
            lambda_cls: 2.0,
            lambda_pts: 5.0,
        }
    }
}

/// What instance pairing needs from a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCandidate {
    /// Per class, background excluded or last.
    pub class_probs: Vec<f64>,
    /// The full predicted sequence.
    pub points: Vec<Point>,
    pub keypoint_prob: Vec<f64>,
}

impl InstanceCandidate {
    pub fn from_prediction(pred: &Prediction) -> Vec<InstanceCandidate> {
        (0..pred.len())
            .map(|i| InstanceCandidate {
                class_probs: pred.class_probs(i),
                points: pred.points[i].clone(),
                keypoint_prob: pred.keypoint_prob[i].clone(),
            })
            .collect()
    }
}

/// Mean per-point l1 distance between a predicted sequence and the ground
/// truth resampled to the same length, over the allowed orientations.
/// Ground truth with more key points than predicted points yields the
/// largest possible distance, 2.
pub fn sequence_distance(points: &[Point], gt: &VectorInstance) -> f64 {
    let Ok(cands) = orientation_candidates(gt, points.len()) else {
        return 2.0;
    };
    cands
        .iter()
        .map(|c| c.points.iter().zip(points).map(|(a, b)| a.l1(*b)).sum::<f64>() / points.len() as f64)
        .fold(f64::INFINITY, f64::min)
}

/// One-to-one pairing of predictions and ground truth minimizing
/// `λ_cls·(1 − p(class_gt)) + λ_pts·sequence_distance`. Returns
/// `(gt, pred)` pairs sorted by ground-truth index; everything else is
/// background.
pub fn instance_match(preds: &[InstanceCandidate], gts: &[VectorInstance], w: &InstanceWeights) -> Vec<(usize, usize)> {
    if preds.is_empty() || gts.is_empty() {
        return Vec::new();
    }
    let cost: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| {
            preds
                .iter()
                .map(|p| {
                    let pc = p.class_probs.get(g.class_id as usize).copied().unwrap_or(0.0);
                    w.lambda_cls * (1.0 - pc) + w.lambda_pts * sequence_distance(&p.points, g)
                })
                .collect()
        })
        .collect();
    min_cost_assignment(&cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&p| p.into()).collect()
    }

    /// All injections (or strictly increasing ones) in lexicographic order.
    fn enumerate(t: usize, m: usize, increasing: bool) -> Vec<Vec<usize>> {
        fn rec(t: usize, m: usize, inc: bool, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == t {
                out.push(cur.clone());
                return;
            }
            let lo = if inc { cur.last().map_or(0, |&j| j + 1) } else { 0 };
            for j in lo..m {
                if !cur.contains(&j) {
                    cur.push(j);
                    rec(t, m, inc, cur, out);
                    cur.pop();
                }
            }
        }
        let mut out = Vec::new();
        rec(t, m, increasing, &mut Vec::new(), &mut out);
        out
    }

    fn brute(prob: &MatchProblem, w: &LossWeights, mode: MatchMode) -> (Vec<usize>, f64, Orientation) {
        let mut best: Option<(Vec<usize>, f64, Orientation)> = None;
        let mut orients = vec![(Orientation::Forward, prob.gt.clone())];
        if !prob.kind.is_closed() && mode == MatchMode::Monotone {
            orients.push((Orientation::Reversed, prob.gt.iter().rev().copied().collect()));
        }
        for (o, gt) in orients {
            for b in enumerate(prob.t(), prob.m(), mode == MatchMode::Monotone) {
                let c = match_cost(&prob.pred_points, &prob.pred_probs, &gt, &b, w.alpha_p, w.alpha_c);
                if best.as_ref().is_none_or(|x| c < x.1) {
                    best = Some((b, c, o));
                }
            }
        }
        best.unwrap()
    }

    fn random_problem(rng: &mut ChaCha8Rng) -> MatchProblem {
        let kind = [StructureKind::Polyline, StructureKind::Segment, StructureKind::Polygon][rng.gen_range(0..3)];
        let m = rng.gen_range(kind.min_points()..=6);
        let hi = kind.max_points().unwrap_or(4).min(4).min(m);
        let t = rng.gen_range(kind.min_points()..=hi);
        let p = (0..m).map(|_| Point::new(rng.gen(), rng.gen())).collect();
        let c = (0..m).map(|_| rng.gen()).collect();
        let g = (0..t).map(|_| Point::new(rng.gen(), rng.gen())).collect();
        MatchProblem::new(p, c, g, kind).unwrap()
    }

    #[test]
    fn hand_example() {
        let prob = MatchProblem::new(
            pts(&[(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]),
            vec![0.9, 0.1, 0.9],
            pts(&[(0.0, 0.0), (1.0, 1.0)]),
            StructureKind::Polyline,
        )
        .unwrap();
        let r = point_match(&prob, &LossWeights::default(), MatchMode::Monotone).unwrap();
        assert_eq!(r.beta, vec![0, 2]);
        assert_eq!(r.orientation, Orientation::Forward);
        assert!((r.cost - 0.1).abs() < 1e-12);
        let (b, c, _) = brute(&prob, &LossWeights::default(), MatchMode::Monotone);
        assert_eq!(b, r.beta);
        assert_eq!(c, r.cost);
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let pred = pts(&[(0.1, 0.1), (0.2, 0.3), (0.4, 0.2), (0.6, 0.6), (0.8, 0.1)]);
        let probs = vec![1.0, 0.0, 1.0, 0.0, 1.0];
        let gt = vec![pred[0], pred[2], pred[4]];
        let prob = MatchProblem::new(pred, probs, gt, StructureKind::Polyline).unwrap();
        for mode in [MatchMode::Monotone, MatchMode::Hungarian] {
            let r = point_match(&prob, &LossWeights::default(), mode).unwrap();
            assert_eq!(r.beta, vec![0, 2, 4]);
            assert_eq!(r.cost, 0.0);
        }
    }

    #[test]
    fn agrees_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = LossWeights::default();
        for _ in 0..120 {
            let prob = random_problem(&mut rng);
            for mode in [MatchMode::Monotone, MatchMode::Hungarian] {
                let r = point_match(&prob, &w, mode).unwrap();
                let (b, c, o) = brute(&prob, &w, mode);
                assert_eq!((r.beta.clone(), r.cost, r.orientation), (b, c, o), "{mode:?} {prob:?}");
            }
        }
    }

    #[test]
    fn co_ordered_problems_agree_across_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w = LossWeights::default();
        let mut checked = 0;
        for _ in 0..400 {
            let prob = random_problem(&mut rng);
            let h = point_match(&prob, &w, MatchMode::Hungarian).unwrap();
            if h.beta.windows(2).all(|p| p[0] < p[1]) {
                let m = point_match(&prob, &w, MatchMode::Monotone).unwrap();
                assert_eq!(m.beta, h.beta);
                assert_eq!(m.orientation, h.orientation);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn cost_is_translation_invariant_and_orientation_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w = LossWeights::default();
        for _ in 0..100 {
            let prob = random_problem(&mut rng);
            let d = Point::new(0.25, -0.5);
            let moved = MatchProblem::new(
                prob.pred_points.iter().map(|p| *p + d).collect(),
                prob.pred_probs.clone(),
                prob.gt.iter().map(|p| *p + d).collect(),
                prob.kind,
            )
            .unwrap();
            let a = point_match(&prob, &w, MatchMode::Monotone).unwrap();
            let b = point_match(&moved, &w, MatchMode::Monotone).unwrap();
            assert!((a.cost - b.cost).abs() < 1e-12);
            if !prob.kind.is_closed() {
                let rev: Vec<Point> = prob.gt.iter().rev().copied().collect();
                let (_, fc) = align(&prob.pred_points, &prob.pred_probs, &prob.gt, 1.0, 1.0, MatchMode::Monotone);
                let (_, rc) = align(&prob.pred_points, &prob.pred_probs, &rev, 1.0, 1.0, MatchMode::Monotone);
                assert!(a.cost <= fc && a.cost <= rc);
            }
        }
    }

    #[test]
    fn too_many_key_points() {
        let err = MatchProblem::new(pts(&[(0.0, 0.0), (1.0, 1.0)]), vec![1.0; 2], pts(&[(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]), StructureKind::Polyline);
        assert!(matches!(err, Err(Error::TooManyKeyPoints { .. })));
    }

    #[test]
    fn instance_pairing() {
        let gt = VectorInstance::new(1, 1, StructureKind::Polyline, pts(&[(0.1, 0.1), (0.5, 0.2), (0.9, 0.6)]));
        let seq = orientation_candidates(&gt, 6).unwrap()[0].points.clone();
        let exact = InstanceCandidate {
            class_probs: vec![0.1, 0.8, 0.05, 0.05],
            points: seq.clone(),
            keypoint_prob: vec![0.5; 6],
        };
        let off = InstanceCandidate {
            points: seq.iter().map(|p| *p + Point::new(0.05, 0.0)).collect(),
            ..exact.clone()
        };
        assert_eq!(instance_match(&[off.clone(), exact.clone()], std::slice::from_ref(&gt), &InstanceWeights::default()), vec![(0, 1)]);
        assert!(instance_match(std::slice::from_ref(&exact), &[], &InstanceWeights::default()).is_empty());
        assert_eq!(sequence_distance(&seq, &gt), 0.0);
        let reversed: Vec<Point> = seq.iter().rev().copied().collect();
        assert_eq!(sequence_distance(&reversed, &gt), 0.0);
    }
}
