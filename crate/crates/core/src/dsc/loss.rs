use serde::{Deserialize, Serialize};

use super::{point_match, LossWeights, MatchMode, MatchProblem, MatchResult};
use crate::error::{Error, Result};
use crate::model::{edges, Point, StructureKind};

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` inside the
/// classification loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dir: f64,
    pub kp: f64,
    pub cls: f64,
    /// `α_dir·dir + α_kp·kp + α_cls·cls`.
    pub total: f64,
}

fn check_lengths(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    Ok(())
}

/// `1 − cos` between two edges; degenerate edges score 1.
fn edge_term(a: Point, b: Point) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - a.dot(b) / (na * nb)
}

/// Mean `1 − cos` between corresponding edges; `T` edges for closed
/// sequences, `T − 1` for open ones.
pub fn loss_dir(pred: &[Point], gt: &[Point], closed: bool) -> Result<f64> {
    check_lengths(pred, gt)?;
    if gt.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: gt.len(),
        });
    }
    let n = if closed { gt.len() } else { gt.len() - 1 };
    let s: f64 = edges(pred, closed)
        .zip(edges(gt, closed))
        .map(|((a0, a1), (b0, b1))| edge_term(a1 - a0, b1 - b0))
        .sum();
    Ok(s / n as f64)
}

/// Mean l1 distance between corresponding points.
pub fn loss_kp(pred: &[Point], gt: &[Point]) -> Result<f64> {
    check_lengths(pred, gt)?;
    if gt.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| a.l1(*b)).sum::<f64>() / gt.len() as f64)
}

/// Mean binary cross-entropy over all `M` predicted points, with target 1
/// at the matched indices.
pub fn loss_cls(probs: &[f64], matched: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    let mut target = vec![false; probs.len()];
    matched.iter().for_each(|&j| target[j] = true);
    let s: f64 = probs
        .iter()
        .zip(&target)
        .map(|(&c, &y)| {
            let c = c.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y {
                -c.ln()
            } else {
                -(1.0 - c).ln()
            }
        })
        .sum();
    s / probs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VslOutput {
    pub value: LossBreakdown,
    pub grad_points: Vec<Point>,
    pub grad_probs: Vec<f64>,
    pub matching: MatchResult,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and gradients with the matching held fixed.
pub fn loss_vsl_at(prob: &MatchProblem, w: &LossWeights, matching: &MatchResult) -> Result<VslOutput> {
    let m = prob.m();
    let t = matching.gt.len();
    let closed = prob.kind.is_closed();
    let pred = &matching.matched;
    let gt = &matching.gt;
    let dir = loss_dir(pred, gt, closed)?;
    let kp = loss_kp(pred, gt)?;
    let cls = loss_cls(&prob.pred_probs, &matching.beta);
    let total = w.alpha_dir * dir + w.alpha_kp * kp + w.alpha_cls * cls;

    let mut grad_points = vec![Point::new(0.0, 0.0); m];
    let n_edges = if closed { t } else { t - 1 };
    for i in 0..n_edges {
        let (i0, i1) = (i, (i + 1) % t);
        let a = pred[i1] - pred[i0];
        let b = gt[i1] - gt[i0];
        let (na, nb) = (a.norm(), b.norm());
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let cos = a.dot(b) / (na * nb);
        // d(1 − cos)/da = −(b/(|a||b|) − cos·a/|a|²)
        let g = (b * (1.0 / (na * nb)) - a * (cos / (na * na))) * (-w.alpha_dir / n_edges as f64);
        grad_points[matching.beta[i1]] = grad_points[matching.beta[i1]] + g;
        grad_points[matching.beta[i0]] = grad_points[matching.beta[i0]] - g;
    }
    let kp_scale = w.alpha_kp / t as f64;
    for (i, &j) in matching.beta.iter().enumerate() {
        let d = pred[i] - gt[i];
        grad_points[j] = grad_points[j] + Point::new(sign(d.x), sign(d.y)) * kp_scale;
    }
    let mut target = vec![false; m];
    matching.beta.iter().for_each(|&j| target[j] = true);
    let cls_scale = w.alpha_cls / m as f64;
    let grad_probs = prob
        .pred_probs
        .iter()
        .zip(&target)
        .map(|(&c, &y)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&c) {
                0.0
            } else if y {
                -cls_scale / c
            } else {
                cls_scale / (1.0 - c)
            }
        })
        .collect();
    Ok(VslOutput {
        value: LossBreakdown { dir, kp, cls, total },
        grad_points,
        grad_probs,
        matching: matching.clone(),
    })
}

/// Matches, then evaluates the weighted shape loss and its gradients with
/// respect to the predicted points and probabilities.
pub fn loss_vsl(prob: &MatchProblem, w: &LossWeights, mode: MatchMode) -> Result<VslOutput> {
    let matching = point_match(prob, w, mode)?;
    loss_vsl_at(prob, w, &matching)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant,
    /// `lr·(1 − t/steps)` at step `t`.
    #[default]
    LinearDecay,
}

impl StepSchedule {
    pub fn parse(s: &str) -> Option<StepSchedule> {
        match s {
            "constant" => Some(StepSchedule::Constant),
            "linear-decay" => Some(StepSchedule::LinearDecay),
            _ => None,
        }
    }

    pub fn rate(self, lr: f64, step: usize, steps: usize) -> f64 {
        match self {
            StepSchedule::Constant => lr,
            StepSchedule::LinearDecay => lr * (1.0 - step as f64 / steps as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    pub schedule: StepSchedule,
    pub mode: MatchMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            steps: 2000,
            lr: 0.05,
            schedule: StepSchedule::default(),
            mode: MatchMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub points: Vec<Point>,
    pub probs: Vec<f64>,
    /// Loss before every step and once more at the end.
    pub losses: Vec<f64>,
    pub matching: MatchResult,
}

/// Gradient descent on the shape loss, re-matching at every step.
/// Probabilities are projected back into `[0, 1]` after each step.
pub fn descent_fit(
    points: &[Point],
    probs: &[f64],
    gt: &[Point],
    kind: StructureKind,
    w: &LossWeights,
    opts: &FitOptions,
) -> Result<FitResult> {
    if opts.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if !opts.lr.is_finite() || opts.lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", opts.lr)));
    }
    w.validate()?;
    let mut prob = MatchProblem::new(points.to_vec(), probs.to_vec(), gt.to_vec(), kind)?;
    let mut losses = Vec::with_capacity(opts.steps + 1);
    for step in 0..opts.steps {
        let out = loss_vsl(&prob, w, opts.mode)?;
        losses.push(out.value.total);
        let rate = opts.schedule.rate(opts.lr, step, opts.steps);
        if rate == 0.0 {
            continue;
        }
        for (p, g) in prob.pred_points.iter_mut().zip(&out.grad_points) {
            *p = *p - *g * rate;
        }
        for (c, g) in prob.pred_probs.iter_mut().zip(&out.grad_probs) {
            *c = (*c - rate * g).clamp(0.0, 1.0);
        }
    }
    let last = loss_vsl(&prob, w, opts.mode)?;
    losses.push(last.value.total);
    Ok(FitResult {
        points: prob.pred_points,
        probs: prob.pred_probs,
        losses,
        matching: last.matching,
    })
}
