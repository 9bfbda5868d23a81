//! Deformable sampling: each query predicts `E` coordinate offsets around
//! its reference point plus `E` weight logits, and reads the pyramid
//! bilinearly at the shifted locations. The `E` points are split into
//! contiguous blocks, one block per level; the softmax runs jointly over all
//! `E`.

use std::ops::Range;

use crate::features::{bilinear_accumulate, FeaturePyramid};
use crate::model::Point;
use crate::nn::{softmax_in_place, LayerNorm, Linear, Reduction, Trace};

#[derive(Debug, Clone, PartialEq)]
pub struct DeformableSampler {
    pub norm: LayerNorm,
    /// `C → 2E`, interleaved `(dx, dy)`.
    pub offsets: Linear,
    /// `C → E` weight logits.
    pub weights: Linear,
}

/// Sampling geometry of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPlan {
    pub offsets: Vec<Point>,
    pub coords: Vec<Point>,
    pub weights: Vec<f64>,
    /// Pyramid level read by each sampling point.
    pub levels: Vec<usize>,
}

/// Contiguous block of sampling points assigned to each level; the first
/// `E mod levels` levels take one extra point.
pub fn level_split(e: usize, levels: usize) -> Vec<Range<usize>> {
    let base = e / levels;
    let extra = e % levels;
    let mut start = 0;
    (0..levels)
        .map(|l| {
            let len = base + usize::from(l < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

impl DeformableSampler {
    pub fn e_samples(&self) -> usize {
        self.weights.out_dim()
    }

    pub fn plan(&self, query: &[f64], reference: Point, n_levels: usize, trace: &mut Trace) -> QueryPlan {
        let normed = self.norm.forward_row(query);
        let raw = self.offsets.forward_row(&normed);
        let mut weights = self.weights.forward_row(&normed);
        softmax_in_place(&mut weights, Reduction::Sequential);
        trace.record_row(&weights);
        let offsets: Vec<Point> = raw.chunks_exact(2).map(|d| Point::new(d[0], d[1])).collect();
        let coords = offsets.iter().map(|d| reference + *d).collect();
        let mut levels = vec![0; weights.len()];
        for (l, r) in level_split(weights.len(), n_levels).into_iter().enumerate() {
            levels[r].iter_mut().for_each(|v| *v = l);
        }
        QueryPlan {
            offsets,
            coords,
            weights,
            levels,
        }
    }

    /// `Σ_k W_k · Sampling(F, S_k)` for one query.
    pub fn sample(&self, plan: &QueryPlan, pyramid: &FeaturePyramid) -> Vec<f64> {
        let mut out = vec![0.0; pyramid.channels()];
        for k in 0..plan.weights.len() {
            bilinear_accumulate(&pyramid.levels[plan.levels[k]], plan.coords[k], plan.weights[k], &mut out);
        }
        out
    }

    /// Residual update `query + Σ_k W_k · Sampling(F, S_k)`.
    pub fn update(&self, query: &[f64], reference: Point, pyramid: &FeaturePyramid, trace: &mut Trace) -> (Vec<f64>, QueryPlan) {
        let plan = self.plan(query, reference, pyramid.levels.len(), trace);
        let sampled = self.sample(&plan, pyramid);
        let out = query.iter().zip(&sampled).map(|(a, b)| a + b).collect();
        (out, plan)
    }
}
