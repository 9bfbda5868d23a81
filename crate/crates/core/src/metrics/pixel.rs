use serde::Serialize;

use crate::model::Scene;
use crate::scene_io::{distance_transform, rasterize};

/// Pixel tallies behind precision and recall; sums across images pool them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PixelCounts {
    pub pred_pixels: usize,
    /// Predicted pixels within tolerance of ground truth.
    pub pred_hits: usize,
    pub gt_pixels: usize,
    /// Ground-truth pixels within tolerance of a prediction.
    pub gt_hits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PixelCounts {
    pub fn add(self, o: PixelCounts) -> PixelCounts {
        PixelCounts {
            pred_pixels: self.pred_pixels + o.pred_pixels,
            pred_hits: self.pred_hits + o.pred_hits,
            gt_pixels: self.gt_pixels + o.gt_pixels,
            gt_hits: self.gt_hits + o.gt_hits,
        }
    }

    /// Empty prediction gives precision 1, empty ground truth recall 1;
    /// F1 is 1 only when both are empty.
    pub fn prf(&self) -> Prf {
        let ratio = |hits: usize, total: usize| if total == 0 { 1.0 } else { hits as f64 / total as f64 };
        let (precision, recall) = match (self.pred_pixels, self.gt_pixels) {
            (0, 0) => (1.0, 1.0),
            (0, _) => (1.0, 0.0),
            (_, 0) => (0.0, 1.0),
            _ => (ratio(self.pred_hits, self.pred_pixels), ratio(self.gt_hits, self.gt_pixels)),
        };
        let f1 = match (self.pred_pixels, self.gt_pixels) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            _ if precision + recall > 0.0 => 2.0 * precision * recall / (precision + recall),
            _ => 0.0,
        };
        Prf { precision, recall, f1 }
    }
}

fn open_only(s: &Scene, raster_size: u32) -> Scene {
    Scene {
        image_id: s.image_id,
        raster_size,
        instances: s.instances.iter().filter(|v| !v.kind.is_closed()).cloned().collect(),
    }
}

/// Rasterizes the open structures of both scenes at the ground truth's
/// raster size and counts pixels within `tol_px` of the other side.
pub fn pixel_counts(pred: &Scene, gt: &Scene, tol_px: f64, stroke_px: usize) -> PixelCounts {
    let size = gt.raster_size;
    let p = rasterize(&open_only(pred, size), stroke_px).mask();
    let g = rasterize(&open_only(gt, size), stroke_px).mask();
    let s = size as usize;
    let dp = distance_transform(&p, s);
    let dg = distance_transform(&g, s);
    let mut c = PixelCounts::default();
    for i in 0..s * s {
        if p[i] {
            c.pred_pixels += 1;
            c.pred_hits += usize::from(dg[i] <= tol_px);
        }
        if g[i] {
            c.gt_pixels += 1;
            c.gt_hits += usize::from(dp[i] <= tol_px);
        }
    }
    c
}

pub fn pixel_prf(pred: &Scene, gt: &Scene, tol_px: f64, stroke_px: usize) -> Prf {
    pixel_counts(pred, gt, tol_px, stroke_px).prf()
}
