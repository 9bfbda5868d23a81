//! Structured query encoding: coarse-to-fine instance query selection,
//! geometric query initialization and the shape deformation module.

use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::model::{Config, Point};
use crate::nn::{inverse_sigmoid, sigmoid, FeedForward, Mat, Reduction, SelfAttentionBlock, Trace, LOGIT_LIMIT};
use crate::params::{EncoderWeights, Network};

/// Per-instance bundle of one instance query and `M` point queries.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredQuery {
    pub instance: Vec<f64>,
    /// `M × C`.
    pub geometric: Mat,
}

/// Top-K image tokens with their centres and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseTokens {
    /// `K × C`.
    pub tokens: Mat,
    pub locations: Vec<Point>,
    pub scores: Vec<f64>,
    /// Normalized cell size of each token's level.
    pub cell_sizes: Vec<f64>,
    /// Flat `(level, row, col)` index of each token.
    pub token_index: Vec<usize>,
}

/// Encoded instances ready for decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceState {
    pub queries: Vec<StructuredQuery>,
    /// Box logits `(cx, cy, w, h)` in inverse-sigmoid space; the first two
    /// are the instance reference point.
    pub box_logits: Vec<[f64; 4]>,
    /// Scores of the K coarse tokens, non-increasing.
    pub coarse_scores: Vec<f64>,
    /// Coarse positions of the N kept queries.
    pub selected: Vec<usize>,
}

impl InstanceState {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Instance reference points `R_ins`.
    pub fn reference_points(&self) -> Vec<Point> {
        self.box_logits
            .iter()
            .map(|b| Point::new(sigmoid(b[0]), sigmoid(b[1])))
            .collect()
    }

    pub fn instance_matrix(&self) -> Mat {
        let rows: Vec<Vec<f64>> = self.queries.iter().map(|q| q.instance.clone()).collect();
        Mat::from_rows(&rows)
    }

    /// Reorders instances so that new instance `i` is old instance `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> InstanceState {
        InstanceState {
            queries: perm.iter().map(|&i| self.queries[i].clone()).collect(),
            box_logits: perm.iter().map(|&i| self.box_logits[i]).collect(),
            coarse_scores: self.coarse_scores.clone(),
            selected: perm.iter().map(|&i| self.selected[i]).collect(),
        }
    }
}

/// Indices of the `k` largest scores in descending order; ties go to the
/// smaller index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn select_coarse_queries(f: &FeaturePyramid, weights: &EncoderWeights, k: usize) -> Result<CoarseTokens> {
    let available = f.token_count();
    if k > available {
        return Err(Error::TooManyQueries {
            requested: k,
            available,
        });
    }
    let c = f.channels();
    let mut all = Mat::zeros(available, c);
    let mut centers = Vec::with_capacity(available);
    let mut sizes = Vec::with_capacity(available);
    let mut t = 0;
    for level in &f.levels {
        for r in 0..level.height {
            for col in 0..level.width {
                all.row_mut(t).copy_from_slice(level.cell(r, col));
                centers.push(level.cell_center(r, col));
                sizes.push(1.0 / level.width as f64);
                t += 1;
            }
        }
    }
    let scores: Vec<f64> = (0..available)
        .map(|i| weights.token_scorer.forward_row(all.row(i))[0])
        .collect();
    let keep = top_k(&scores, k);
    Ok(CoarseTokens {
        tokens: all.select_rows(&keep),
        locations: keep.iter().map(|&i| centers[i]).collect(),
        scores: keep.iter().map(|&i| scores[i]).collect(),
        cell_sizes: keep.iter().map(|&i| sizes[i]).collect(),
        token_index: keep,
    })
}

/// Two refinement layers (self-attention, deformable cross-attention at the
/// token centres, feed-forward), then re-scoring and top-N selection.
/// Geometric queries are left empty; see [`init_geometric_queries`].
pub fn refine_instance_queries(
    coarse: &CoarseTokens,
    f: &FeaturePyramid,
    weights: &EncoderWeights,
    n: usize,
    trace: &mut Trace,
) -> InstanceState {
    let mut x = coarse.tokens.clone();
    for layer in &weights.refine {
        x = layer.self_attn.forward(&x, Reduction::Sequential, trace);
        for i in 0..x.rows {
            let (y, _) = layer.sampler.update(x.row(i), coarse.locations[i], f, trace);
            x.row_mut(i).copy_from_slice(&y);
        }
        x = layer.ffn.forward(&x);
    }
    let scores: Vec<f64> = (0..x.rows)
        .map(|i| weights.refine_scorer.forward_row(x.row(i))[0])
        .collect();
    let keep = top_k(&scores, n);
    let queries = keep
        .iter()
        .map(|&i| StructuredQuery {
            instance: x.row(i).to_vec(),
            geometric: Mat::zeros(0, x.cols),
        })
        .collect();
    let box_logits = keep
        .iter()
        .map(|&i| {
            let loc = coarse.locations[i];
            let size = inverse_sigmoid(coarse.cell_sizes[i]);
            let base = [inverse_sigmoid(loc.x), inverse_sigmoid(loc.y), size, size];
            let delta = weights.box_init.forward_row(x.row(i));
            let mut out = [0.0; 4];
            for k in 0..4 {
                out[k] = (base[k] + delta[k]).clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
            }
            out
        })
        .collect();
    InstanceState {
        queries,
        box_logits,
        coarse_scores: coarse.scores.clone(),
        selected: keep,
    }
}

/// `Q_geo^c[i, j] = Q_ins[i] + V[j]`.
pub fn init_geometric_queries(q_ins: &Mat, v: &Mat) -> Vec<Mat> {
    (0..q_ins.rows)
        .map(|i| {
            let mut g = Mat::zeros(v.rows, v.cols);
            for j in 0..v.rows {
                for (o, (a, b)) in g.row_mut(j).iter_mut().zip(q_ins.row(i).iter().zip(v.row(j))) {
                    *o = a + b;
                }
            }
            g
        })
        .collect()
}

/// Intra-instance self-attention over the M point queries of each instance,
/// then feed-forward. Instances never exchange information here.
pub fn shape_deformation(
    q_geo: &[Mat],
    attn: &SelfAttentionBlock,
    ffn: &FeedForward,
    trace: &mut Trace,
) -> Vec<Mat> {
    q_geo
        .iter()
        .map(|g| ffn.forward(&attn.forward(g, Reduction::Sequential, trace)))
        .collect()
}

/// Full encoding chain: coarse selection, refinement, geometric
/// initialization and shape deformation.
pub fn encode(f: &FeaturePyramid, net: &Network, cfg: &Config, trace: &mut Trace) -> Result<InstanceState> {
    let coarse = select_coarse_queries(f, &net.encoder, cfg.k_coarse)?;
    let mut state = refine_instance_queries(&coarse, f, &net.encoder, cfg.n_instances, trace);
    let q_ins = state.instance_matrix();
    let coarse_geo = init_geometric_queries(&q_ins, &net.encoder.point_embedding);
    let geo = shape_deformation(&coarse_geo, &net.encoder.shape_attn, &net.encoder.shape_ffn, trace);
    for (q, g) in state.queries.iter_mut().zip(geo) {
        q.geometric = g;
    }
    Ok(state)
}
