//! Small dense building blocks for the forward pass: row-major matrices,
//! linear layers, pre-norm attention and feed-forward blocks.
//!
//! Every block is residual with pre-normalization, so an all-zero parameter
//! set turns each block into the identity.

/// Clamp used by [`inverse_sigmoid`].
pub const SIGMOID_EPS: f64 = 1e-6;

/// Logits are kept within this bound so that `sigmoid` never rounds to 0 or 1.
pub const LOGIT_LIMIT: f64 = 30.0;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(SIGMOID_EPS, 1.0 - SIGMOID_EPS);
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data does not match shape");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Mat::from_vec(idx.len(), self.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with four interleaved partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            s[k] += x[k] * y[k];
        }
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// How attention sums over keys. `OrderFree` sorts the terms before adding,
/// so permuting the keys leaves the result bit-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sequential,
    OrderFree,
}

pub(crate) fn reduce(terms: &mut [f64], mode: Reduction) -> f64 {
    if mode == Reduction::OrderFree {
        terms.sort_unstable_by(f64::total_cmp);
    }
    terms.iter().sum()
}

/// Softmax bookkeeping collected during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub softmax_rows: usize,
    pub max_row_error: f64,
    /// Smallest and largest reference coordinate seen.
    pub ref_min: f64,
    pub ref_max: f64,
}

impl Trace {
    pub fn new() -> Self {
        Trace {
            softmax_rows: 0,
            max_row_error: 0.0,
            ref_min: f64::INFINITY,
            ref_max: f64::NEG_INFINITY,
        }
    }

    pub fn record_row(&mut self, weights: &[f64]) {
        let s: f64 = weights.iter().sum();
        self.softmax_rows += 1;
        self.max_row_error = self.max_row_error.max((s - 1.0).abs());
    }

    pub fn record_ref(&mut self, v: f64) {
        self.ref_min = self.ref_min.min(v);
        self.ref_max = self.ref_max.max(v);
    }

    pub fn merge(&mut self, other: &Trace) {
        self.softmax_rows += other.softmax_rows;
        self.max_row_error = self.max_row_error.max(other.max_row_error);
        self.ref_min = self.ref_min.min(other.ref_min);
        self.ref_max = self.ref_max.max(other.ref_max);
    }
}

pub fn softmax_in_place(x: &mut [f64], mode: Reduction) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in x.iter_mut() {
        *v = (*v - max).exp();
    }
    let mut terms = x.to_vec();
    let denom = reduce(&mut terms, mode);
    for v in x.iter_mut() {
        *v /= denom;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`.
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim());
        (0..self.out_dim())
            .map(|o| self.bias[o] + dot(self.weight.row(o), x))
            .collect()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows, self.out_dim());
        for r in 0..x.rows {
            let y = self.forward_row(x.row(r));
            out.row_mut(r).copy_from_slice(&y);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + Self::EPS).sqrt();
        x.iter()
            .zip(self.gamma.iter().zip(&self.beta))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let y = self.forward_row(x.row(r));
            out.row_mut(r).copy_from_slice(&y);
        }
        out
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.fc1.forward_row(x);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        self.fc2.forward_row(&h)
    }
}

/// Pre-norm residual feed-forward block: `x + fc2(relu(fc1(norm(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let y = self.mlp.forward_row(&self.norm.forward_row(x));
        x.iter().zip(&y).map(|(a, b)| a + b).collect()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let y = self.forward_row(x.row(r));
            out.row_mut(r).copy_from_slice(&y);
        }
        out
    }
}

/// Multi-head scaled dot-product attention (no residual).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn attend(&self, queries: &Mat, keys: &Mat, mode: Reduction, trace: &mut Trace) -> Mat {
        let c = self.q.out_dim();
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(queries);
        let k = self.k.forward(keys);
        let v = self.v.forward(keys);
        let mut mixed = Mat::zeros(queries.rows, c);
        let mut weights = vec![0.0; keys.rows];
        let mut terms = vec![0.0; keys.rows];
        for i in 0..queries.rows {
            let qi = q.row(i);
            for h in 0..self.heads {
                let span = h * dh..(h + 1) * dh;
                for (j, w) in weights.iter_mut().enumerate() {
                    let kj = &k.row(j)[span.clone()];
                    *w = qi[span.clone()].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut weights, mode);
                trace.record_row(&weights);
                match mode {
                    Reduction::Sequential => {
                        let out = &mut mixed.row_mut(i)[span.clone()];
                        for (j, &w) in weights.iter().enumerate() {
                            for (o, x) in out.iter_mut().zip(&v.row(j)[span.clone()]) {
                                *o += w * x;
                            }
                        }
                    }
                    Reduction::OrderFree => {
                        for ch in span {
                            for (j, t) in terms.iter_mut().enumerate() {
                                *t = weights[j] * v.row(j)[ch];
                            }
                            mixed.row_mut(i)[ch] = reduce(&mut terms, mode);
                        }
                    }
                }
            }
        }
        self.out.forward(&mixed)
    }
}

/// `x + attn(norm(x), norm(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl SelfAttentionBlock {
    pub fn forward(&self, x: &Mat, mode: Reduction, trace: &mut Trace) -> Mat {
        let n = self.norm.forward(x);
        x.add(&self.attn.attend(&n, &n, mode, trace))
    }
}

/// `q + attn(norm_q(q), norm_kv(kv))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossAttentionBlock {
    pub fn forward(&self, q: &Mat, kv: &Mat, mode: Reduction, trace: &mut Trace) -> Mat {
        let nq = self.norm_q.forward(q);
        let nkv = self.norm_kv.forward(kv);
        q.add(&self.attn.attend(&nq, &nkv, mode, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(out: usize, inp: usize, f: impl Fn(usize, usize) -> f64) -> Linear {
        let mut w = Mat::zeros(out, inp);
        for o in 0..out {
            for i in 0..inp {
                w.row_mut(o)[i] = f(o, i);
            }
        }
        Linear {
            weight: w,
            bias: vec![0.0; out],
        }
    }

    #[test]
    fn sigmoid_round_trip() {
        for p in [0.3, 0.01, 0.5, 0.999] {
            assert!((sigmoid(inverse_sigmoid(p)) - p).abs() < 1e-9);
        }
        let top = sigmoid(inverse_sigmoid(1.0));
        assert!((top - (1.0 - SIGMOID_EPS)).abs() < 1e-12 && top.is_finite());
        assert!(sigmoid(LOGIT_LIMIT) < 1.0);
        assert!(sigmoid(-LOGIT_LIMIT) > 0.0);
    }

    #[test]
    fn softmax_equal_logits() {
        let mut w = vec![0.7; 4];
        softmax_in_place(&mut w, Reduction::Sequential);
        assert!(w.iter().all(|v| *v == 0.25));
    }

    #[test]
    fn order_free_sum_ignores_permutation() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 1e-3];
        let mut b = vec![3.5, -1e16, 1e-3, 1.0, 1e16];
        assert_eq!(
            reduce(&mut a, Reduction::OrderFree).to_bits(),
            reduce(&mut b, Reduction::OrderFree).to_bits()
        );
    }

    #[test]
    fn single_key_attention_weight_is_one() {
        let c = 4;
        let attn = MultiHeadAttention {
            heads: 2,
            q: lin(c, c, |o, i| (o + 2 * i) as f64 * 0.1),
            k: lin(c, c, |o, i| (o * i) as f64 * 0.2 - 0.3),
            v: lin(c, c, |o, i| if o == i { 1.0 } else { 0.0 }),
            out: lin(c, c, |o, i| if o == i { 1.0 } else { 0.0 }),
        };
        let q = Mat::from_rows(&[vec![0.3, -1.0, 2.0, 0.5], vec![1.0, 1.0, 1.0, 1.0]]);
        let kv = Mat::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]);
        let mut trace = Trace::new();
        let y = attn.attend(&q, &kv, Reduction::Sequential, &mut trace);
        for r in 0..2 {
            assert_eq!(y.row(r), kv.row(0));
        }
        assert_eq!(trace.softmax_rows, 4);
        assert_eq!(trace.max_row_error, 0.0);
    }

    #[test]
    fn zero_weights_make_blocks_identity() {
        let c = 4;
        let zero = |o, i| lin(o, i, |_, _| 0.0);
        let ln = LayerNorm { gamma: vec![0.0; c], beta: vec![0.0; c] };
        let block = SelfAttentionBlock {
            norm: ln.clone(),
            attn: MultiHeadAttention { heads: 2, q: zero(c, c), k: zero(c, c), v: zero(c, c), out: zero(c, c) },
        };
        let ff = FeedForward { norm: ln, mlp: Mlp { fc1: zero(8, c), fc2: zero(c, 8) } };
        let x = Mat::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 9.0]]);
        let y = block.forward(&x, Reduction::OrderFree, &mut Trace::new());
        assert_eq!(ff.forward(&y), x);
    }
}
