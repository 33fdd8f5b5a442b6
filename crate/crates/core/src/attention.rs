//! Attention pooling of a modality's unit sequence into one vector.
//!
//! Each unit row `x` is mapped to `h = tanh(W x + b)`, scored against a context
//! vector `u`, and the softmax-normalised scores weight a sum of the hidden rows.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Parameters of one modality's attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `hidden x input`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// Context vector.
    pub u: Array1<f64>,
}

impl AttentionParams {
    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.len()),
            u: Array1::zeros(self.u.len()),
        }
    }
}

/// Uniform init in `±sqrt(6 / (input + hidden))` for `W` and `u`; zero bias.
pub fn init_attention(rng: &mut impl Rng, input: usize, hidden: usize) -> AttentionParams {
    let bound = rng::glorot_bound(input, hidden);
    AttentionParams {
        w: rng::uniform_matrix(rng, hidden, input, bound),
        b: Array1::zeros(hidden),
        u: rng::uniform_vector(rng, hidden, bound),
    }
}

/// A pooled modality vector together with the unit weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityVector {
    pub values: Array1<f64>,
    pub weights: Array1<f64>,
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Pools one unit matrix (`units x input`).
pub fn attend(units: ArrayView2<f64>, params: &AttentionParams) -> Result<ModalityVector> {
    let stack = UnitStack::from_views([units])?;
    let cache = forward(&stack, params)?;
    Ok(ModalityVector {
        values: cache.pooled.row(0).to_owned(),
        weights: cache.alpha.clone(),
    })
}

/// Unit rows of many posts stacked into one matrix so the projection is a single
/// matrix product.
#[derive(Debug, Clone)]
pub struct UnitStack {
    pub units: Array2<f64>,
    /// `offsets[i]..offsets[i + 1]` are the rows of post `i`.
    pub offsets: Vec<usize>,
}

impl UnitStack {
    pub fn from_views<'a>(views: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<Self> {
        let views: Vec<_> = views.into_iter().collect();
        let cols = views.first().map(|v| v.ncols()).unwrap_or(0);
        let mut offsets = vec![0];
        for v in &views {
            if v.nrows() == 0 {
                return Err(Error::EmptyModality);
            }
            if v.ncols() != cols {
                return Err(Error::Dimension(format!(
                    "unit width {} != {cols}",
                    v.ncols()
                )));
            }
            offsets.push(offsets.last().unwrap() + v.nrows());
        }
        let mut units = Array2::zeros((*offsets.last().unwrap(), cols));
        for (i, v) in views.iter().enumerate() {
            units
                .slice_mut(s![offsets[i]..offsets[i + 1], ..])
                .assign(v);
        }
        Ok(Self { units, offsets })
    }

    /// Promotes `f32` unit matrices.
    pub fn from_f32<'a>(mats: impl IntoIterator<Item = &'a Array2<f32>>) -> Result<Self> {
        let promoted: Vec<Array2<f64>> = mats.into_iter().map(|m| m.mapv(f64::from)).collect();
        Self::from_views(promoted.iter().map(|m| m.view()))
    }

    pub fn posts(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn width(&self) -> usize {
        self.units.ncols()
    }

    /// Plain average of each post's unit rows (the pooling used without attention).
    pub fn mean_pool(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.posts(), self.width()));
        for i in 0..self.posts() {
            let rows = self.units.slice(s![self.offsets[i]..self.offsets[i + 1], ..]);
            out.row_mut(i)
                .assign(&rows.mean_axis(Axis(0)).expect("non-empty segment"));
        }
        out
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// Hidden rows `tanh(W x + b)`, stacked like the units.
    pub hidden: Array2<f64>,
    /// Per-row weights; each post's segment sums to one.
    pub alpha: Array1<f64>,
    /// `posts x hidden`.
    pub pooled: Array2<f64>,
}

pub fn forward(stack: &UnitStack, params: &AttentionParams) -> Result<AttentionCache> {
    if stack.width() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "units have width {}, attention expects {}",
            stack.width(),
            params.input_dim()
        )));
    }
    let mut hidden = stack.units.dot(&params.w.t());
    hidden += &params.b;
    hidden.mapv_inplace(f64::tanh);
    let scores = hidden.dot(&params.u);
    let mut alpha = Array1::zeros(scores.len());
    let mut pooled = Array2::zeros((stack.posts(), params.hidden_dim()));
    for i in 0..stack.posts() {
        let (lo, hi) = (stack.offsets[i], stack.offsets[i + 1]);
        let weights = softmax(scores.slice(s![lo..hi]).as_slice().expect("contiguous"));
        let mut out = pooled.row_mut(i);
        for (k, a) in weights.into_iter().enumerate() {
            alpha[lo + k] = a;
            out.scaled_add(a, &hidden.row(lo + k));
        }
    }
    Ok(AttentionCache {
        hidden,
        alpha,
        pooled,
    })
}

/// Accumulates parameter gradients given `d loss / d pooled` (`posts x hidden`).
pub fn backward(
    stack: &UnitStack,
    params: &AttentionParams,
    cache: &AttentionCache,
    d_pooled: &Array2<f64>,
    grads: &mut AttentionParams,
) {
    let hidden = &cache.hidden;
    let mut d_hidden = Array2::<f64>::zeros(hidden.raw_dim());
    let mut d_score = Array1::<f64>::zeros(hidden.nrows());
    for i in 0..stack.posts() {
        let (lo, hi) = (stack.offsets[i], stack.offsets[i + 1]);
        let g = d_pooled.row(i);
        // d pooled / d alpha_x = h_x
        let d_alpha: Vec<f64> = (lo..hi).map(|x| hidden.row(x).dot(&g)).collect();
        let mean: f64 = (lo..hi).zip(&d_alpha).map(|(x, d)| cache.alpha[x] * d).sum();
        for (k, x) in (lo..hi).enumerate() {
            let a = cache.alpha[x];
            d_hidden.row_mut(x).scaled_add(a, &g);
            d_score[x] = a * (d_alpha[k] - mean);
        }
    }
    // score_x = h_x . u
    grads.u += &hidden.t().dot(&d_score);
    for (mut row, &ds) in d_hidden.rows_mut().into_iter().zip(d_score.iter()) {
        row.scaled_add(ds, &params.u);
    }
    // tanh'
    let d_pre = d_hidden * hidden.mapv(|h| 1.0 - h * h);
    grads.w += &d_pre.t().dot(&stack.units);
    grads.b += &d_pre.sum_axis(Axis(0));
}
