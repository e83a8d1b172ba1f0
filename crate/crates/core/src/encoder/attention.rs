use ndarray::{s, Array2, ArrayView2, Axis};

use super::layer::Dropout;
use super::params::AttentionWeights;
use crate::real::Real;

/// Activations kept from an attention forward pass for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache<F> {
    input: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Softmax output per head, before dropout.
    pub(crate) probs: Vec<Array2<F>>,
    /// Per-head dropout multipliers (0 or `1/(1-rate)`).
    keep: Option<Vec<Array2<F>>>,
    /// Concatenated head outputs, before the output projection.
    context: Array2<F>,
    heads: usize,
}

/// In-place row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<F: Real>(scores: &mut Array2<F>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: F = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product attention.
///
/// Per head: `softmax((Q_h K_h^T + mask) / sqrt(d_k)) V_h`; heads are
/// concatenated and projected by `W_O`.
pub(crate) fn attention_forward<F: Real>(
    x: &Array2<F>,
    w: &AttentionWeights<F>,
    mask: Option<ArrayView2<'_, F>>,
    heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Array2<F>, AttentionCache<F>) {
    let (n, d) = x.dim();
    let dk = d / heads;
    let scale = F::one() / F::lit(dk as f64).sqrt();

    let q = x.dot(&w.query);
    let k = x.dot(&w.key);
    let v = x.dot(&w.value);

    let mut context = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    let mut keep = dropout.is_some().then(Vec::new);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        if let Some(m) = &mask {
            scores += m;
        }
        scores.mapv_inplace(|v| v * scale);
        softmax_rows(&mut scores);

        let head_out = match dropout.as_deref_mut() {
            Some(drop) => {
                let multiplier = drop.multipliers::<F>((n, n));
                let out = (&scores * &multiplier).dot(&v.slice(cols));
                keep.as_mut().expect("dropout active").push(multiplier);
                out
            }
            None => scores.dot(&v.slice(cols)),
        };
        context.slice_mut(cols).assign(&head_out);
        probs.push(scores);
    }

    let out = context.dot(&w.output);
    let cache = AttentionCache {
        input: x.clone(),
        q,
        k,
        v,
        probs,
        keep,
        context,
        heads,
    };
    (out, cache)
}

/// Accumulates parameter gradients into `grads` and returns `dL/dx`.
pub(crate) fn attention_backward<F: Real>(
    d_out: &Array2<F>,
    cache: &AttentionCache<F>,
    w: &AttentionWeights<F>,
    grads: &mut AttentionWeights<F>,
) -> Array2<F> {
    let (n, d) = cache.input.dim();
    let heads = cache.heads;
    let dk = d / heads;
    let scale = F::one() / F::lit(dk as f64).sqrt();

    grads.output += &cache.context.t().dot(d_out);
    let d_context = d_out.dot(&w.output.t());

    let mut dq = Array2::zeros((n, d));
    let mut dk_all = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let p = &cache.probs[h];
        let d_ctx = d_context.slice(cols);

        let (applied, mut d_p) = match &cache.keep {
            Some(keep) => {
                let applied = p * &keep[h];
                let d_applied = d_ctx.dot(&cache.v.slice(cols).t());
                (applied, d_applied * &keep[h])
            }
            None => (p.clone(), d_ctx.dot(&cache.v.slice(cols).t())),
        };
        dv.slice_mut(cols).assign(&applied.t().dot(&d_ctx));

        // softmax backward: dS = P * (dP - rowsum(dP * P)), then the 1/sqrt(d_k) factor
        let row_dot = (&d_p * p).sum_axis(Axis(1));
        for ((mut dp_row, p_row), &r) in d_p
            .axis_iter_mut(Axis(0))
            .zip(p.axis_iter(Axis(0)))
            .zip(row_dot.iter())
        {
            dp_row.zip_mut_with(&p_row, |g, &pv| *g = pv * (*g - r) * scale);
        }
        dq.slice_mut(cols).assign(&d_p.dot(&cache.k.slice(cols)));
        dk_all
            .slice_mut(cols)
            .assign(&d_p.t().dot(&cache.q.slice(cols)));
    }

    let xt = cache.input.t();
    grads.query += &xt.dot(&dq);
    grads.key += &xt.dot(&dk_all);
    grads.value += &xt.dot(&dv);

    dq.dot(&w.query.t()) + dk_all.dot(&w.key.t()) + dv.dot(&w.value.t())
}
