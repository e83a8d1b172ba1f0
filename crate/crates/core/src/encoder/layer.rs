use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{attention_backward, attention_forward, AttentionCache};
use super::params::{FeedForwardWeights, LayerNormWeights, LayerWeights};
use crate::config::{ModelConfig, NormPlacement};
use crate::real::Real;

/// Inverted dropout driven by a caller-owned generator.
pub(crate) struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub rate: f64,
}

impl Dropout<'_> {
    /// Entries are 0 with probability `rate`, otherwise `1 / (1 - rate)`.
    pub(crate) fn multipliers<F: Real>(&mut self, shape: (usize, usize)) -> Array2<F> {
        let kept = F::lit(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        Array2::from_shape_simple_fn(shape, || {
            if self.rng.gen::<f64>() < rate {
                F::zero()
            } else {
                kept
            }
        })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<F: Real>(z: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(GELU_K);
    let half = F::lit(0.5);
    half * z * (F::one() + (c * (z + k * z * z * z)).tanh())
}

pub(crate) fn gelu_grad<F: Real>(z: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(GELU_K);
    let half = F::lit(0.5);
    let t = (c * (z + k * z * z * z)).tanh();
    half * (F::one() + t) + half * z * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * z * z)
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<F> {
    normalized: Array2<F>,
    inv_std: Array1<F>,
}

pub(crate) fn layer_norm_forward<F: Real>(
    x: &Array2<F>,
    w: &LayerNormWeights<F>,
    eps: f64,
) -> (Array2<F>, NormCache<F>) {
    let (n, d) = x.dim();
    let inv_d = F::lit(1.0 / d as f64);
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(n);
    for (mut row, s) in normalized.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() * inv_d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() * inv_d;
        *s = F::one() / (var + F::lit(eps)).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &normalized * &w.scale + &w.shift;
    (
        y,
        NormCache {
            normalized,
            inv_std,
        },
    )
}

pub(crate) fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &NormCache<F>,
    w: &LayerNormWeights<F>,
    grads: &mut LayerNormWeights<F>,
) -> Array2<F> {
    let d = dy.ncols();
    let inv_d = F::lit(1.0 / d as f64);
    grads.scale += &(dy * &cache.normalized).sum_axis(Axis(0));
    grads.shift += &dy.sum_axis(Axis(0));

    let mut dx = dy * &w.scale;
    for ((mut row, xhat), &inv) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.normalized.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let mean_g = row.sum() * inv_d;
        let mean_gx = row.iter().zip(xhat.iter()).map(|(&g, &x)| g * x).sum::<F>() * inv_d;
        row.zip_mut_with(&xhat, |g, &x| *g = inv * (*g - mean_g - x * mean_gx));
    }
    dx
}

#[derive(Debug, Clone)]
pub(crate) struct FfnCache<F> {
    input: Array2<F>,
    pre: Array2<F>,
    /// Activation after dropout, i.e. what feeds `w_out`.
    hidden: Array2<F>,
    keep: Option<Array2<F>>,
}

pub(crate) fn ffn_forward<F: Real>(
    x: &Array2<F>,
    w: &FeedForwardWeights<F>,
    dropout: Option<&mut Dropout<'_>>,
) -> (Array2<F>, FfnCache<F>) {
    let pre = x.dot(&w.w_in) + &w.b_in;
    let mut hidden = pre.mapv(gelu);
    let keep = dropout.map(|drop| {
        let m = drop.multipliers::<F>(hidden.dim());
        hidden *= &m;
        m
    });
    let out = hidden.dot(&w.w_out) + &w.b_out;
    let cache = FfnCache {
        input: x.clone(),
        pre,
        hidden,
        keep,
    };
    (out, cache)
}

pub(crate) fn ffn_backward<F: Real>(
    d_out: &Array2<F>,
    cache: &FfnCache<F>,
    w: &FeedForwardWeights<F>,
    grads: &mut FeedForwardWeights<F>,
) -> Array2<F> {
    grads.w_out += &cache.hidden.t().dot(d_out);
    grads.b_out += &d_out.sum_axis(Axis(0));
    let mut d_pre = d_out.dot(&w.w_out.t());
    if let Some(keep) = &cache.keep {
        d_pre *= keep;
    }
    Zip::from(&mut d_pre)
        .and(&cache.pre)
        .for_each(|g, &z| *g *= gelu_grad(z));
    grads.w_in += &cache.input.t().dot(&d_pre);
    grads.b_in += &d_pre.sum_axis(Axis(0));
    d_pre.dot(&w.w_in.t())
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<F> {
    pub(crate) shared: AttentionCache<F>,
    pub(crate) dedicated: Option<AttentionCache<F>>,
    norm_attn: NormCache<F>,
    ffn: FfnCache<F>,
    norm_ffn: NormCache<F>,
}

fn hybrid_attention<F: Real>(
    x: &Array2<F>,
    mask: ArrayView2<'_, F>,
    lw: &LayerWeights<F>,
    config: &ModelConfig,
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Array2<F>, AttentionCache<F>, Option<AttentionCache<F>>) {
    let (mut out, shared) =
        attention_forward(x, &lw.shared, None, config.heads, dropout.as_deref_mut());
    let dedicated = config.hybrid.then(|| {
        let (ded, cache) = attention_forward(x, &lw.dedicated, Some(mask), config.heads, dropout);
        out += &ded;
        cache
    });
    (out, shared, dedicated)
}

/// One hybrid encoder layer: shared plus document-masked attention, summed,
/// then a feed-forward block, each wrapped in a residual and layer norm.
pub(crate) fn layer_forward<F: Real>(
    x: &Array2<F>,
    mask: ArrayView2<'_, F>,
    lw: &LayerWeights<F>,
    config: &ModelConfig,
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Array2<F>, LayerCache<F>) {
    let eps = config.ln_eps;
    match config.norm {
        NormPlacement::Post => {
            let (attn, shared, dedicated) =
                hybrid_attention(x, mask, lw, config, dropout.as_deref_mut());
            let (h1, norm_attn) = layer_norm_forward(&(x + &attn), &lw.norm_attn, eps);
            let (f, ffn) = ffn_forward(&h1, &lw.ffn, dropout);
            let (y, norm_ffn) = layer_norm_forward(&(h1 + &f), &lw.norm_ffn, eps);
            let cache = LayerCache {
                shared,
                dedicated,
                norm_attn,
                ffn,
                norm_ffn,
            };
            (y, cache)
        }
        NormPlacement::Pre => {
            let (l1, norm_attn) = layer_norm_forward(x, &lw.norm_attn, eps);
            let (attn, shared, dedicated) =
                hybrid_attention(&l1, mask, lw, config, dropout.as_deref_mut());
            let x1 = x + &attn;
            let (l2, norm_ffn) = layer_norm_forward(&x1, &lw.norm_ffn, eps);
            let (f, ffn) = ffn_forward(&l2, &lw.ffn, dropout);
            let cache = LayerCache {
                shared,
                dedicated,
                norm_attn,
                ffn,
                norm_ffn,
            };
            (x1 + &f, cache)
        }
    }
}

fn hybrid_attention_backward<F: Real>(
    d_attn: &Array2<F>,
    cache: &LayerCache<F>,
    lw: &LayerWeights<F>,
    grads: &mut LayerWeights<F>,
) -> Array2<F> {
    let mut dx = attention_backward(d_attn, &cache.shared, &lw.shared, &mut grads.shared);
    if let Some(ded) = &cache.dedicated {
        dx += &attention_backward(d_attn, ded, &lw.dedicated, &mut grads.dedicated);
    }
    dx
}

pub(crate) fn layer_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LayerCache<F>,
    lw: &LayerWeights<F>,
    config: &ModelConfig,
    grads: &mut LayerWeights<F>,
) -> Array2<F> {
    match config.norm {
        NormPlacement::Post => {
            let d_r2 = layer_norm_backward(dy, &cache.norm_ffn, &lw.norm_ffn, &mut grads.norm_ffn);
            let d_h1 = ffn_backward(&d_r2, &cache.ffn, &lw.ffn, &mut grads.ffn) + &d_r2;
            let d_r1 =
                layer_norm_backward(&d_h1, &cache.norm_attn, &lw.norm_attn, &mut grads.norm_attn);
            hybrid_attention_backward(&d_r1, cache, lw, grads) + &d_r1
        }
        NormPlacement::Pre => {
            let d_l2 = ffn_backward(dy, &cache.ffn, &lw.ffn, &mut grads.ffn);
            let d_x1 =
                layer_norm_backward(&d_l2, &cache.norm_ffn, &lw.norm_ffn, &mut grads.norm_ffn) + dy;
            let d_l1 = hybrid_attention_backward(&d_x1, cache, lw, grads);
            layer_norm_backward(&d_l1, &cache.norm_attn, &lw.norm_attn, &mut grads.norm_attn)
                + &d_x1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &z in &[-4.0f64, -1.3, -0.2, 0.0, 0.4, 1.7, 3.5] {
            let h = 1e-6;
            let numeric = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
            assert!((numeric - gelu_grad(z)).abs() < 1e-8, "z = {z}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Array2::from_shape_vec((2, 4), vec![1.0f64, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0])
            .unwrap();
        let (y, _) = layer_norm_forward(&x, &LayerNormWeights::identity(4), 1e-12);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.mapv(|v: f64| v * v).sum() / 4.0 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_multipliers_are_binary_and_scaled() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dropout {
            rng: &mut rng,
            rate: 0.25,
        };
        let m: Array2<f64> = d.multipliers((50, 40));
        let scaled = 1.0 / 0.75;
        assert!(m.iter().all(|&v| v == 0.0 || v == scaled));
        let dropped = m.iter().filter(|&&v| v == 0.0).count() as f64 / 2000.0;
        assert!((dropped - 0.25).abs() < 0.05, "{dropped}");
    }
}
