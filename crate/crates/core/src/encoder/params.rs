use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::real::Real;

/// Standard deviation of the initial document-slot embeddings.
pub const DOC_TABLE_INIT_STD: f64 = 0.02;

/// Projections of one multi-head attention module, stored `d_in x d_out`
/// (`x W` convention).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<F> {
    pub query: Array2<F>,
    pub key: Array2<F>,
    pub value: Array2<F>,
    pub output: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardWeights<F> {
    pub w_in: Array2<F>,
    pub b_in: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights<F> {
    pub scale: Array1<F>,
    pub shift: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F> {
    /// Full attention over the query and every passage.
    pub shared: AttentionWeights<F>,
    /// Attention restricted to same-document passages plus the query.
    pub dedicated: AttentionWeights<F>,
    pub ffn: FeedForwardWeights<F>,
    /// Normalization around the attention sublayer.
    pub norm_attn: LayerNormWeights<F>,
    /// Normalization around the feed-forward sublayer.
    pub norm_ffn: LayerNormWeights<F>,
}

/// Every learned tensor of the model. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// `k_max x d`; row i embeds the i-th distinct document of a candidate set.
    pub doc_table: Array2<F>,
    pub layers: Vec<LayerWeights<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<F> {
    pub config: ModelConfig,
    pub params: Params<F>,
}

/// Normal sample rounded to f32 precision.
fn sample<R: rand::Rng>(rng: &mut R, normal: &Normal<f64>) -> f64 {
    normal.sample(rng) as f32 as f64
}

fn normal_matrix<F: Real, R: rand::Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<F> {
    let normal = Normal::new(0.0, std).expect("std is positive");
    Array2::from_shape_simple_fn((rows, cols), || F::lit(sample(rng, &normal)))
}

impl<F: Real> AttentionWeights<F> {
    fn init<R: rand::Rng>(rng: &mut R, dim: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            query: normal_matrix(rng, dim, dim, std),
            key: normal_matrix(rng, dim, dim, std),
            value: normal_matrix(rng, dim, dim, std),
            output: normal_matrix(rng, dim, dim, std),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            query: Array2::zeros((dim, dim)),
            key: Array2::zeros((dim, dim)),
            value: Array2::zeros((dim, dim)),
            output: Array2::zeros((dim, dim)),
        }
    }
}

impl<F: Real> LayerNormWeights<F> {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }
}

impl<F: Real> LayerWeights<F> {
    fn init<R: rand::Rng>(rng: &mut R, config: &ModelConfig) -> Self {
        let (d, h) = (config.dim, config.ffn_dim);
        Self {
            shared: AttentionWeights::init(rng, d),
            dedicated: AttentionWeights::init(rng, d),
            ffn: FeedForwardWeights {
                w_in: normal_matrix(rng, d, h, 1.0 / (d as f64).sqrt()),
                b_in: Array1::zeros(h),
                w_out: normal_matrix(rng, h, d, 1.0 / (h as f64).sqrt()),
                b_out: Array1::zeros(d),
            },
            norm_attn: LayerNormWeights::identity(d),
            norm_ffn: LayerNormWeights::identity(d),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, h) = (config.dim, config.ffn_dim);
        let zero_norm = || LayerNormWeights {
            scale: Array1::zeros(d),
            shift: Array1::zeros(d),
        };
        Self {
            shared: AttentionWeights::zeros(d),
            dedicated: AttentionWeights::zeros(d),
            ffn: FeedForwardWeights {
                w_in: Array2::zeros((d, h)),
                b_in: Array1::zeros(h),
                w_out: Array2::zeros((h, d)),
                b_out: Array1::zeros(d),
            },
            norm_attn: zero_norm(),
            norm_ffn: zero_norm(),
        }
    }
}

impl<F: Real> Params<F> {
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let doc_table = normal_matrix(&mut rng, config.k_max, config.dim, DOC_TABLE_INIT_STD);
        let layers = (0..config.layers)
            .map(|_| LayerWeights::init(&mut rng, config))
            .collect();
        Self { doc_table, layers }
    }

    /// Same shapes as `config`, all zeros.
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            doc_table: Array2::zeros((config.k_max, config.dim)),
            layers: (0..config.layers)
                .map(|_| LayerWeights::zeros(config))
                .collect(),
        }
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![("doc_table".to_string(), self.doc_table.view().into_dyn())];
        for (i, l) in self.layers.iter().enumerate() {
            for (module, a) in [("shared", &l.shared), ("dedicated", &l.dedicated)] {
                for (name, m) in [
                    ("query", &a.query),
                    ("key", &a.key),
                    ("value", &a.value),
                    ("output", &a.output),
                ] {
                    out.push((format!("layers.{i}.{module}.{name}"), m.view().into_dyn()));
                }
            }
            out.push((format!("layers.{i}.ffn.w_in"), l.ffn.w_in.view().into_dyn()));
            out.push((format!("layers.{i}.ffn.b_in"), l.ffn.b_in.view().into_dyn()));
            out.push((
                format!("layers.{i}.ffn.w_out"),
                l.ffn.w_out.view().into_dyn(),
            ));
            out.push((
                format!("layers.{i}.ffn.b_out"),
                l.ffn.b_out.view().into_dyn(),
            ));
            for (norm, n) in [("norm_attn", &l.norm_attn), ("norm_ffn", &l.norm_ffn)] {
                out.push((
                    format!("layers.{i}.{norm}.scale"),
                    n.scale.view().into_dyn(),
                ));
                out.push((
                    format!("layers.{i}.{norm}.shift"),
                    n.shift.view().into_dyn(),
                ));
            }
        }
        out
    }

    /// Mutable counterpart of [`Params::tensors`], same order and names.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = vec![(
            "doc_table".to_string(),
            self.doc_table.view_mut().into_dyn(),
        )];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (module, a) in [("shared", &mut l.shared), ("dedicated", &mut l.dedicated)] {
                for (name, m) in [
                    ("query", &mut a.query),
                    ("key", &mut a.key),
                    ("value", &mut a.value),
                    ("output", &mut a.output),
                ] {
                    out.push((
                        format!("layers.{i}.{module}.{name}"),
                        m.view_mut().into_dyn(),
                    ));
                }
            }
            let ffn = &mut l.ffn;
            out.push((
                format!("layers.{i}.ffn.w_in"),
                ffn.w_in.view_mut().into_dyn(),
            ));
            out.push((
                format!("layers.{i}.ffn.b_in"),
                ffn.b_in.view_mut().into_dyn(),
            ));
            out.push((
                format!("layers.{i}.ffn.w_out"),
                ffn.w_out.view_mut().into_dyn(),
            ));
            out.push((
                format!("layers.{i}.ffn.b_out"),
                ffn.b_out.view_mut().into_dyn(),
            ));
            for (norm, n) in [
                ("norm_attn", &mut l.norm_attn),
                ("norm_ffn", &mut l.norm_ffn),
            ] {
                out.push((
                    format!("layers.{i}.{norm}.scale"),
                    n.scale.view_mut().into_dyn(),
                ));
                out.push((
                    format!("layers.{i}.{norm}.shift"),
                    n.shift.view_mut().into_dyn(),
                ));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let mat = |m: &Array2<F>| m.mapv(|v| G::lit(v.as_f64()));
        let vec = |v: &Array1<F>| v.mapv(|x| G::lit(x.as_f64()));
        let attn = |a: &AttentionWeights<F>| AttentionWeights {
            query: mat(&a.query),
            key: mat(&a.key),
            value: mat(&a.value),
            output: mat(&a.output),
        };
        let norm = |n: &LayerNormWeights<F>| LayerNormWeights {
            scale: vec(&n.scale),
            shift: vec(&n.shift),
        };
        Params {
            doc_table: mat(&self.doc_table),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    shared: attn(&l.shared),
                    dedicated: attn(&l.dedicated),
                    ffn: FeedForwardWeights {
                        w_in: mat(&l.ffn.w_in),
                        b_in: vec(&l.ffn.b_in),
                        w_out: mat(&l.ffn.w_out),
                        b_out: vec(&l.ffn.b_out),
                    },
                    norm_attn: norm(&l.norm_attn),
                    norm_ffn: norm(&l.norm_ffn),
                })
                .collect(),
        }
    }

    /// `self += other * factor`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params<F>, factor: F) {
        for ((_, mut dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            Zip::from(&mut dst)
                .and(&src)
                .for_each(|d, &s| *d += s * factor);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Rounds every entry to the nearest f32 value.
    pub fn round_to_f32(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| F::lit(v.as_f64() as f32 as f64));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = Params::<F>::zeros(config);
        if reference.layers.len() != self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "config expects {} layers, weights have {}",
                reference.layers.len(),
                self.layers.len()
            )));
        }
        for ((name, expected), (_, found)) in reference.tensors().iter().zip(self.tensors()) {
            if expected.shape() != found.shape() {
                return Err(Error::InvalidConfig(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    expected.shape()
                )));
            }
        }
        Ok(())
    }
}

impl<F: Real> ModelWeights<F> {
    /// Fresh weights drawn from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn new(config: ModelConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn cast<G: Real>(&self) -> ModelWeights<G> {
        ModelWeights {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Same parameters with structural components switched off.
    pub fn ablated(&self, disable_positional: bool, disable_hybrid: bool) -> Self {
        let mut out = self.clone();
        out.config.positional &= !disable_positional;
        out.config.hybrid &= !disable_hybrid;
        out
    }
}
