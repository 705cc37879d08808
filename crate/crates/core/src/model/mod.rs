//! Deterministic reference transformer.
//!
//! A pre-norm decoder-only transformer with rotary position embeddings and a
//! GELU feed-forward block. Weights come from a seeded ChaCha stream, so the
//! same [`ModelConfig`] always yields bit-identical weights. The model is the
//! thing whose caches are managed and also the oracle every reuse path is
//! checked against.

mod decode;
mod kv;
mod prefill;
pub mod rope;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use decode::DecodeState;
pub use kv::{read_kv, write_kv, ChunkCache, KvLayer};
pub use prefill::{
    AttentionRecord, LayerAttention, LayerTrace, NoHook, PrefillHook, PrefillOutput,
    PrefillRequest, PrefillRequestBuilder, Segment,
};
pub use rope::{apply_rpe, remove_rpe};

/// Token id. Ids are opaque; there is no tokenizer.
pub type TokenId = u32;

/// Logit gain of the query/key projections at initialisation. Scores have a
/// standard deviation of roughly this value, which gives peaked but not
/// one-hot attention rows.
const QK_INIT_GAIN: f64 = 2.0;
const LN_EPS: f64 = 1e-5;

fn default_rpe_base() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rpe_base")]
    pub rpe_base: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            vocab_size: 256,
            rpe_base: default_rpe_base(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "layers, heads, d_head and vocab_size must be positive".into(),
            ));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "d_head must be even for pairwise rotation, got {}",
                self.d_head
            )));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.rpe_base.is_finite() && self.rpe_base > 0.0) {
            return Err(Error::Config(format!(
                "rpe_base must be positive, got {}",
                self.rpe_base
            )));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerNorm {
    gain: Array1<f64>,
    bias: Array1<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mean = row.mean().unwrap_or(0.0);
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (v, (g, b)) in row.iter_mut().zip(self.gain.iter().zip(self.bias.iter())) {
                *v = (*v - mean) * inv * g + b;
            }
        }
        out
    }

    fn forward_row(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let m = x.to_owned().insert_axis(Axis(0));
        self.forward(&m).remove_axis(Axis(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerWeights {
    pub(crate) ln_attn: LayerNorm,
    pub(crate) wq: Array2<f64>,
    pub(crate) wk: Array2<f64>,
    pub(crate) wv: Array2<f64>,
    pub(crate) wo: Array2<f64>,
    pub(crate) ln_ffn: LayerNorm,
    pub(crate) w1: Array2<f64>,
    pub(crate) b1: Array1<f64>,
    pub(crate) w2: Array2<f64>,
    pub(crate) b2: Array1<f64>,
}

impl LayerWeights {
    /// Residual feed-forward update applied in place to `h`.
    pub(crate) fn ffn_residual(&self, h: &mut Array2<f64>) {
        let x = self.ln_ffn.forward(h);
        let mut mid = x.dot(&self.w1) + &self.b1;
        mid.mapv_inplace(gelu);
        let out = mid.dot(&self.w2) + &self.b2;
        *h += &out;
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// The reference model. Immutable after construction and safe to share
/// read-only across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub(crate) embed: Array2<f64>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) ln_final: LayerNorm,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.ffn_width();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut fill = |rows: usize, cols: usize, std: f64| -> Array2<f64> {
            let normal = Normal::new(0.0, std).expect("finite std");
            Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
        };

        let embed = fill(config.vocab_size, d, 1.0);
        let qk_std = (QK_INIT_GAIN / d as f64).sqrt();
        let proj_std = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = fill(d, d, qk_std);
            let wk = fill(d, d, qk_std);
            let wv = fill(d, d, proj_std);
            let wo = fill(d, d, proj_std);
            let w1 = fill(d, f, proj_std);
            let w2 = fill(f, d, 1.0 / (f as f64).sqrt());
            layers.push(LayerWeights {
                ln_attn: LayerNorm::new(d),
                wq,
                wk,
                wv,
                wo,
                ln_ffn: LayerNorm::new(d),
                w1,
                b1: Array1::zeros(f),
                w2,
                b2: Array1::zeros(d),
            });
        }

        Ok(Self {
            config,
            embed,
            layers,
            ln_final: LayerNorm::new(d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Number of attention blocks and feed-forward blocks, in that order.
    pub fn block_counts(&self) -> (usize, usize) {
        (self.layers.len(), self.layers.len())
    }

    pub(crate) fn embed_tokens(&self, tokens: &[TokenId]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((tokens.len(), self.config.d_model));
        for (mut row, &t) in out.axis_iter_mut(Axis(0)).zip(tokens) {
            let t = t as usize;
            if t >= self.config.vocab_size {
                return Err(Error::Argument(format!(
                    "token id {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            row.assign(&self.embed.row(t));
        }
        Ok(out)
    }

    /// Next-token logits from a last-layer hidden state (tied embeddings).
    pub fn logits(&self, hidden: ArrayView1<f64>) -> Array1<f64> {
        let normed = self.ln_final.forward_row(hidden);
        self.embed.dot(&normed)
    }

    /// All weights flattened in construction order, for determinism checks.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |a: &[f64]| {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        push(self.embed.as_slice().expect("standard layout"));
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                push(m.as_slice().expect("standard layout"));
            }
        }
        out
    }
}

/// Greedy token choice; ties go to the lowest id.
pub(crate) fn argmax(v: &Array1<f64>) -> TokenId {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as TokenId
}
