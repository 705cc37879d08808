//! Inter- and intra-chunk attention aggregates.
//!
//! All quantities use head-averaged attention weights. `inter(C_i, C_j)` for
//! `i < j` is the mass that queries in the later chunk `C_j` place on keys of
//! the earlier chunk `C_i`; `intra(C_i)` is the mass queries of `C_i` place
//! on strictly earlier tokens of the same chunk. The diagonal (self) mass and
//! mass on tokens outside every chunk are tracked separately so that each
//! chunk's rows can be accounted for exactly.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, LayerAttention};
use crate::store::ChunkHash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSpan {
    pub chunk_id: ChunkHash,
    pub start: usize,
    pub len: usize,
}

impl ChunkSpan {
    pub fn new(chunk_id: ChunkHash, start: usize, len: usize) -> Self {
        Self {
            chunk_id,
            start,
            len,
        }
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Checks spans are non-empty, ordered, disjoint and inside the prompt.
pub fn validate_spans(spans: &[ChunkSpan], n_tokens: usize) -> Result<()> {
    let mut prev_end = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.len == 0 {
            return Err(Error::Argument(format!("span {i} is empty")));
        }
        if s.start < prev_end {
            return Err(Error::Argument(format!(
                "span {i} overlaps or is out of order"
            )));
        }
        prev_end = s.end();
    }
    if prev_end > n_tokens {
        return Err(Error::Argument("spans run past the prompt".into()));
    }
    Ok(())
}

/// Sum of head-averaged weights from query tokens `queries` onto key tokens
/// `keys`, over the computed rows of one layer.
fn block_mass(
    layer: &LayerAttention,
    mean: &Array2<f64>,
    queries: Range<usize>,
    keys: Range<usize>,
) -> f64 {
    let mut total = 0.0;
    for q in queries {
        if let Some(r) = layer.row_of(q) {
            total += keys.clone().map(|k| mean[[r, k]]).sum::<f64>();
        }
    }
    total
}

fn layer_or_err(attn: &AttentionRecord, layer: usize) -> Result<&LayerAttention> {
    attn.layers
        .get(layer)
        .ok_or_else(|| Error::Argument(format!("no attention for layer {layer}")))
}

/// `inter(C_i, C_j)` in one layer: mass from queries of `C_j` onto keys of
/// `C_i`, requiring `i < j`.
pub fn inter(
    attn: &AttentionRecord,
    spans: &[ChunkSpan],
    i: usize,
    j: usize,
    layer: usize,
) -> Result<f64> {
    if i >= j || j >= spans.len() {
        return Err(Error::Argument(format!(
            "inter needs i < j < {}, got ({i}, {j})",
            spans.len()
        )));
    }
    let l = layer_or_err(attn, layer)?;
    Ok(block_mass(
        l,
        &l.head_mean(),
        spans[j].range(),
        spans[i].range(),
    ))
}

/// `intra(C_i)` in one layer, strictly below the diagonal.
pub fn intra(attn: &AttentionRecord, spans: &[ChunkSpan], i: usize, layer: usize) -> Result<f64> {
    let span = spans
        .get(i)
        .ok_or_else(|| Error::Argument(format!("no span {i}")))?;
    let l = layer_or_err(attn, layer)?;
    let mean = l.head_mean();
    let mut total = 0.0;
    for q in span.range() {
        if let Some(r) = l.row_of(q) {
            total += (span.start..q).map(|k| mean[[r, k]]).sum::<f64>();
        }
    }
    Ok(total)
}

/// Per-token inter scores of chunk `i`: for each of its tokens, the
/// head-averaged mass placed on all earlier chunks, summed over layers.
pub fn token_inter_scores(attn: &AttentionRecord, spans: &[ChunkSpan], i: usize) -> Vec<f64> {
    let Some(span) = spans.get(i) else {
        return Vec::new();
    };
    let mut scores = vec![0.0; span.len];
    if i == 0 {
        return scores;
    }
    for l in &attn.layers {
        let mean = l.head_mean();
        for (k, q) in span.range().enumerate() {
            if let Some(r) = l.row_of(q) {
                scores[k] += spans[..i]
                    .iter()
                    .map(|p| p.range().map(|c| mean[[r, c]]).sum::<f64>())
                    .sum::<f64>();
            }
        }
    }
    scores
}

/// `inter_l(C_i, U)` for every chunk: mass from the question rows onto each
/// chunk, from one layer's attention.
pub fn question_inter(
    layer: &LayerAttention,
    spans: &[ChunkSpan],
    question: Range<usize>,
) -> Vec<f64> {
    let mean = layer.head_mean();
    spans
        .iter()
        .map(|s| block_mass(layer, &mean, question.clone(), s.range()))
        .collect()
}

/// All aggregates for one prompt, computed in a single pass over the
/// attention rows of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    /// `inter[l][i][j]`, meaningful for `i < j`.
    pub inter: Vec<Vec<Vec<f64>>>,
    /// `intra[l][i]`.
    pub intra: Vec<Vec<f64>>,
    /// Self-attention mass of each chunk's tokens, `diag[l][i]`.
    pub diag: Vec<Vec<f64>>,
    /// Mass from chunk `i`'s queries onto earlier tokens outside every chunk.
    pub outside: Vec<Vec<f64>>,
    /// Layer-summed per-token inter scores, one vector per chunk.
    pub token_inter: Vec<Vec<f64>>,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

impl AttentionStats {
    pub fn compute(attn: &AttentionRecord, spans: &[ChunkSpan]) -> Result<Self> {
        let n_tokens = attn.layers.first().map_or(0, |l| l.heads[0].ncols());
        validate_spans(spans, n_tokens)?;
        let k = spans.len();
        let n_layers = attn.layers.len();
        let mut owner = vec![usize::MAX; n_tokens];
        for (i, s) in spans.iter().enumerate() {
            owner[s.range()].fill(i);
        }

        let mut inter = vec![vec![vec![0.0; k]; k]; n_layers];
        let mut intra = vec![vec![0.0; k]; n_layers];
        let mut diag = vec![vec![0.0; k]; n_layers];
        let mut outside = vec![vec![0.0; k]; n_layers];
        let mut token_inter: Vec<Vec<f64>> = spans.iter().map(|s| vec![0.0; s.len]).collect();

        for (l, layer) in attn.layers.iter().enumerate() {
            let mean = layer.head_mean();
            for (r, &q) in layer.rows.iter().enumerate() {
                let j = owner[q];
                if j == usize::MAX {
                    continue;
                }
                let local = q - spans[j].start;
                for c in 0..=q {
                    let w = mean[[r, c]];
                    let i = owner[c];
                    if c == q {
                        diag[l][j] += w;
                    } else if i == j {
                        intra[l][j] += w;
                    } else if i == usize::MAX {
                        outside[l][j] += w;
                    } else {
                        inter[l][i][j] += w;
                        token_inter[j][local] += w;
                    }
                }
            }
        }

        let mut stats = Self {
            inter,
            intra,
            diag,
            outside,
            token_inter,
            a_bar: vec![0.0; k],
            b_bar: vec![0.0; k],
        };
        for i in 0..k {
            let (a, b) = stats.context_ratios(spans, i);
            stats.a_bar[i] = a;
            stats.b_bar[i] = b;
        }
        Ok(stats)
    }

    pub fn n_layers(&self) -> usize {
        self.intra.len()
    }

    /// Layer-averaged normalized ratios `(a_bar, b_bar)` for chunk `i`:
    /// `a_l = sum_{j<i} inter_l(C_j, C_i) / (|C_i| |C_j|)` and
    /// `b_l = intra_l(C_i) / |C_i|^2`.
    pub fn context_ratios(&self, spans: &[ChunkSpan], i: usize) -> (f64, f64) {
        let n_layers = self.n_layers();
        if n_layers == 0 {
            return (0.0, 0.0);
        }
        let ci = spans[i].len as f64;
        let mut a = 0.0;
        let mut b = 0.0;
        for l in 0..n_layers {
            a += (0..i)
                .map(|j| self.inter[l][j][i] / (ci * spans[j].len as f64))
                .sum::<f64>();
            b += self.intra[l][i] / (ci * ci);
        }
        (a / n_layers as f64, b / n_layers as f64)
    }

    /// Layer-summed `inter(C_j, C_i)` for every earlier chunk `j`.
    pub fn prefix_weights(&self, i: usize) -> Vec<f64> {
        (0..i)
            .map(|j| self.inter.iter().map(|layer| layer[j][i]).sum())
            .collect()
    }

    pub fn chunk_record(&self, spans: &[ChunkSpan], i: usize) -> ChunkStats {
        ChunkStats {
            chunk_id: spans[i].chunk_id,
            a_bar: self.a_bar[i],
            b_bar: self.b_bar[i],
            token_scores: self.token_inter[i].clone(),
            prefix: spans[..i].iter().map(|s| s.chunk_id).collect(),
            prefix_inter: self.prefix_weights(i),
        }
    }
}

/// Per-chunk statistics persisted next to a cache snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub chunk_id: ChunkHash,
    pub a_bar: f64,
    pub b_bar: f64,
    pub token_scores: Vec<f64>,
    pub prefix: Vec<ChunkHash>,
    pub prefix_inter: Vec<f64>,
}
