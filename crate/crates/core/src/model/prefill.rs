//! Plain and partial prefill.
//!
//! A request is a sequence of segments. A segment either holds fresh tokens
//! or a stored [`ChunkCache`] plus a per-token compute depth: a token with
//! depth `c` gets its query, key and value computed in layers `0..c` and
//! takes its key and value from the injected cache in layers `c..L`. Depth 0
//! is pure reuse, depth `L` is full recomputation. Cached keys are rotated
//! to the token's new position inside the attention step; pad rows of a
//! block-aligned cache occupy key slots but are masked out.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};

use super::kv::{ChunkCache, KvLayer};
use super::rope::{frequencies, rotate_row};
use super::{Model, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Segment {
    pub tokens: Vec<TokenId>,
    pub cache: Option<Arc<ChunkCache>>,
    /// Number of layers in which each token is computed.
    pub depth: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PrefillRequest {
    segments: Vec<Segment>,
    positions: Vec<usize>,
    question: Range<usize>,
    capture_trace: bool,
}

impl PrefillRequest {
    /// Every token computed fresh at consecutive positions from 0.
    pub fn plain(tokens: &[TokenId], n_layers: usize) -> Self {
        PrefillRequestBuilder::new(n_layers)
            .fresh(tokens)
            .build_unchecked()
    }

    pub fn builder(n_layers: usize) -> PrefillRequestBuilder {
        PrefillRequestBuilder::new(n_layers)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn question_span(&self) -> Range<usize> {
        self.question.clone()
    }

    pub fn n_tokens(&self) -> usize {
        self.positions.len()
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.segments
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .collect()
    }

    pub fn depths(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| s.depth.iter().copied())
            .collect()
    }

    /// True where the token's query is computed in at least one layer.
    pub fn recompute_mask(&self) -> Vec<bool> {
        self.depths().into_iter().map(|d| d > 0).collect()
    }

    pub fn with_trace(mut self, on: bool) -> Self {
        self.capture_trace = on;
        self
    }

    fn validate(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        let n_layers = cfg.n_layers;
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.depth.len() != seg.tokens.len() {
                return Err(Error::Plan(format!(
                    "segment {i}: {} depths for {} tokens",
                    seg.depth.len(),
                    seg.tokens.len()
                )));
            }
            if seg.depth.iter().any(|&d| d > n_layers) {
                return Err(Error::Plan(format!(
                    "segment {i}: depth beyond {n_layers} layers"
                )));
            }
            match &seg.cache {
                None => {
                    if seg.depth.iter().any(|&d| d < n_layers) {
                        return Err(Error::Plan(format!(
                            "segment {i}: tokens marked for reuse but no cache injected"
                        )));
                    }
                }
                Some(cache) => {
                    if cache.n_tokens() != seg.tokens.len() {
                        return Err(Error::Plan(format!(
                            "segment {i}: injected cache holds {} tokens, span declares {}",
                            cache.n_tokens(),
                            seg.tokens.len()
                        )));
                    }
                    if cache.layers().len() != n_layers
                        || cache.layers().iter().any(|l| l.d_model() != cfg.d_model)
                    {
                        return Err(Error::Plan(format!(
                            "segment {i}: injected cache does not match the model shape"
                        )));
                    }
                }
            }
        }
        let n = self.n_tokens();
        if self.segments.iter().map(|s| s.tokens.len()).sum::<usize>() != n {
            return Err(Error::Plan("positions do not cover every token".into()));
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Plan("positions must be strictly increasing".into()));
        }
        if self.question.end > n {
            return Err(Error::Plan("question span runs past the prompt".into()));
        }
        let depths = self.depths();
        if depths[self.question.clone()].iter().any(|&d| d != n_layers) {
            return Err(Error::Plan(
                "question tokens must be computed in every layer".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PrefillRequestBuilder {
    n_layers: usize,
    segments: Vec<Segment>,
    question: Option<Range<usize>>,
    positions: Option<Vec<usize>>,
    capture_trace: bool,
    len: usize,
}

impl PrefillRequestBuilder {
    pub fn new(n_layers: usize) -> Self {
        Self {
            n_layers,
            segments: Vec::new(),
            question: None,
            positions: None,
            capture_trace: false,
            len: 0,
        }
    }

    pub fn fresh(mut self, tokens: &[TokenId]) -> Self {
        self.len += tokens.len();
        self.segments.push(Segment {
            tokens: tokens.to_vec(),
            cache: None,
            depth: vec![self.n_layers; tokens.len()],
        });
        self
    }

    /// Injects `cache`, recomputing the listed token indices in every layer.
    pub fn injected(self, cache: Arc<ChunkCache>, recompute: &[usize]) -> Self {
        let mut depth = vec![0; cache.n_tokens()];
        for &i in recompute {
            if i < depth.len() {
                depth[i] = self.n_layers;
            }
        }
        self.injected_with_depth(cache, depth)
    }

    pub fn injected_with_depth(mut self, cache: Arc<ChunkCache>, depth: Vec<usize>) -> Self {
        self.len += cache.n_tokens();
        self.segments.push(Segment {
            tokens: cache.tokens().to_vec(),
            cache: Some(cache),
            depth,
        });
        self
    }

    /// Appends fresh question tokens and marks them as the question span.
    pub fn question(mut self, tokens: &[TokenId]) -> Self {
        let start = self.len;
        self = self.fresh(tokens);
        self.question = Some(start..start + tokens.len());
        self
    }

    pub fn segment(mut self, seg: Segment) -> Self {
        self.len += seg.tokens.len();
        self.segments.push(seg);
        self
    }

    pub fn positions(mut self, positions: Vec<usize>) -> Self {
        self.positions = Some(positions);
        self
    }

    pub fn trace(mut self, on: bool) -> Self {
        self.capture_trace = on;
        self
    }

    fn build_unchecked(self) -> PrefillRequest {
        let n = self.len;
        PrefillRequest {
            segments: self.segments,
            positions: self.positions.unwrap_or_else(|| (0..n).collect()),
            question: self.question.unwrap_or(n..n),
            capture_trace: self.capture_trace,
        }
    }

    pub fn build(self) -> Result<PrefillRequest> {
        if let Some(p) = &self.positions {
            if p.len() != self.len {
                return Err(Error::Plan(format!(
                    "{} positions for {} tokens",
                    p.len(),
                    self.len
                )));
            }
        }
        Ok(self.build_unchecked())
    }
}

/// Attention weights of one layer. `rows` lists the prompt token index of
/// each computed query; each head matrix is `[rows.len() x n_tokens]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub rows: Vec<usize>,
    pub heads: Vec<Array2<f64>>,
}

impl LayerAttention {
    pub fn head_mean(&self) -> Array2<f64> {
        let mut acc = self.heads[0].clone();
        for h in &self.heads[1..] {
            acc += h;
        }
        acc / self.heads.len() as f64
    }

    /// Position of prompt token `t` among the computed query rows.
    pub fn row_of(&self, t: usize) -> Option<usize> {
        self.rows.binary_search(&t).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<LayerAttention>,
}

/// Per-layer internals captured on request, for identity checks.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Value vectors of every prompt token, `[n_tokens x d_model]`.
    pub values: Array2<f64>,
    /// Attention output of the computed rows before the output projection.
    pub attn_out: Array2<f64>,
}

/// Observes each layer's attention and may stop the computation of tokens.
pub trait PrefillHook {
    /// Called after attention in `layer` (0-based). Returns prompt token
    /// indices that should not be computed in any later layer. Question
    /// tokens and tokens without an injected cache are never stopped.
    fn after_attention(&mut self, layer: usize, attn: &LayerAttention) -> Vec<usize>;
}

pub struct NoHook;

impl PrefillHook for NoHook {
    fn after_attention(&mut self, _layer: usize, _attn: &LayerAttention) -> Vec<usize> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// Last-layer hidden states. Rows of tokens not computed in the last
    /// layer are zero.
    pub hidden: Array2<f64>,
    /// Effective per-token compute depth after any hook intervention.
    pub depth: Vec<usize>,
    /// Position-free keys and values for every prompt token, with freshly
    /// computed rows replacing stale cached rows.
    pub kv: Vec<KvLayer>,
    pub attention: AttentionRecord,
    pub positions: Vec<usize>,
    pub question: Range<usize>,
    pub traces: Option<Vec<LayerTrace>>,
}

impl PrefillOutput {
    pub fn question_hidden(&self) -> Array2<f64> {
        self.hidden.slice(s![self.question.clone(), ..]).to_owned()
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Real(usize),
    Pad,
}

impl Model {
    pub fn prefill(&self, request: &PrefillRequest) -> Result<PrefillOutput> {
        self.prefill_with_hook(request, &mut NoHook)
    }

    pub fn prefill_with_hook(
        &self,
        request: &PrefillRequest,
        hook: &mut dyn PrefillHook,
    ) -> Result<PrefillOutput> {
        request.validate(self)?;
        let cfg = self.config();
        let (d, dh, n_heads) = (cfg.d_model, cfg.d_head, cfg.n_heads);
        let tokens = request.tokens();
        let n = tokens.len();
        let mut depth = request.depths();

        // Key slot layout, with pad rows of injected caches kept in place.
        let mut slots = Vec::new();
        // (segment, row) of the cached KV for each real token.
        let mut cache_src: Vec<Option<(usize, usize)>> = Vec::with_capacity(n);
        let mut slot_of = Vec::with_capacity(n);
        for (si, seg) in request.segments.iter().enumerate() {
            for r in 0..seg.tokens.len() {
                slot_of.push(slots.len());
                slots.push(Slot::Real(cache_src.len()));
                cache_src.push(seg.cache.as_ref().map(|_| (si, r)));
            }
            if let Some(c) = &seg.cache {
                slots.extend(std::iter::repeat_n(Slot::Pad, c.pad()));
            }
        }
        let n_slots = slots.len();
        let slot_pos: Vec<usize> = slots
            .iter()
            .map(|s| match s {
                Slot::Real(t) => request.positions[*t],
                Slot::Pad => 0,
            })
            .collect();
        let freqs = frequencies(dh, cfg.rpe_base);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut hidden = self.embed_tokens(&tokens)?;
        let mut kv_out = Vec::with_capacity(cfg.n_layers);
        let mut attn_layers = Vec::with_capacity(cfg.n_layers);
        let mut traces = request.capture_trace.then(Vec::new);

        for (l, lw) in self.layers.iter().enumerate() {
            let active: Vec<usize> = (0..n).filter(|&t| depth[t] > l).collect();
            let x = lw.ln_attn.forward(&hidden.select(Axis(0), &active));
            let mut q = x.dot(&lw.wq);
            let k_new = x.dot(&lw.wk);
            let v_new = x.dot(&lw.wv);

            let mut keys = Array2::zeros((n_slots, d));
            let mut values = Array2::zeros((n_slots, d));
            let mut fresh_row = vec![usize::MAX; n];
            for (i, &t) in active.iter().enumerate() {
                fresh_row[t] = i;
            }
            for t in 0..n {
                let slot = slot_of[t];
                if fresh_row[t] != usize::MAX {
                    keys.row_mut(slot).assign(&k_new.row(fresh_row[t]));
                    values.row_mut(slot).assign(&v_new.row(fresh_row[t]));
                } else {
                    let (si, r) = cache_src[t].expect("validated: reused tokens have a cache");
                    let cached = &request.segments[si].cache.as_ref().unwrap().layers()[l];
                    keys.row_mut(slot).assign(&cached.keys.row(r));
                    values.row_mut(slot).assign(&cached.values.row(r));
                }
            }
            let real_kv = KvLayer {
                keys: keys.select(Axis(0), &slot_of),
                values: values.select(Axis(0), &slot_of),
            };

            for (row, &pos) in keys.axis_iter_mut(Axis(0)).zip(&slot_pos) {
                rotate_row(row, pos, dh, &freqs, false);
            }
            for (row, &t) in q.axis_iter_mut(Axis(0)).zip(&active) {
                rotate_row(row, request.positions[t], dh, &freqs, false);
            }

            let mut attn_out = Array2::zeros((active.len(), d));
            let mut heads = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![.., cols.clone()]);
                let kh = keys.slice(s![.., cols.clone()]);
                let mut w = qh.dot(&kh.t()) * scale;
                for (i, &t) in active.iter().enumerate() {
                    let own = slot_of[t];
                    let mut row = w.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for (j, slot) in slots.iter().enumerate() {
                        if j <= own && matches!(slot, Slot::Real(_)) {
                            max = max.max(row[j]);
                        }
                    }
                    let mut sum = 0.0;
                    for (j, slot) in slots.iter().enumerate() {
                        if j <= own && matches!(slot, Slot::Real(_)) {
                            row[j] = (row[j] - max).exp();
                            sum += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row /= sum;
                }
                let out = w.dot(&values.slice(s![.., cols.clone()]));
                attn_out.slice_mut(s![.., cols]).assign(&out);
                heads.push(w.select(Axis(1), &slot_of));
            }
            let layer_attn = LayerAttention {
                rows: active.clone(),
                heads,
            };

            for t in hook.after_attention(l, &layer_attn) {
                let in_question = request.question.contains(&t);
                if t < n && cache_src[t].is_some() && !in_question {
                    depth[t] = depth[t].min(l + 1);
                }
            }

            let mut h_active = hidden.select(Axis(0), &active);
            h_active += &attn_out.dot(&lw.wo);
            lw.ffn_residual(&mut h_active);
            for (i, &t) in active.iter().enumerate() {
                hidden.row_mut(t).assign(&h_active.row(i));
            }

            if let Some(tr) = traces.as_mut() {
                tr.push(LayerTrace {
                    values: real_kv.values.clone(),
                    attn_out,
                });
            }
            kv_out.push(real_kv);
            attn_layers.push(layer_attn);
        }

        let last = cfg.n_layers;
        for t in 0..n {
            if depth[t] < last {
                hidden.row_mut(t).fill(0.0);
            }
        }

        Ok(PrefillOutput {
            hidden,
            depth,
            kv: kv_out,
            attention: AttentionRecord {
                layers: attn_layers,
            },
            positions: request.positions.clone(),
            question: request.question.clone(),
            traces,
        })
    }

    /// Last-layer hidden state of a single position, used by decode.
    pub(crate) fn hidden_row(out: &PrefillOutput, t: usize) -> Array1<f64> {
        out.hidden.row(t).to_owned()
    }
}
