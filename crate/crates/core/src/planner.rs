//! Recompute planning: which tokens of each reused chunk to recompute, and
//! when recomputation of chunks the question ignores can stop.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerAttention, PrefillHook, PrefillRequest, TokenId};
use crate::scoring::ReuseScore;
use crate::stats::{question_inter, ChunkSpan};
use crate::store::{chunk_hash, ChunkHash, MetadataStore, VariantId};

pub const DEFAULT_WINDOW: usize = 3;

/// `ceil(fraction * n)` with a small guard so that e.g. `0.3 * 10` stays 3.
pub fn recompute_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// The `ceil(cfo * n)` highest-scoring indices, lowest index first on ties,
/// returned in ascending order.
pub fn select_tokens(scores: &[f64], cfo: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&cfo) {
        return Err(Error::Argument(format!("cfo = {cfo} is outside [0, 1]")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Argument("token scores must be finite".into()));
    }
    let n = recompute_count(cfo, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..n].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusResult {
    /// Request-order indices of the focused chunks, ascending.
    pub focused: Vec<usize>,
    /// Number of layers after which unfocused recomputation may stop.
    pub cutoff: usize,
    /// Set when there were too few chunks to rank.
    pub degenerate: bool,
}

impl FocusResult {
    pub fn all(k: usize, n_layers: usize, degenerate: bool) -> Self {
        Self {
            focused: (0..k).collect(),
            cutoff: n_layers,
            degenerate,
        }
    }
}

/// Focused chunks for one layer's cumulative question scores: sort
/// descending, take successive gaps, normalize them into `p`, and cut after
/// the largest entropy jump `-p_{t+1} ln p_{t+1}`.
pub fn focused_at_layer(cumulative: &[f64]) -> Vec<usize> {
    let k = cumulative.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| cumulative[b].total_cmp(&cumulative[a]).then(a.cmp(&b)));
    if k < 3 {
        order.sort_unstable();
        return order;
    }
    let diffs: Vec<f64> = order
        .windows(2)
        .map(|w| cumulative[w[0]] - cumulative[w[1]])
        .collect();
    let total: f64 = diffs.iter().sum();
    if !(total > 0.0) {
        return (0..k).collect();
    }
    let jump = |d: f64| {
        let p = d / total;
        if p > 0.0 {
            -p * p.ln()
        } else {
            0.0
        }
    };
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for t in 0..k - 2 {
        let j = jump(diffs[t + 1]);
        if j > best_val {
            best_val = j;
            best = t;
        }
    }
    let mut focused = order[..best + 1].to_vec();
    focused.sort_unstable();
    focused
}

/// Incremental focus prediction over a layer sweep.
#[derive(Debug, Clone)]
pub struct FocusTracker {
    window: usize,
    n_layers: usize,
    cumulative: Vec<f64>,
    history: Vec<Vec<usize>>,
    result: Option<FocusResult>,
}

impl FocusTracker {
    pub fn new(k: usize, window: usize, n_layers: usize) -> Result<Self> {
        if window == 0 || n_layers == 0 {
            return Err(Error::Argument(
                "window and layer count must be positive".into(),
            ));
        }
        let result = (k < 3).then(|| FocusResult::all(k, n_layers, true));
        Ok(Self {
            window,
            n_layers,
            cumulative: vec![0.0; k],
            history: Vec::new(),
            result,
        })
    }

    /// Feeds one layer of `inter_l(C_i, U)`. Returns the result once it is
    /// decided, which happens at most once.
    pub fn push(&mut self, layer_scores: &[f64]) -> Result<Option<&FocusResult>> {
        if self.result.is_some() {
            return Ok(None);
        }
        if layer_scores.len() != self.cumulative.len() {
            return Err(Error::Shape(format!(
                "{} layer scores for {} chunks",
                layer_scores.len(),
                self.cumulative.len()
            )));
        }
        for (c, s) in self.cumulative.iter_mut().zip(layer_scores) {
            *c += s;
        }
        self.history.push(focused_at_layer(&self.cumulative));
        let l = self.history.len();
        if l >= self.window {
            let recent = &self.history[l - self.window..];
            if recent.iter().all(|f| *f == recent[0]) {
                self.result = Some(FocusResult {
                    focused: recent[0].clone(),
                    cutoff: l,
                    degenerate: false,
                });
                return Ok(self.result.as_ref());
            }
        }
        Ok(None)
    }

    pub fn result(&self) -> Option<&FocusResult> {
        self.result.as_ref()
    }

    /// The decided result, or every chunk at full depth if none was reached.
    pub fn finish(&self) -> FocusResult {
        self.result
            .clone()
            .unwrap_or_else(|| FocusResult::all(self.cumulative.len(), self.n_layers, false))
    }
}

/// Runs the tracker over a whole per-layer stream.
pub fn predict_focused(stream: &[Vec<f64>], window: usize, n_layers: usize) -> Result<FocusResult> {
    let k = stream.first().map_or(0, Vec::len);
    let mut tracker = FocusTracker::new(k, window, n_layers)?;
    for layer in stream.iter().take(n_layers) {
        if tracker.push(layer)?.is_some() {
            break;
        }
    }
    Ok(tracker.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChunkDecision {
    Miss,
    Hit {
        variant: VariantId,
        recompute: Vec<usize>,
        score: ReuseScore,
        /// Layers in which recompute tokens are computed.
        depth: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedChunk {
    pub chunk: ChunkHash,
    pub start: usize,
    pub len: usize,
    pub decision: ChunkDecision,
}

impl PlannedChunk {
    pub fn is_hit(&self) -> bool {
        matches!(self.decision, ChunkDecision::Hit { .. })
    }

    pub fn cfo(&self) -> Option<f64> {
        match &self.decision {
            ChunkDecision::Hit { score, .. } => Some(score.cfo),
            ChunkDecision::Miss => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferencePlan {
    pub chunks: Vec<PlannedChunk>,
    pub question: Range<usize>,
    pub window: usize,
    pub n_layers: usize,
    pub positions: Vec<usize>,
}

impl InferencePlan {
    pub fn spans(&self) -> Vec<ChunkSpan> {
        self.chunks
            .iter()
            .map(|c| ChunkSpan::new(c.chunk, c.start, c.len))
            .collect()
    }

    pub fn n_hits(&self) -> usize {
        self.chunks.iter().filter(|c| c.is_hit()).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Prompt token indices recomputed in HIT chunks.
    pub fn recompute_tokens(&self) -> Vec<usize> {
        self.chunks
            .iter()
            .flat_map(|c| match &c.decision {
                ChunkDecision::Hit { recompute, .. } => {
                    recompute.iter().map(|i| c.start + i).collect()
                }
                ChunkDecision::Miss => Vec::new(),
            })
            .collect()
    }

    /// Builds the prefill request: MISS chunks fresh, HIT chunks injected
    /// from the store with their recompute tokens at the planned depth.
    pub fn to_request(
        &self,
        chunk_tokens: &[Vec<TokenId>],
        question: &[TokenId],
        store: &MetadataStore,
    ) -> Result<PrefillRequest> {
        if chunk_tokens.len() != self.chunks.len() {
            return Err(Error::Plan(format!(
                "{} chunk token lists for a {}-chunk plan",
                chunk_tokens.len(),
                self.chunks.len()
            )));
        }
        let mut b = PrefillRequest::builder(self.n_layers);
        for (c, tokens) in self.chunks.iter().zip(chunk_tokens) {
            b = match &c.decision {
                ChunkDecision::Miss => b.fresh(tokens),
                ChunkDecision::Hit {
                    variant,
                    recompute,
                    depth,
                    ..
                } => {
                    let v = store.get(*variant).ok_or(Error::NotFound(*variant))?;
                    let mut d = vec![0; c.len];
                    for &i in recompute {
                        d[i] = *depth;
                    }
                    b.injected_with_depth(Arc::clone(&v.payload), d)
                }
            };
        }
        b.question(question)
            .positions(self.positions.clone())
            .build()
    }
}

/// Queries the store for every chunk and picks, for each HIT, the variant
/// with the lowest CFO under the new prefix.
pub fn build_plan(
    chunk_tokens: &[Vec<TokenId>],
    question_len: usize,
    store: &MetadataStore,
    alpha: f64,
    n_layers: usize,
    window: usize,
) -> Result<InferencePlan> {
    if chunk_tokens.is_empty() && question_len == 0 {
        return Err(Error::Argument("empty request".into()));
    }
    let hashes = chunk_tokens
        .iter()
        .map(|t| chunk_hash(t))
        .collect::<Result<Vec<_>>>()?;
    let mut chunks = Vec::with_capacity(hashes.len());
    let mut start = 0;
    for (i, (hash, tokens)) in hashes.iter().zip(chunk_tokens).enumerate() {
        let prefix = &hashes[..i];
        let mut best: Option<(VariantId, ReuseScore, &[f64])> = None;
        for v in store.lookup(*hash) {
            if v.meta.tokens != *tokens {
                continue;
            }
            let score = ReuseScore::evaluate(&v.meta.prefix, v.meta.cci, prefix, alpha)?;
            if best.as_ref().is_none_or(|(_, s, _)| score.cfo < s.cfo) {
                best = Some((v.id(), score, &v.meta.token_scores));
            }
        }
        let decision = match best {
            None => ChunkDecision::Miss,
            Some((variant, score, token_scores)) => ChunkDecision::Hit {
                variant,
                recompute: select_tokens(token_scores, score.cfo)?,
                score,
                depth: n_layers,
            },
        };
        chunks.push(PlannedChunk {
            chunk: *hash,
            start,
            len: tokens.len(),
            decision,
        });
        start += tokens.len();
    }
    Ok(InferencePlan {
        chunks,
        question: start..start + question_len,
        window,
        n_layers,
        positions: (0..start + question_len).collect(),
    })
}

/// Stops recomputation of HIT chunks outside the focused set after
/// `focus.cutoff` layers. MISS chunks are untouched.
pub fn apply_early_termination(mut plan: InferencePlan, focus: &FocusResult) -> InferencePlan {
    for (i, c) in plan.chunks.iter_mut().enumerate() {
        if focus.focused.contains(&i) {
            continue;
        }
        if let ChunkDecision::Hit { depth, .. } = &mut c.decision {
            *depth = (*depth).min(focus.cutoff);
        }
    }
    plan
}

/// Prefill hook that tracks focus from the question rows and, once decided,
/// stops the recompute tokens of unfocused HIT chunks.
pub struct FocusHook {
    tracker: FocusTracker,
    spans: Vec<ChunkSpan>,
    question: Range<usize>,
    stoppable: Vec<Vec<usize>>,
}

impl FocusHook {
    pub fn new(plan: &InferencePlan) -> Result<Self> {
        let stoppable = plan
            .chunks
            .iter()
            .map(|c| match &c.decision {
                ChunkDecision::Hit { recompute, .. } => {
                    recompute.iter().map(|i| c.start + i).collect()
                }
                ChunkDecision::Miss => Vec::new(),
            })
            .collect();
        Ok(Self {
            tracker: FocusTracker::new(plan.chunks.len(), plan.window, plan.n_layers)?,
            spans: plan.spans(),
            question: plan.question.clone(),
            stoppable,
        })
    }

    pub fn focus(&self) -> FocusResult {
        self.tracker.finish()
    }
}

impl PrefillHook for FocusHook {
    fn after_attention(&mut self, _layer: usize, attn: &LayerAttention) -> Vec<usize> {
        if self.tracker.result().is_some() || self.question.is_empty() {
            return Vec::new();
        }
        let scores = question_inter(attn, &self.spans, self.question.clone());
        match self.tracker.push(&scores) {
            Ok(Some(focus)) => {
                let focused = focus.focused.clone();
                self.stoppable
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !focused.contains(i))
                    .flat_map(|(_, t)| t.iter().copied())
                    .collect()
            }
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChunkCache, KvLayer, Model, ModelConfig};
    use crate::scoring::PrefixContext;
    use crate::store::{NewVariant, StoreConfig};
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn select_tokens_cases() {
        let s = [0.5, 0.1, 0.9, 0.3, 0.7, 0.2, 0.8, 0.0, 0.6, 0.4];
        assert!(select_tokens(&s, 0.0).unwrap().is_empty());
        assert_eq!(select_tokens(&s, 1.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(select_tokens(&s, 0.3).unwrap(), vec![2, 4, 6]);
        assert_eq!(select_tokens(&[1.0, 1.0, 1.0], 0.5).unwrap(), vec![0, 1]);
        assert!(matches!(select_tokens(&s, 1.5), Err(Error::Argument(_))));
        assert!(select_tokens(&[f64::NAN], 0.5).is_err());
    }

    /// Step-by-step evaluation written out independently of the tracker.
    fn hand_focus(cum: &[f64]) -> Vec<usize> {
        let k = cum.len();
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|&a, &b| cum[b].partial_cmp(&cum[a]).unwrap().then(a.cmp(&b)));
        let sorted: Vec<f64> = idx.iter().map(|&i| cum[i]).collect();
        let d: Vec<f64> = (0..k - 1).map(|t| sorted[t] - sorted[t + 1]).collect();
        let sum: f64 = d.iter().sum();
        if sum == 0.0 {
            return (0..k).collect();
        }
        let p: Vec<f64> = d.iter().map(|x| x / sum).collect();
        let mut h = vec![0.0; k - 1];
        let mut acc = 0.0;
        for t in 0..k - 1 {
            if p[t] > 0.0 {
                acc -= p[t] * p[t].ln();
            }
            h[t] = acc;
        }
        let mut star = 0;
        for t in 1..k - 2 {
            if h[t + 1] - h[t] > h[star + 1] - h[star] {
                star = t;
            }
        }
        let mut f = idx[..=star].to_vec();
        f.sort_unstable();
        f
    }

    #[test]
    fn dominant_chunk_is_found_at_window() {
        // Chunk 2 dominates from the first layer; gaps below it are even.
        let layer = vec![0.1, 0.05, 0.8, 0.0];
        let stream = vec![layer.clone(); 4];
        assert_eq!(hand_focus(&layer), vec![2]);
        let f = predict_focused(&stream, 2, 4).unwrap();
        assert_eq!(
            f,
            FocusResult {
                focused: vec![2],
                cutoff: 2,
                degenerate: false
            }
        );
    }

    #[test]
    fn reshuffling_never_stabilizes() {
        let stream = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 5.0, 0.0, 0.0],
            vec![0.0, 0.0, 20.0, 0.0],
            vec![0.0, 0.0, 0.0, 60.0],
        ];
        assert_eq!(
            predict_focused(&stream, 2, 4).unwrap(),
            FocusResult::all(4, 4, false)
        );
    }

    #[test]
    fn too_few_chunks_is_degenerate() {
        let stream = vec![vec![0.9, 0.1]; 4];
        assert_eq!(
            predict_focused(&stream, 2, 4).unwrap(),
            FocusResult::all(2, 4, true)
        );
    }

    #[test]
    fn equal_scores_focus_everything() {
        assert_eq!(focused_at_layer(&[0.2, 0.2, 0.2, 0.2]), vec![0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn select_matches_sort_oracle(scores in proptest::collection::vec(-5.0f64..5.0, 0..64), cfo in 0.0f64..=1.0) {
            let got = select_tokens(&scores, cfo).unwrap();
            let n = recompute_count(cfo, scores.len());
            let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut oracle: Vec<usize> = pairs[..n].iter().map(|p| p.1).collect();
            oracle.sort_unstable();
            prop_assert_eq!(got, oracle);
        }

        #[test]
        fn tracker_matches_naive_reevaluation(stream in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 5), 6), w in 1usize..4) {
            let f = predict_focused(&stream, w, 6).unwrap();
            prop_assert_eq!(&f, &predict_focused(&stream, w, 6).unwrap());
            prop_assert!(!f.focused.is_empty() && f.cutoff >= 1 && f.cutoff <= 6);
            if f.focused.len() < 5 || f.cutoff < 6 {
                let mut cum = vec![0.0; 5];
                for layer in &stream[..f.cutoff] {
                    for (c, s) in cum.iter_mut().zip(layer) { *c += s; }
                }
                prop_assert_eq!(hand_focus(&cum), f.focused.clone());
            }
        }
    }

    fn payload(tokens: &[TokenId], cfg: &ModelConfig) -> ChunkCache {
        let layers = (0..cfg.n_layers)
            .map(|_| KvLayer {
                keys: Array2::zeros((tokens.len(), cfg.d_model)),
                values: Array2::zeros((tokens.len(), cfg.d_model)),
            })
            .collect();
        ChunkCache::new(tokens.to_vec(), layers, 0).unwrap()
    }

    fn add(
        store: &mut MetadataStore,
        tokens: &[TokenId],
        prefix: Vec<ChunkHash>,
        weights: Vec<f64>,
        a: f64,
        b: f64,
    ) -> VariantId {
        let cfg = ModelConfig::default();
        store
            .insert(
                chunk_hash(tokens).unwrap(),
                NewVariant {
                    prefix: PrefixContext::new(prefix, weights).unwrap(),
                    a_bar: a,
                    b_bar: b,
                    token_scores: (0..tokens.len()).map(|i| (i * 7 % 5) as f64).collect(),
                    payload: payload(tokens, &cfg),
                },
            )
            .unwrap()
            .id
    }

    #[test]
    fn all_miss_and_exact_prefix_plans() {
        let chunks: Vec<Vec<TokenId>> = vec![vec![1, 2, 3], vec![4, 5], vec![6, 7, 8, 9]];
        let mut store = MetadataStore::new(StoreConfig::default()).unwrap();
        let plan = build_plan(&chunks, 2, &store, 1.0, 4, 3).unwrap();
        assert_eq!(plan.n_hits(), 0);
        assert_eq!(plan.question, 9..11);
        assert_eq!(plan.positions, (0..11).collect::<Vec<_>>());

        let hashes: Vec<_> = chunks.iter().map(|c| chunk_hash(c).unwrap()).collect();
        for (i, c) in chunks.iter().enumerate() {
            add(&mut store, c, hashes[..i].to_vec(), vec![0.3; i], 0.2, 0.1);
        }
        let plan = build_plan(&chunks, 2, &store, 1.0, 4, 3).unwrap();
        assert_eq!(plan.n_hits(), 3);
        assert!(plan.recompute_tokens().is_empty());
        for c in &plan.chunks {
            assert_eq!(c.cfo(), Some(0.0));
        }
        let json = plan.to_json().unwrap();
        let back: InferencePlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn chooses_min_cfo_variant() {
        let chunks: Vec<Vec<TokenId>> = vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![7, 8, 9, 10]];
        let h: Vec<_> = chunks.iter().map(|c| chunk_hash(c).unwrap()).collect();
        let mut store = MetadataStore::new(StoreConfig::default()).unwrap();
        add(
            &mut store,
            &chunks[3],
            vec![ChunkHash(99)],
            vec![1.0],
            0.5,
            0.1,
        );
        add(
            &mut store,
            &chunks[3],
            vec![h[1], h[0]],
            vec![0.2, 0.4],
            0.1,
            0.3,
        );
        add(&mut store, &chunks[3], vec![h[2]], vec![0.5], 0.3, 0.3);
        for alpha in [0.5, 1.0, 2.0] {
            let plan = build_plan(&chunks, 1, &store, alpha, 4, 3).unwrap();
            let prefix = &h[..3];
            let oracle = store
                .lookup(h[3])
                .into_iter()
                .map(|v| {
                    (
                        ReuseScore::evaluate(&v.meta.prefix, v.meta.cci, prefix, alpha)
                            .unwrap()
                            .cfo,
                        v.id(),
                    )
                })
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                .unwrap();
            match &plan.chunks[3].decision {
                ChunkDecision::Hit {
                    variant,
                    score,
                    recompute,
                    ..
                } => {
                    assert_eq!((*variant, score.cfo), (oracle.1, oracle.0));
                    assert_eq!(recompute.len(), recompute_count(score.cfo, 4));
                }
                ChunkDecision::Miss => panic!("expected a hit"),
            }
        }
    }

    #[test]
    fn early_termination_edits_unfocused_hits_only() {
        let chunks: Vec<Vec<TokenId>> = vec![vec![1, 2], vec![3, 4], vec![5, 6]];
        let mut store = MetadataStore::new(StoreConfig::default()).unwrap();
        add(
            &mut store,
            &chunks[0],
            vec![ChunkHash(50)],
            vec![1.0],
            0.4,
            0.1,
        );
        add(
            &mut store,
            &chunks[1],
            vec![ChunkHash(50)],
            vec![1.0],
            0.4,
            0.1,
        );
        let plan = build_plan(&chunks, 1, &store, 1.0, 4, 3).unwrap();
        assert_eq!(
            apply_early_termination(plan.clone(), &FocusResult::all(3, 4, false)),
            plan
        );
        let cut = apply_early_termination(
            plan.clone(),
            &FocusResult {
                focused: vec![1],
                cutoff: 2,
                degenerate: false,
            },
        );
        let depth = |p: &InferencePlan, i: usize| match &p.chunks[i].decision {
            ChunkDecision::Hit { depth, .. } => Some(*depth),
            ChunkDecision::Miss => None,
        };
        assert_eq!(
            (depth(&cut, 0), depth(&cut, 1), depth(&cut, 2)),
            (Some(2), Some(4), None)
        );
    }

    #[test]
    fn hook_matches_offline_termination() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg.clone()).unwrap();
        let chunks: Vec<Vec<TokenId>> = (0..4)
            .map(|c| (0..6).map(|t| (c * 31 + t * 7) % 256).collect())
            .collect();
        let question: Vec<TokenId> = vec![200, 201, 202];
        // Caches computed under an unrelated prefix so every chunk is a HIT
        // with partial recompute.
        let mut store = MetadataStore::new(StoreConfig::default()).unwrap();
        for c in &chunks {
            let mut toks: Vec<TokenId> = vec![9, 8, 7];
            toks.extend(c);
            let out = model
                .prefill(&PrefillRequest::plain(&toks, cfg.n_layers))
                .unwrap();
            let cache = ChunkCache::from_prompt_kv(&out.kv, c, 3..3 + c.len()).unwrap();
            store
                .insert(
                    chunk_hash(c).unwrap(),
                    NewVariant {
                        prefix: PrefixContext::new(vec![ChunkHash(1)], vec![1.0]).unwrap(),
                        a_bar: 0.3,
                        b_bar: 0.3,
                        token_scores: (0..c.len()).map(|i| i as f64).collect(),
                        payload: cache,
                    },
                )
                .unwrap();
        }
        let plan = build_plan(&chunks, question.len(), &store, 1.0, cfg.n_layers, 1).unwrap();
        let req = plan.to_request(&chunks, &question, &store).unwrap();
        let mut hook = FocusHook::new(&plan).unwrap();
        let online = model.prefill_with_hook(&req, &mut hook).unwrap();
        let focus = hook.focus();
        let offline_plan = apply_early_termination(plan.clone(), &focus);
        let offline = model
            .prefill(&offline_plan.to_request(&chunks, &question, &store).unwrap())
            .unwrap();
        assert_eq!(online.depth, offline.depth);
        let diff = (&online.question_hidden() - &offline.question_hidden()).mapv(f64::abs);
        assert!(diff.iter().all(|&x| x < 1e-12));
    }
}
