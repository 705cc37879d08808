#![allow(dead_code)]

use std::sync::Arc;

use chunkcache::harness::deviation;
use chunkcache::model::{ChunkCache, Model, ModelConfig, PrefillRequest, TokenId};
use chunkcache::stats::{AttentionStats, ChunkSpan, ChunkStats};
use chunkcache::store::chunk_hash;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_model() -> Model {
    Model::new(ModelConfig::default()).unwrap()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n)
        .map(|_| rng.random_range(0..vocab as TokenId))
        .collect()
}

/// Cache and statistics of `chunk` computed right after `prefix`.
pub fn cached_under(
    model: &Model,
    prefix: &[TokenId],
    chunk: &[TokenId],
) -> (ChunkCache, ChunkStats) {
    let mut tokens = prefix.to_vec();
    tokens.extend(chunk);
    let out = model
        .prefill(&PrefillRequest::plain(&tokens, model.n_layers()))
        .unwrap();
    let p = prefix.len();
    let spans = vec![
        ChunkSpan::new(chunk_hash(prefix).unwrap(), 0, p),
        ChunkSpan::new(chunk_hash(chunk).unwrap(), p, chunk.len()),
    ];
    let stats = AttentionStats::compute(&out.attention, &spans).unwrap();
    let cache = ChunkCache::from_prompt_kv(&out.kv, chunk, p..p + chunk.len()).unwrap();
    (cache, stats.chunk_record(&spans, 1))
}

/// A prompt of chunks, each reused from a cache built under a foreign
/// prefix, followed by a fresh question.
pub struct ReusePrompt {
    pub chunks: Vec<Vec<TokenId>>,
    pub caches: Vec<Arc<ChunkCache>>,
    pub stats: Vec<ChunkStats>,
    pub question: Vec<TokenId>,
}

impl ReusePrompt {
    pub fn random(model: &Model, seed: u64, k: usize, chunk_len: usize, q_len: usize) -> Self {
        let vocab = model.config().vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chunks: Vec<_> = (0..k)
            .map(|_| random_tokens(&mut rng, chunk_len, vocab))
            .collect();
        let mut caches = Vec::new();
        let mut stats = Vec::new();
        for c in &chunks {
            let prefix = random_tokens(&mut rng, chunk_len, vocab);
            let (cache, s) = cached_under(model, &prefix, c);
            caches.push(Arc::new(cache));
            stats.push(s);
        }
        let question = random_tokens(&mut rng, q_len, vocab);
        Self {
            chunks,
            caches,
            stats,
            question,
        }
    }

    pub fn oracle(&self, model: &Model) -> Array2<f64> {
        let req = PrefillRequest::builder(model.n_layers())
            .fresh(&self.chunks.concat())
            .question(&self.question)
            .build()
            .unwrap();
        model.prefill(&req).unwrap().question_hidden()
    }

    /// Question hidden states when chunk `i` recomputes `recompute[i]`.
    pub fn reuse(&self, model: &Model, recompute: &[Vec<usize>]) -> Array2<f64> {
        let mut b = PrefillRequest::builder(model.n_layers());
        for (cache, r) in self.caches.iter().zip(recompute) {
            b = b.injected(Arc::clone(cache), r);
        }
        let req = b.question(&self.question).build().unwrap();
        model.prefill(&req).unwrap().question_hidden()
    }

    pub fn deviation(&self, model: &Model, oracle: &Array2<f64>, recompute: &[Vec<usize>]) -> f64 {
        deviation(&self.reuse(model, recompute), oracle)
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for t in i..=j {
                r[idx[t]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
