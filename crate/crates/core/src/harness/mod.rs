//! Trace replay. Every request is planned under one of four policies,
//! executed on the reference model, compared against a plain full prefill
//! and fed back into the store; a simulated timeline gives its TTFT.

mod report;
mod trace;

pub use report::{write_comparison_csv, Report, RequestRow, Summary};
pub use trace::{
    gen_synthetic, read_trace, top_share, tune_zipf, validate_trace, write_trace, GenConfig,
    TraceRecord,
};

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChunkCache, Model, ModelConfig, PrefillRequest, TokenId};
use crate::planner::{
    apply_early_termination, build_plan, ChunkDecision, FocusHook, InferencePlan, PlannedChunk,
    DEFAULT_WINDOW,
};
use crate::scoring::{self, CalibrationRow, ReuseScore};
use crate::stats::AttentionStats;
use crate::store::{chunk_hash, MetadataStore, NewVariant, StoreConfig};
use crate::tiers::{fallback_decision, place_and_migrate, simulate, Placed, Placement, TierConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    /// Leading requests left out of every aggregate.
    pub warmup: usize,
    /// Consecutive stable layers needed to fix the focused chunks.
    pub window: usize,
    pub early_termination: bool,
    /// Demote slow-tier hits to fresh compute when that is faster.
    pub fallback: bool,
    pub chunk_len_min: usize,
    pub chunk_len_max: usize,
    pub corpus_seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            warmup: 20,
            window: DEFAULT_WINDOW,
            early_termination: true,
            fallback: true,
            chunk_len_min: 16,
            chunk_len_max: 64,
            corpus_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub store: StoreConfig,
    #[serde(default = "default_tiers")]
    pub tiers: TierConfig,
    #[serde(default)]
    pub harness: HarnessConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            store: StoreConfig::default(),
            tiers: default_tiers(),
            harness: HarnessConfig::default(),
        }
    }
}

/// Demo tiers sized for the default model: a five-chunk request of
/// 40-token chunks (48 padded rows) over 4 layers of width 64.
fn default_tiers() -> TierConfig {
    let variant = 48 * 64 * 2 * 4 * 4;
    let mut t = TierConfig::demo(5 * variant, 32 * variant as u64, 128 * variant as u64);
    t.t_token = 1e-4;
    t
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.store.validate()?;
        self.tiers.validate()?;
        let h = &self.harness;
        if h.chunk_len_min == 0 || h.chunk_len_min > h.chunk_len_max || h.window == 0 {
            return Err(Error::Config("invalid chunk length range or window".into()));
        }
        Ok(())
    }
}

/// Deterministic chunk texts: chunk `id` is a random token sequence drawn
/// from its own stream of the corpus seed.
#[derive(Debug, Clone)]
pub struct Corpus {
    seed: u64,
    len_min: usize,
    len_max: usize,
    vocab: usize,
    cache: HashMap<u64, Vec<TokenId>>,
}

impl Corpus {
    pub fn new(seed: u64, len_min: usize, len_max: usize, vocab: usize) -> Self {
        Self {
            seed,
            len_min,
            len_max,
            vocab,
            cache: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &Config) -> Self {
        let h = &cfg.harness;
        Self::new(
            h.corpus_seed,
            h.chunk_len_min,
            h.chunk_len_max,
            cfg.model.vocab_size,
        )
    }

    pub fn tokens(&mut self, id: u64) -> &[TokenId] {
        let (seed, lo, hi, vocab) = (self.seed, self.len_min, self.len_max, self.vocab);
        self.cache.entry(id).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            let len = rng.random_range(lo..=hi);
            (0..len)
                .map(|_| rng.random_range(0..vocab as TokenId))
                .collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Cachecraft,
    FullRecompute,
    FullCacheNaive,
    ExactPrefix,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Cachecraft,
        Policy::FullRecompute,
        Policy::FullCacheNaive,
        Policy::ExactPrefix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Cachecraft => "cachecraft",
            Policy::FullRecompute => "full_recompute",
            Policy::FullCacheNaive => "full_cache_naive",
            Policy::ExactPrefix => "exact_prefix",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown policy {s:?}")))
    }
}

/// Mean over rows of the L2 distance between matching rows.
pub fn deviation(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let d = a - b;
    d.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).sum::<f64>() / a.nrows() as f64
}

/// Outcome of one replay: the report plus the final store, if the policy
/// keeps one.
#[derive(Debug, Clone)]
pub struct Replay {
    pub report: Report,
    pub store: Option<MetadataStore>,
}

/// Exact-prefix baseline: a trie over chunk-id sequences, unbounded.
#[derive(Debug, Default)]
struct PrefixTrie {
    nodes: HashSet<Vec<u64>>,
}

impl PrefixTrie {
    fn longest(&self, chunks: &[u64]) -> usize {
        (1..=chunks.len())
            .take_while(|&j| self.nodes.contains(&chunks[..j]))
            .last()
            .unwrap_or(0)
    }

    fn insert(&mut self, chunks: &[u64]) {
        for j in 1..=chunks.len() {
            self.nodes.insert(chunks[..j].to_vec());
        }
    }
}

/// Runs traces against one model and configuration. Full-prefill oracle
/// outputs are cached per request id, so replays of the same trace under
/// different policies share them.
pub struct Replayer<'m> {
    model: &'m Model,
    config: Config,
    corpus: Corpus,
    oracle: HashMap<u64, Array2<f64>>,
}

struct Executed {
    hits: usize,
    computed: usize,
    deviation: f64,
    cfos: Vec<f64>,
    plan: InferencePlan,
}

impl<'m> Replayer<'m> {
    pub fn new(model: &'m Model, config: Config) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Config(
                "model does not match the configured model".into(),
            ));
        }
        let corpus = Corpus::from_config(&config);
        Ok(Self {
            model,
            config,
            corpus,
            oracle: HashMap::new(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn chunk_tokens(&mut self, chunks: &[u64]) -> Vec<Vec<TokenId>> {
        chunks
            .iter()
            .map(|&c| self.corpus.tokens(c).to_vec())
            .collect()
    }

    fn oracle(&mut self, r: &TraceRecord, chunks: &[Vec<TokenId>]) -> Result<Array2<f64>> {
        if let Some(h) = self.oracle.get(&r.id) {
            return Ok(h.clone());
        }
        let mut tokens: Vec<TokenId> = chunks.concat();
        let start = tokens.len();
        tokens.extend(&r.question);
        let req = PrefillRequest::builder(self.model.n_layers())
            .fresh(&tokens[..start])
            .question(&r.question)
            .build()?;
        let h = self.model.prefill(&req)?.question_hidden();
        self.oracle.insert(r.id, h.clone());
        Ok(h)
    }

    pub fn replay(&mut self, trace: &[TraceRecord], policy: Policy, alpha: f64) -> Result<Replay> {
        validate_trace(trace)?;
        if !(alpha > 0.0) {
            return Err(Error::Argument(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        let n_layers = self.model.n_layers();
        let uses_store = matches!(policy, Policy::Cachecraft | Policy::FullCacheNaive);
        let mut store = MetadataStore::new(self.config.store)?;
        let mut trie = PrefixTrie::default();
        let mut free_at = 0.0f64;
        let mut rows = Vec::with_capacity(trace.len());
        for (idx, r) in trace.iter().enumerate() {
            let chunks = self.chunk_tokens(&r.chunks);
            let chunk_total: usize = chunks.iter().map(Vec::len).sum();
            let total = chunk_total + r.question.len();
            let start = free_at.max(r.arrival_s);
            let queue_wait = start - r.arrival_s;

            let (exec, placement) = match policy {
                Policy::FullRecompute => {
                    let plan = build_plan(
                        &chunks,
                        r.question.len(),
                        &MetadataStore::new(self.config.store)?,
                        alpha,
                        n_layers,
                        1,
                    )?;
                    let exec = Executed {
                        hits: 0,
                        computed: total,
                        deviation: 0.0,
                        cfos: Vec::new(),
                        plan,
                    };
                    (exec, Placement::new())
                }
                Policy::ExactPrefix => {
                    let j = trie.longest(&r.chunks);
                    trie.insert(&r.chunks);
                    let exec = self.exact_prefix(&chunks, r.question.len(), j)?;
                    let placement = exec
                        .plan
                        .chunks
                        .iter()
                        .filter_map(|c| match &c.decision {
                            ChunkDecision::Hit { variant, .. } => Some((
                                *variant,
                                Placed {
                                    tier: 0,
                                    bytes_per_layer: 0,
                                },
                            )),
                            ChunkDecision::Miss => None,
                        })
                        .collect();
                    (exec, placement)
                }
                Policy::Cachecraft | Policy::FullCacheNaive => {
                    let oracle = self.oracle(r, &chunks)?;
                    let placement = place_and_migrate(&store, &self.config.tiers)?;
                    let exec = self.reuse(
                        r, &chunks, &oracle, &mut store, &placement, policy, alpha, queue_wait,
                    )?;
                    (exec, placement)
                }
            };
            let timeline = simulate(&exec.plan, &placement, &self.config.tiers, queue_wait, None)?;
            free_at = r.arrival_s + timeline.ttft;
            if idx < self.config.harness.warmup {
                continue;
            }
            rows.push(RequestRow {
                id: r.id,
                k: r.chunks.len(),
                hits: exec.hits,
                tokens_total: total,
                tokens_computed: exec.computed,
                tokens_reused: total - exec.computed,
                recompute_fraction: exec.computed as f64 / total as f64,
                deviation: exec.deviation,
                mean_cfo: (!exec.cfos.is_empty())
                    .then(|| exec.cfos.iter().sum::<f64>() / exec.cfos.len() as f64),
                queue_wait,
                ttft: timeline.ttft,
            });
        }
        Ok(Replay {
            report: Report::new(policy.name(), alpha, self.config.harness.warmup, rows),
            store: uses_store.then_some(store),
        })
    }

    /// The first `j` chunks come from a bit-identical earlier prefix, so
    /// their KV equals a full prefill and the output deviation is zero.
    fn exact_prefix(&self, chunks: &[Vec<TokenId>], q: usize, j: usize) -> Result<Executed> {
        let empty = MetadataStore::new(self.config.store)?;
        let mut plan = build_plan(chunks, q, &empty, 1.0, self.model.n_layers(), 1)?;
        for (i, c) in plan.chunks.iter_mut().take(j).enumerate() {
            c.decision = ChunkDecision::Hit {
                variant: i as u64,
                recompute: Vec::new(),
                score: ReuseScore {
                    beta: 1.0,
                    gamma: 0.0,
                    beta_prime: 1.0,
                    cci: 0.5,
                    cfo: 0.0,
                },
                depth: self.model.n_layers(),
            };
        }
        let reused: usize = chunks[..j].iter().map(Vec::len).sum();
        let total = chunks.iter().map(Vec::len).sum::<usize>() + q;
        Ok(Executed {
            hits: j,
            computed: total - reused,
            deviation: 0.0,
            cfos: vec![0.0; j],
            plan,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn reuse(
        &mut self,
        r: &TraceRecord,
        chunks: &[Vec<TokenId>],
        oracle: &Array2<f64>,
        store: &mut MetadataStore,
        placement: &Placement,
        policy: Policy,
        alpha: f64,
        queue_wait: f64,
    ) -> Result<Executed> {
        let h = &self.config.harness;
        let n_layers = self.model.n_layers();
        let mut plan = build_plan(chunks, r.question.len(), store, alpha, n_layers, h.window)?;
        let naive = policy == Policy::FullCacheNaive;
        if naive {
            for c in &mut plan.chunks {
                if let ChunkDecision::Hit { recompute, .. } = &mut c.decision {
                    recompute.clear();
                }
            }
        } else if h.fallback {
            plan = fallback_decision(&plan, placement, &self.config.tiers, queue_wait)?.0;
        }
        let req = plan.to_request(chunks, &r.question, store)?;
        let out = if !naive && h.early_termination {
            let mut hook = FocusHook::new(&plan)?;
            let out = self.model.prefill_with_hook(&req, &mut hook)?;
            plan = apply_early_termination(plan, &hook.focus());
            out
        } else {
            self.model.prefill(&req)?
        };
        let computed = out.depth.iter().filter(|&&d| d > 0).count();
        let dev = deviation(&out.question_hidden(), oracle);

        let mut cfos = Vec::new();
        for c in &plan.chunks {
            if let ChunkDecision::Hit { variant, score, .. } = &c.decision {
                store.touch(*variant, score.cfo)?;
                cfos.push(score.cfo);
            }
        }
        let spans = plan.spans();
        let needs_stats = plan
            .chunks
            .iter()
            .any(|c| fully_computed(c, &out.depth, n_layers));
        if needs_stats {
            let stats = AttentionStats::compute(&out.attention, &spans)?;
            for (i, c) in plan.chunks.iter().enumerate() {
                if !fully_computed(c, &out.depth, n_layers) {
                    continue;
                }
                let payload = ChunkCache::from_prompt_kv(&out.kv, &chunks[i], spans[i].range())?;
                store.insert(
                    c.chunk,
                    NewVariant::from_stats(stats.chunk_record(&spans, i), payload),
                )?;
            }
        }
        Ok(Executed {
            hits: plan.n_hits(),
            computed,
            deviation: dev,
            cfos,
            plan,
        })
    }

    /// Replays the trace with `alpha` and returns `(mean CFO over hits, mean
    /// deviation)`.
    pub fn probe(&mut self, trace: &[TraceRecord], alpha: f64) -> Result<(f64, f64)> {
        let s = self
            .replay(trace, Policy::Cachecraft, alpha)?
            .report
            .summary;
        Ok((s.mean_cfo.unwrap_or(0.0), s.mean_deviation))
    }

    /// Quality of each alpha is `1 - dev / dev_naive`; picks the alpha with
    /// the least mean CFO that reaches `target`.
    pub fn calibrate(
        &mut self,
        trace: &[TraceRecord],
        grid: &[f64],
        target: f64,
    ) -> Result<(Vec<CalibrationRow>, Result<f64>)> {
        let naive = self
            .replay(trace, Policy::FullCacheNaive, 1.0)?
            .report
            .summary
            .mean_deviation;
        let rows = scoring::sweep_alpha(
            grid,
            |a| {
                let (cfo, dev) = self.probe(trace, a)?;
                Ok((cfo, quality(dev, naive)))
            },
            target,
        )?;
        let choice = scoring::choose_alpha(&rows);
        Ok((rows, choice))
    }

    /// Smallest alpha whose mean CFO over hits reaches `target`: a coarse
    /// scan in steps of 0.05, then bisection inside the bracketing step.
    /// Mean CFO is not monotone in alpha over the whole range (fully
    /// recomputed chunks become new exact-prefix variants), hence the scan.
    pub fn alpha_for_target_cfo(&mut self, trace: &[TraceRecord], target: f64) -> Result<f64> {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::Argument("target CFO must be in (0, 1)".into()));
        }
        const STEP: f64 = 0.05;
        let mut lo = 0.0;
        let mut hi = None;
        for i in 1..=80 {
            let a = STEP * i as f64;
            if self.probe(trace, a)?.0 >= target {
                hi = Some(a);
                break;
            }
            lo = a;
        }
        let mut hi = hi.ok_or_else(|| {
            Error::Argument(format!("no alpha up to 4 reaches mean CFO {target}"))
        })?;
        for _ in 0..8 {
            let mid = 0.5 * (lo + hi);
            if self.probe(trace, mid)?.0 >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }
}

/// `1 - dev / dev_naive`, or 1 when naive reuse is already exact.
pub fn quality(dev: f64, dev_naive: f64) -> f64 {
    if dev_naive > 0.0 {
        1.0 - dev / dev_naive
    } else {
        1.0
    }
}

/// A chunk whose KV in this prefill is entirely fresh: a MISS, or a HIT
/// that recomputed every token through every layer.
fn fully_computed(c: &PlannedChunk, depth: &[usize], n_layers: usize) -> bool {
    match &c.decision {
        ChunkDecision::Miss => true,
        ChunkDecision::Hit { recompute, .. } => {
            recompute.len() == c.len
                && depth[c.start..c.start + c.len]
                    .iter()
                    .all(|&d| d == n_layers)
        }
    }
}

/// Convenience: hash of a corpus chunk.
pub fn corpus_hash(corpus: &mut Corpus, id: u64) -> Result<crate::store::ChunkHash> {
    chunk_hash(corpus.tokens(id))
}
