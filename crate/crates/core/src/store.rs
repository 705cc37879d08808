//! Metadata store for chunk-cache variants.
//!
//! Chunks are keyed by a digest of their raw token ids. Each chunk may hold
//! several variants, one per distinct creation prefix. Total variants are
//! capped at `n_chunks * variants_per_chunk`; any split between chunks is
//! allowed. Every reuse bumps the variant's frequency-reuse score
//! `f_r += 1 / max(cfo, 0.01)` and overflow evicts the lowest `f_r` first.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{read_kv, write_kv, ChunkCache, KvLayer, TokenId};
use crate::scoring::{self, PrefixContext};
use crate::stats::ChunkStats;

pub const BLOCK_SIZE: usize = 16;
pub const CFO_FLOOR: f64 = 0.01;

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkHash(pub u64);

impl fmt::Display for ChunkHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// First eight bytes of SHA-256 over the little-endian token ids.
pub fn chunk_hash(tokens: &[TokenId]) -> Result<ChunkHash> {
    if tokens.is_empty() {
        return Err(Error::Argument("cannot hash an empty chunk".into()));
    }
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    Ok(ChunkHash(u64::from_le_bytes(head)))
}

/// Pads the cache rows with zeros up to the next multiple of `block_size`.
/// Existing padding is discarded first, so padding twice is a no-op.
pub fn pad_to_blocks(cache: ChunkCache, block_size: usize) -> Result<(ChunkCache, usize)> {
    if block_size == 0 {
        return Err(Error::Argument("block size must be positive".into()));
    }
    let (tokens, layers, _) = cache.into_parts();
    if layers.is_empty() {
        return Err(Error::Argument("cannot pad an empty payload".into()));
    }
    let n = tokens.len();
    let pad = n.div_ceil(block_size) * block_size - n;
    let layers = layers
        .into_iter()
        .map(|l| {
            let d = l.d_model();
            let zeros = Array2::<f64>::zeros((pad, d));
            let keys = concatenate![Axis(0), l.keys.slice(ndarray::s![..n, ..]), zeros.view()];
            let values = concatenate![Axis(0), l.values.slice(ndarray::s![..n, ..]), zeros.view()];
            KvLayer { keys, values }
        })
        .collect();
    Ok((ChunkCache::new(tokens, layers, pad)?, pad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    /// Baseline number of distinct chunks.
    pub n_chunks: usize,
    /// Baseline variants per chunk.
    pub variants_per_chunk: usize,
    #[serde(default = "default_block")]
    pub block_size: usize,
    /// Variants removed per overflow.
    #[serde(default = "default_batch")]
    pub eviction_batch: usize,
}

fn default_block() -> usize {
    BLOCK_SIZE
}

fn default_batch() -> usize {
    1
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            n_chunks: 64,
            variants_per_chunk: 4,
            block_size: BLOCK_SIZE,
            eviction_batch: 1,
        }
    }
}

impl StoreConfig {
    pub fn capacity(&self) -> usize {
        self.n_chunks * self.variants_per_chunk
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity() == 0 {
            return Err(Error::Config("store capacity must be at least 1".into()));
        }
        if self.block_size == 0 || self.eviction_batch == 0 {
            return Err(Error::Config(
                "block_size and eviction_batch must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub type VariantId = u64;

/// Everything needed to register a freshly computed chunk cache.
#[derive(Debug, Clone)]
pub struct NewVariant {
    pub prefix: PrefixContext,
    pub a_bar: f64,
    pub b_bar: f64,
    pub token_scores: Vec<f64>,
    pub payload: ChunkCache,
}

impl NewVariant {
    pub fn from_stats(stats: ChunkStats, payload: ChunkCache) -> Self {
        Self {
            prefix: PrefixContext {
                ids: stats.prefix,
                weights: stats.prefix_inter,
            },
            a_bar: stats.a_bar,
            b_bar: stats.b_bar,
            token_scores: stats.token_scores,
            payload,
        }
    }
}

/// Persisted metadata of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMeta {
    pub id: VariantId,
    pub chunk: ChunkHash,
    pub prefix: PrefixContext,
    pub a_bar: f64,
    pub b_bar: f64,
    pub cci: f64,
    pub token_scores: Vec<f64>,
    pub f_r: f64,
    pub created_at: u64,
    pub tokens: Vec<TokenId>,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub meta: VariantMeta,
    pub payload: Arc<ChunkCache>,
}

impl Variant {
    pub fn id(&self) -> VariantId {
        self.meta.id
    }

    pub fn n_tokens(&self) -> usize {
        self.meta.token_scores.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertOutcome {
    pub id: VariantId,
    pub replaced: bool,
    pub evicted: Vec<VariantId>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: StoreConfig,
    clock: u64,
    next_id: VariantId,
    variants: Vec<VariantMeta>,
}

/// Variant registry. Cloning is cheap (payloads are shared) and gives a
/// consistent snapshot for planning.
#[derive(Debug, Clone)]
pub struct MetadataStore {
    config: StoreConfig,
    variants: BTreeMap<VariantId, Variant>,
    by_chunk: HashMap<ChunkHash, Vec<VariantId>>,
    next_id: VariantId,
    clock: u64,
}

impl MetadataStore {
    pub fn new(config: StoreConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            variants: BTreeMap::new(),
            by_chunk: HashMap::new(),
            next_id: 0,
            clock: 0,
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }

    pub fn n_chunks(&self) -> usize {
        self.by_chunk.len()
    }

    pub fn get(&self, id: VariantId) -> Option<&Variant> {
        self.variants.get(&id)
    }

    pub fn variants(&self) -> impl Iterator<Item = &Variant> {
        self.variants.values()
    }

    pub fn lookup(&self, hash: ChunkHash) -> Vec<&Variant> {
        self.by_chunk
            .get(&hash)
            .map(|ids| ids.iter().map(|id| &self.variants[id]).collect())
            .unwrap_or_default()
    }

    /// Registers a variant. An existing variant with the same chunk and
    /// prefix order is updated in place and keeps its id and `f_r`.
    pub fn insert(&mut self, hash: ChunkHash, new: NewVariant) -> Result<InsertOutcome> {
        new.prefix.validate()?;
        if new.token_scores.len() != new.payload.n_tokens() {
            return Err(Error::Shape(format!(
                "{} token scores for a {}-token chunk",
                new.token_scores.len(),
                new.payload.n_tokens()
            )));
        }
        if new.token_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Argument("token scores must be finite".into()));
        }
        let cci = scoring::cci(new.a_bar, new.b_bar)?;
        let (payload, pad) = pad_to_blocks(new.payload, self.config.block_size)?;
        self.clock += 1;

        let existing = self.by_chunk.get(&hash).and_then(|ids| {
            ids.iter()
                .copied()
                .find(|id| self.variants[id].meta.prefix.ids == new.prefix.ids)
        });
        if let Some(id) = existing {
            let v = self.variants.get_mut(&id).expect("indexed variant is live");
            v.meta.prefix = new.prefix;
            v.meta.a_bar = new.a_bar;
            v.meta.b_bar = new.b_bar;
            v.meta.cci = cci;
            v.meta.token_scores = new.token_scores;
            v.meta.tokens = payload.tokens().to_vec();
            v.meta.pad = pad;
            v.payload = Arc::new(payload);
            return Ok(InsertOutcome {
                id,
                replaced: true,
                evicted: Vec::new(),
            });
        }

        let id = self.next_id;
        self.next_id += 1;
        let meta = VariantMeta {
            id,
            chunk: hash,
            prefix: new.prefix,
            a_bar: new.a_bar,
            b_bar: new.b_bar,
            cci,
            token_scores: new.token_scores,
            f_r: 0.0,
            created_at: self.clock,
            tokens: payload.tokens().to_vec(),
            pad,
        };
        self.variants.insert(
            id,
            Variant {
                meta,
                payload: Arc::new(payload),
            },
        );
        self.by_chunk.entry(hash).or_default().push(id);
        let mut evicted = Vec::new();
        if self.len() > self.config.capacity() {
            let over = self.len() - self.config.capacity();
            evicted = self.evict(over.max(self.config.eviction_batch));
        }
        Ok(InsertOutcome {
            id,
            replaced: false,
            evicted,
        })
    }

    /// Credits a reuse: `f_r += 1 / max(cfo, 0.01)`.
    pub fn touch(&mut self, id: VariantId, cfo: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&cfo) {
            return Err(Error::Argument(format!("cfo = {cfo} is outside [0, 1]")));
        }
        let v = self.variants.get_mut(&id).ok_or(Error::NotFound(id))?;
        v.meta.f_r += 1.0 / cfo.max(CFO_FLOOR);
        Ok(v.meta.f_r)
    }

    /// Removes the `count` variants with the smallest `f_r`, oldest first on
    /// ties.
    pub fn evict(&mut self, count: usize) -> Vec<VariantId> {
        let mut order: Vec<(f64, u64, VariantId)> = self
            .variants
            .values()
            .map(|v| (v.meta.f_r, v.meta.created_at, v.meta.id))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let victims: Vec<VariantId> = order.into_iter().take(count).map(|(_, _, id)| id).collect();
        for id in &victims {
            self.remove(*id);
        }
        victims
    }

    fn remove(&mut self, id: VariantId) {
        if let Some(v) = self.variants.remove(&id) {
            if let Some(ids) = self.by_chunk.get_mut(&v.meta.chunk) {
                ids.retain(|x| *x != id);
                if ids.is_empty() {
                    self.by_chunk.remove(&v.meta.chunk);
                }
            }
        }
    }

    /// Histogram: variants-per-chunk -> number of chunks with that count.
    pub fn census(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for ids in self.by_chunk.values() {
            *hist.entry(ids.len()).or_insert(0) += 1;
        }
        hist
    }

    pub fn write_census_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["variants_per_chunk", "chunks"])?;
        for (k, v) in self.census() {
            out.write_record([k.to_string(), v.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("<census csv>", e))
    }

    /// Writes `manifest.json` and one `<id>.kv` payload file per variant.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for v in self.variants.values() {
            let path = dir.join(format!("{}.kv", v.meta.id));
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            write_kv(&mut w, v.payload.layers())?;
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let manifest = Manifest {
            config: self.config,
            clock: self.clock,
            next_id: self.next_id,
            variants: self.variants.values().map(|v| v.meta.clone()).collect(),
        };
        let path = dir.join(MANIFEST);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_reader(BufReader::new(f))?;
        let mut store = Self::new(manifest.config)?;
        store.clock = manifest.clock;
        store.next_id = manifest.next_id;
        for meta in manifest.variants {
            let path = dir.join(format!("{}.kv", meta.id));
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let layers = read_kv(BufReader::new(f))?;
            let payload = ChunkCache::new(meta.tokens.clone(), layers, meta.pad)?;
            store.by_chunk.entry(meta.chunk).or_default().push(meta.id);
            store.variants.insert(
                meta.id,
                Variant {
                    meta,
                    payload: Arc::new(payload),
                },
            );
        }
        if store.len() > store.config.capacity() {
            return Err(Error::Format(format!(
                "snapshot holds {} variants, capacity is {}",
                store.len(),
                store.config.capacity()
            )));
        }
        Ok(store)
    }
}
