//! Request traces: JSONL I/O and synthetic Zipf workloads.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub chunks: Vec<u64>,
    pub question: Vec<TokenId>,
    pub arrival_s: f64,
}

pub fn validate_trace(trace: &[TraceRecord]) -> Result<()> {
    let mut last = f64::NEG_INFINITY;
    for r in trace {
        if r.chunks.is_empty() {
            return Err(Error::Argument(format!(
                "request {} retrieves no chunks",
                r.id
            )));
        }
        let distinct: HashSet<_> = r.chunks.iter().collect();
        if distinct.len() != r.chunks.len() {
            return Err(Error::Argument(format!("request {} repeats a chunk", r.id)));
        }
        if !(r.arrival_s >= last) {
            return Err(Error::Argument(format!(
                "request {} arrives out of order",
                r.id
            )));
        }
        last = r.arrival_s;
    }
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    validate_trace(&out)?;
    Ok(out)
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_chunks: usize,
    pub zipf_s: f64,
    pub k: usize,
    pub n_requests: usize,
    pub question_len: usize,
    pub vocab_size: usize,
    /// Mean arrivals per second.
    pub rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_chunks: 500,
            zipf_s: 1.0,
            k: 5,
            n_requests: 500,
            question_len: 8,
            vocab_size: 256,
            rate: 4.0,
            seed: 0,
        }
    }
}

/// Requests of `k` distinct chunks drawn by Zipf popularity without
/// replacement (chunk id = popularity rank), fresh question tokens and
/// Poisson arrivals.
pub fn gen_synthetic(cfg: &GenConfig) -> Result<Vec<TraceRecord>> {
    if cfg.k == 0 || cfg.k > cfg.n_chunks {
        return Err(Error::Argument(format!(
            "k = {} must be in 1..={} chunks",
            cfg.k, cfg.n_chunks
        )));
    }
    if !(cfg.zipf_s >= 0.0) || !(cfg.rate > 0.0) || cfg.vocab_size == 0 {
        return Err(Error::Argument(
            "zipf_s >= 0, rate > 0 and a vocabulary are required".into(),
        ));
    }
    let weights: Vec<f64> = (1..=cfg.n_chunks)
        .map(|r| (r as f64).powf(-cfg.zipf_s))
        .collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::Argument(e.to_string()))?;
    let gaps = Exp::new(cfg.rate).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut t = 0.0;
    let mut trace = Vec::with_capacity(cfg.n_requests);
    for id in 0..cfg.n_requests as u64 {
        // Redrawing duplicates samples sequentially without replacement.
        let mut chunks: Vec<u64> = Vec::with_capacity(cfg.k);
        while chunks.len() < cfg.k {
            let c = pick.sample(&mut rng) as u64;
            if !chunks.contains(&c) {
                chunks.push(c);
            }
        }
        let question = (0..cfg.question_len)
            .map(|_| rng.random_range(0..cfg.vocab_size as TokenId))
            .collect();
        t += gaps.sample(&mut rng);
        trace.push(TraceRecord {
            id,
            chunks,
            question,
            arrival_s: t,
        });
    }
    Ok(trace)
}

/// Share of all retrievals that go to the most retrieved `fraction` of the
/// `n_chunks` corpus.
pub fn top_share(trace: &[TraceRecord], n_chunks: usize, fraction: f64) -> f64 {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for r in trace {
        for c in &r.chunks {
            *counts.entry(*c).or_insert(0) += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let mut sorted: Vec<usize> = counts.into_values().collect();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top = ((fraction * n_chunks as f64).ceil() as usize).max(1);
    sorted.iter().take(top).sum::<usize>() as f64 / total as f64
}

/// Grid search for the Zipf exponent whose trace puts `target` of the
/// retrievals on the top 5% of chunks.
pub fn tune_zipf(base: &GenConfig, target: f64) -> Result<(f64, f64)> {
    let mut best = (0.0, f64::INFINITY, 0.0);
    for step in 0..=60 {
        let s = step as f64 * 0.05;
        let trace = gen_synthetic(&GenConfig {
            zipf_s: s,
            ..base.clone()
        })?;
        let share = top_share(&trace, base.n_chunks, 0.05);
        let err = (share - target).abs();
        if err < best.1 {
            best = (s, err, share);
        }
    }
    Ok((best.0, best.2))
}
