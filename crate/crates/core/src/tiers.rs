//! Timing model for loading chunk caches from a tier hierarchy while the
//! request waits in the queue and while earlier layers compute.
//!
//! Loads share one channel and run in layer order starting at enqueue time.
//! The first `L_p` layers are fetched before layer 1 computes; after that a
//! layer's load may start once the layer `L_p + 1` places back has finished
//! computing. Tier 0 is device memory and costs nothing to load.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{ChunkDecision, InferencePlan};
use crate::scoring::fmt6;
use crate::store::{MetadataStore, VariantId};

/// Gaps below this are rounding noise.
pub const GAP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    pub name: String,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds added to every per-layer load from this tier.
    #[serde(default)]
    pub latency: f64,
    /// Byte budget; `None` means unbounded.
    #[serde(default)]
    pub budget_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    /// Ordered fast to slow.
    pub tiers: Vec<Tier>,
    /// Fixed compute time of one layer, seconds.
    pub t_prefill: f64,
    /// Extra compute time per token computed in a layer, seconds.
    #[serde(default)]
    pub t_token: f64,
    /// First-token decode time, seconds.
    #[serde(default)]
    pub decode_step: f64,
}

pub const DEMO_QUEUE_WAIT: f64 = 0.32;
const DEMO_MEDIUM_LOAD: f64 = 0.03;
const DEMO_SLOW_LOAD: f64 = 0.59;

impl TierConfig {
    /// Three tiers whose bandwidths make a request of `request_bytes` load in
    /// 0.03 s from host memory and 0.59 s from disk.
    pub fn demo(request_bytes: usize, fast_budget: u64, medium_budget: u64) -> Self {
        let b = request_bytes.max(1) as f64;
        Self {
            tiers: vec![
                Tier {
                    name: "device".into(),
                    bandwidth: f64::INFINITY,
                    latency: 0.0,
                    budget_bytes: Some(fast_budget),
                },
                Tier {
                    name: "host".into(),
                    bandwidth: b / DEMO_MEDIUM_LOAD,
                    latency: 0.0,
                    budget_bytes: Some(medium_budget),
                },
                Tier {
                    name: "disk".into(),
                    bandwidth: b / DEMO_SLOW_LOAD,
                    latency: 0.0,
                    budget_bytes: None,
                },
            ],
            t_prefill: 0.01,
            t_token: 0.0,
            decode_step: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiers.is_empty() {
            return Err(Error::Config("at least one tier is required".into()));
        }
        for t in &self.tiers {
            if !(t.bandwidth > 0.0) || !(t.latency >= 0.0) {
                return Err(Error::Config(format!(
                    "tier {}: bandwidth must be positive",
                    t.name
                )));
            }
        }
        if !(self.t_prefill > 0.0) || !(self.t_token >= 0.0) || !(self.decode_step >= 0.0) {
            return Err(Error::Config("compute times must be positive".into()));
        }
        Ok(())
    }

    fn load_time(&self, tier: usize, bytes: usize) -> Result<f64> {
        if tier == 0 {
            return Ok(0.0);
        }
        let t = self
            .tiers
            .get(tier)
            .ok_or_else(|| Error::Placement(format!("no tier {tier}")))?;
        Ok(bytes as f64 / t.bandwidth + t.latency)
    }
}

/// `max(1, ceil((L - 1)(1 - T_prefill / T_load) + 1))`, at most `L`.
pub fn preload_depth(n_layers: usize, t_prefill: f64, t_load: f64) -> Result<usize> {
    if n_layers == 0 {
        return Err(Error::Argument("layer count must be positive".into()));
    }
    if !(t_prefill > 0.0 && t_load > 0.0) {
        return Err(Error::Argument(format!(
            "times must be positive, got T_prefill = {t_prefill}, T_load = {t_load}"
        )));
    }
    let x = (n_layers as f64 - 1.0) * (1.0 - t_prefill / t_load) + 1.0;
    Ok(((x - 1e-9).ceil().max(1.0) as usize).min(n_layers))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placed {
    pub tier: usize,
    pub bytes_per_layer: usize,
}

pub type Placement = HashMap<VariantId, Placed>;

/// Assigns variants to tiers by descending `f_r` (older first on ties),
/// filling each bounded tier in turn; the last tier takes the rest.
pub fn place_and_migrate(store: &MetadataStore, cfg: &TierConfig) -> Result<Placement> {
    cfg.validate()?;
    let mut order: Vec<_> = store.variants().collect();
    order.sort_by(|a, b| {
        b.meta
            .f_r
            .total_cmp(&a.meta.f_r)
            .then(a.meta.created_at.cmp(&b.meta.created_at))
            .then(a.id().cmp(&b.id()))
    });
    let largest = order
        .iter()
        .map(|v| v.payload.size_bytes())
        .max()
        .unwrap_or(0);
    if let Some(budget) = cfg.tiers[0].budget_bytes {
        if (budget as usize) < largest {
            return Err(Error::Placement(format!(
                "fast tier budget {budget} is below the largest variant ({largest} bytes)"
            )));
        }
    }
    let last = cfg.tiers.len() - 1;
    let mut tier = 0;
    let mut used = 0usize;
    let mut placement = Placement::new();
    for v in order {
        let size = v.payload.size_bytes();
        while tier < last {
            match cfg.tiers[tier].budget_bytes {
                Some(b) if used + size > b as usize => {
                    tier += 1;
                    used = 0;
                }
                _ => break,
            }
        }
        used += size;
        placement.insert(
            v.id(),
            Placed {
                tier,
                bytes_per_layer: v.payload.bytes_per_layer(),
            },
        );
    }
    Ok(placement)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerInterval {
    pub layer: usize,
    pub load_start: f64,
    pub load_end: f64,
    pub compute_start: f64,
    pub compute_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub queue_wait: f64,
    pub preload_depth: usize,
    pub layers: Vec<LayerInterval>,
    pub ttft: f64,
    pub total_gap: f64,
}

impl Timeline {
    pub fn write_gantt_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "layer",
            "load_start",
            "load_end",
            "compute_start",
            "compute_end",
        ])?;
        for l in &self.layers {
            out.write_record([
                l.layer.to_string(),
                fmt6(l.load_start),
                fmt6(l.load_end),
                fmt6(l.compute_start),
                fmt6(l.compute_end),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<gantt csv>", e))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-layer load and compute durations implied by a plan and placement.
pub fn layer_costs(
    plan: &InferencePlan,
    placement: &Placement,
    cfg: &TierConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_layers = plan.n_layers;
    let mut load = 0.0;
    let mut computed = vec![plan.question.len(); n_layers];
    for c in &plan.chunks {
        match &c.decision {
            ChunkDecision::Miss => computed.iter_mut().for_each(|n| *n += c.len),
            ChunkDecision::Hit {
                variant,
                recompute,
                depth,
                ..
            } => {
                let p = placement
                    .get(variant)
                    .ok_or_else(|| Error::Plan(format!("variant {variant} has no placement")))?;
                load += cfg.load_time(p.tier, p.bytes_per_layer)?;
                for n in computed.iter_mut().take(*depth) {
                    *n += recompute.len();
                }
            }
        }
    }
    let compute = computed
        .iter()
        .map(|&n| cfg.t_prefill + cfg.t_token * n as f64)
        .collect();
    Ok((vec![load; n_layers], compute))
}

/// Event schedule for one request. `depth = None` uses [`preload_depth`].
pub fn simulate(
    plan: &InferencePlan,
    placement: &Placement,
    cfg: &TierConfig,
    queue_wait: f64,
    depth: Option<usize>,
) -> Result<Timeline> {
    cfg.validate()?;
    if !(queue_wait >= 0.0) {
        return Err(Error::Argument("queue wait must be non-negative".into()));
    }
    let (load, compute) = layer_costs(plan, placement, cfg)?;
    schedule(&load, &compute, cfg.decode_step, queue_wait, depth)
}

/// The schedule itself, over explicit per-layer durations.
pub fn schedule(
    load: &[f64],
    compute: &[f64],
    decode_step: f64,
    queue_wait: f64,
    depth: Option<usize>,
) -> Result<Timeline> {
    let n = compute.len();
    if n == 0 || load.len() != n {
        return Err(Error::Argument(
            "need equal, nonzero per-layer loads and computes".into(),
        ));
    }
    let lp = match depth {
        Some(d) if (1..=n).contains(&d) => d,
        Some(d) => {
            return Err(Error::Argument(format!(
                "preload depth {d} outside 1..={n}"
            )))
        }
        None => {
            let mean_load = load.iter().sum::<f64>() / n as f64;
            let mean_compute = compute.iter().sum::<f64>() / n as f64;
            if mean_load > 0.0 {
                preload_depth(n, mean_compute, mean_load)?
            } else {
                1
            }
        }
    };
    let mut load_start = vec![0.0; n];
    let mut load_end = vec![0.0; n];
    let mut cs = vec![0.0; n];
    let mut ce = vec![0.0; n];
    let mut next_load = 0;
    let mut gap = 0.0;
    for l in 0..n {
        // Issue every load whose buffer slot is free once layer l - 1 is done.
        while next_load < n && next_load <= l + lp {
            let j = next_load;
            let prev = if j == 0 { 0.0 } else { load_end[j - 1] };
            let freed = if j > lp { ce[j - lp - 1] } else { 0.0 };
            load_start[j] = f64::max(prev, freed);
            load_end[j] = load_start[j] + load[j];
            next_load += 1;
        }
        let ready = load_end[l].max(if l == 0 { load_end[lp - 1] } else { 0.0 });
        cs[l] = if l == 0 {
            queue_wait.max(ready)
        } else {
            ce[l - 1].max(ready)
        };
        ce[l] = cs[l] + compute[l];
        if l > 0 {
            let g = cs[l] - ce[l - 1];
            if g > GAP_TOLERANCE {
                gap += g;
            }
        }
    }
    let layers = (0..n)
        .map(|l| LayerInterval {
            layer: l + 1,
            load_start: load_start[l],
            load_end: load_end[l],
            compute_start: cs[l],
            compute_end: ce[l],
        })
        .collect();
    Ok(Timeline {
        queue_wait,
        preload_depth: lp,
        layers,
        ttft: ce[n - 1] + decode_step,
        total_gap: gap,
    })
}

/// Demotes HIT chunks outside the fast tier to MISS whenever computing them
/// fresh gives a lower simulated TTFT than waiting for their loads. Returns
/// the adjusted plan and the demoted chunk indices.
pub fn fallback_decision(
    plan: &InferencePlan,
    placement: &Placement,
    cfg: &TierConfig,
    queue_wait: f64,
) -> Result<(InferencePlan, Vec<usize>)> {
    let mut current = plan.clone();
    let mut best = simulate(&current, placement, cfg, queue_wait, None)?.ttft;
    let mut demoted = Vec::new();
    for i in 0..plan.chunks.len() {
        let ChunkDecision::Hit { variant, .. } = &plan.chunks[i].decision else {
            continue;
        };
        let tier = placement
            .get(variant)
            .ok_or_else(|| Error::Plan(format!("variant {variant} has no placement")))?
            .tier;
        if tier == 0 {
            continue;
        }
        let mut trial = current.clone();
        trial.chunks[i].decision = ChunkDecision::Miss;
        let ttft = simulate(&trial, placement, cfg, queue_wait, None)?.ttft;
        if ttft < best {
            best = ttft;
            current = trial;
            demoted.push(i);
        }
    }
    Ok((current, demoted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::PlannedChunk;
    use crate::scoring::ReuseScore;
    use crate::store::ChunkHash;
    use proptest::prelude::*;

    fn cfg(t_prefill: f64, t_token: f64) -> TierConfig {
        TierConfig {
            tiers: vec![
                Tier {
                    name: "fast".into(),
                    bandwidth: 1e12,
                    latency: 0.0,
                    budget_bytes: Some(1000),
                },
                Tier {
                    name: "medium".into(),
                    bandwidth: 1000.0,
                    latency: 0.0,
                    budget_bytes: Some(2000),
                },
                Tier {
                    name: "slow".into(),
                    bandwidth: 100.0,
                    latency: 0.01,
                    budget_bytes: None,
                },
            ],
            t_prefill,
            t_token,
            decode_step: 0.05,
        }
    }

    fn hit(
        variant: VariantId,
        start: usize,
        len: usize,
        recompute: Vec<usize>,
        n_layers: usize,
    ) -> PlannedChunk {
        PlannedChunk {
            chunk: ChunkHash(variant),
            start,
            len,
            decision: ChunkDecision::Hit {
                variant,
                recompute,
                score: ReuseScore {
                    beta: 1.0,
                    gamma: 0.0,
                    beta_prime: 1.0,
                    cci: 0.5,
                    cfo: 0.0,
                },
                depth: n_layers,
            },
        }
    }

    fn plan(chunks: Vec<PlannedChunk>, q: usize, n_layers: usize) -> InferencePlan {
        let n: usize = chunks.iter().map(|c| c.len).sum();
        InferencePlan {
            chunks,
            question: n..n + q,
            window: 3,
            n_layers,
            positions: (0..n + q).collect(),
        }
    }

    #[test]
    fn preload_depth_values() {
        assert_eq!(preload_depth(5, 1.0, 2.0).unwrap(), 3);
        assert_eq!(preload_depth(5, 2.0, 2.0).unwrap(), 1);
        assert_eq!(preload_depth(5, 3.0, 1.0).unwrap(), 1);
        assert_eq!(preload_depth(8, 1e-9, 1e9).unwrap(), 8);
        assert!(matches!(
            preload_depth(5, 0.0, 1.0),
            Err(Error::Argument(_))
        ));
        assert!(preload_depth(5, 1.0, -1.0).is_err());
    }

    #[test]
    fn fast_tier_costs_nothing() {
        let c = cfg(0.1, 0.0);
        let p = plan(
            vec![hit(1, 0, 4, vec![], 4), hit(2, 4, 4, vec![1], 4)],
            2,
            4,
        );
        let placement = Placement::from([
            (
                1,
                Placed {
                    tier: 0,
                    bytes_per_layer: 500,
                },
            ),
            (
                2,
                Placed {
                    tier: 0,
                    bytes_per_layer: 500,
                },
            ),
        ]);
        let t = simulate(&p, &placement, &c, 0.3, None).unwrap();
        assert_eq!(t.total_gap, 0.0);
        assert!((t.ttft - (0.3 + 4.0 * 0.1 + 0.05)).abs() < 1e-12);
        assert!(matches!(
            simulate(&p, &Placement::new(), &c, 0.0, None),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn preloading_three_of_five_layers_closes_gaps() {
        let load = vec![2.0; 5];
        let compute = vec![1.0; 5];
        let t3 = schedule(&load, &compute, 0.0, 0.0, Some(3)).unwrap();
        assert_eq!(t3.total_gap, 0.0);
        let t2 = schedule(&load, &compute, 0.0, 0.0, Some(2)).unwrap();
        assert!(t2.total_gap > 0.0);
        assert_eq!(
            schedule(&load, &compute, 0.0, 0.0, None)
                .unwrap()
                .preload_depth,
            3
        );
        // Hand schedule for depth 3: loads at 0,2,4,6,8; computes from 6.
        let starts: Vec<f64> = t3.layers.iter().map(|l| l.compute_start).collect();
        assert_eq!(starts, vec![6.0, 7.0, 8.0, 9.0, 10.0]);
        let load_starts: Vec<f64> = t3.layers.iter().map(|l| l.load_start).collect();
        assert_eq!(load_starts, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn gantt_and_json_exports() {
        let t = schedule(&[2.0; 3], &[1.0; 3], 0.5, 0.0, Some(2)).unwrap();
        let mut buf = Vec::new();
        t.write_gantt_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(
            text.starts_with("layer,load_start,load_end,compute_start,compute_end\n1,0,2,4,5\n")
        );
        let back: Timeline = serde_json::from_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn fallback_cases() {
        let c = cfg(0.01, 0.001);
        // Tiny chunk with a huge payload on the slow tier.
        let p = plan(vec![hit(1, 0, 2, vec![], 4), hit(2, 2, 8, vec![], 4)], 2, 4);
        let placement = Placement::from([
            (
                1,
                Placed {
                    tier: 2,
                    bytes_per_layer: 10_000,
                },
            ),
            (
                2,
                Placed {
                    tier: 0,
                    bytes_per_layer: 10_000,
                },
            ),
        ]);
        let (out, demoted) = fallback_decision(&p, &placement, &c, 0.0).unwrap();
        assert_eq!(demoted, vec![0]);
        assert_eq!(out.chunks[0].decision, ChunkDecision::Miss);
        assert!(out.chunks[1].is_hit());
        // A long queue wait hides the same load.
        let (_, demoted) = fallback_decision(&p, &placement, &c, 1000.0).unwrap();
        assert!(demoted.is_empty());
    }

    #[test]
    fn demo_config_load_times() {
        let c = TierConfig::demo(327_680, 1 << 20, 1 << 24);
        assert!((c.load_time(1, 327_680).unwrap() - 0.03).abs() < 1e-12);
        assert!((c.load_time(2, 327_680).unwrap() - 0.59).abs() < 1e-12);
        assert_eq!(c.load_time(0, 327_680).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn schedule_invariants(load in proptest::collection::vec(0.0f64..3.0, 1..12), tp in 0.1f64..2.0, qw in 0.0f64..5.0, d in 1usize..12) {
            let n = load.len();
            let d = d.min(n);
            let t = schedule(&load, &vec![tp; n], 0.0, qw, Some(d)).unwrap();
            for w in t.layers.windows(2) {
                prop_assert!(w[1].compute_start >= w[0].compute_end - 1e-12);
                prop_assert!(w[1].load_start >= w[0].load_end - 1e-12);
            }
            for l in &t.layers {
                prop_assert!(l.load_end <= l.compute_start + 1e-12);
            }
            prop_assert!(t.layers[0].compute_start >= qw);
        }

        #[test]
        fn faster_tier_never_hurts(tiers in proptest::collection::vec(0usize..3, 3), from in 0usize..3, qw in 0.0f64..1.0) {
            let c = cfg(0.02, 0.001);
            let p = plan((0..3).map(|i| hit(i as u64, i * 4, 4, vec![0], 4)).collect(), 2, 4);
            let placement: Placement = tiers.iter().enumerate().map(|(i, &t)| (i as u64, Placed { tier: t, bytes_per_layer: 64 })).collect();
            let before = simulate(&p, &placement, &c, qw, None).unwrap().ttft;
            let mut faster = placement.clone();
            let v = faster.get_mut(&(from as u64)).unwrap();
            if v.tier > 0 {
                v.tier -= 1;
                let after = simulate(&p, &faster, &c, qw, None).unwrap().ttft;
                prop_assert!(after <= before + 1e-12);
            }
        }
    }
}
