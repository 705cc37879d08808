//! Reusability scores for a stored chunk-cache variant under a new prefix.
//!
//! - `beta`: share of the creation-time inter-attention weight that came
//!   from chunks also present in the new prefix.
//! - `gamma`: normalized Kendall tau distance between the old and new
//!   orders of the shared chunks.
//! - `beta' = beta (1 - gamma)`.
//! - `cci = sigmoid(a_bar / b_bar)`.
//! - `cfo = clamp(alpha * cci * (1 - beta'), 0, 1)`, the fraction of the
//!   chunk's tokens to recompute.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::ChunkHash;

pub const DEFAULT_ALPHA: f64 = 1.0;

/// The prefix a variant was created under, with the layer-summed inter
/// weight each prefix chunk contributed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PrefixContext {
    pub ids: Vec<ChunkHash>,
    pub weights: Vec<f64>,
}

impl PrefixContext {
    pub fn new(ids: Vec<ChunkHash>, weights: Vec<f64>) -> Result<Self> {
        let ctx = Self { ids, weights };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.weights.len() {
            return Err(Error::Argument(format!(
                "{} prefix ids but {} weights",
                self.ids.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Argument(
                "prefix weights must be non-negative".into(),
            ));
        }
        check_unique(&self.ids)
    }
}

fn check_unique(ids: &[ChunkHash]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Argument(format!("duplicate chunk id {id}")));
        }
    }
    Ok(())
}

/// Prefix overlap score. A variant with no prefix weight at all is
/// compatible with any prefix and scores 1.
pub fn beta(ctx: &PrefixContext, new_prefix: &[ChunkHash]) -> Result<f64> {
    ctx.validate()?;
    let total: f64 = ctx.weights.iter().sum();
    if ctx.ids.is_empty() || total == 0.0 {
        return Ok(1.0);
    }
    let present: HashSet<_> = new_prefix.iter().collect();
    let shared: f64 = ctx
        .ids
        .iter()
        .zip(&ctx.weights)
        .filter(|(id, _)| present.contains(id))
        .map(|(_, w)| w)
        .sum();
    Ok(shared / total)
}

/// Normalized Kendall tau distance between the orders of the chunks common
/// to both lists. Zero when fewer than two chunks are shared.
pub fn gamma(old_order: &[ChunkHash], new_order: &[ChunkHash]) -> Result<f64> {
    check_unique(old_order)?;
    check_unique(new_order)?;
    let rank: HashMap<_, _> = new_order
        .iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let mut seq: Vec<usize> = old_order
        .iter()
        .filter_map(|id| rank.get(id).copied())
        .collect();
    let m = seq.len();
    if m <= 1 {
        return Ok(0.0);
    }
    let discordant = count_inversions(&mut seq);
    let pairs = m * (m - 1) / 2;
    Ok(discordant as f64 / pairs as f64)
}

/// Merge-sort inversion count; sorts `v` as a side effect.
fn count_inversions(v: &mut [usize]) -> usize {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            merged.push(v[j]);
            inv += mid - i;
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    inv
}

fn unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Argument(format!("{name} = {x} is outside [0, 1]")))
    }
}

pub fn adjusted_beta(beta: f64, gamma: f64) -> Result<f64> {
    unit("beta", beta)?;
    unit("gamma", gamma)?;
    Ok(beta * (1.0 - gamma))
}

/// Cache context impact. `b_bar = 0` means the ratio diverges and the cache
/// is treated as fully context dependent.
pub fn cci(a_bar: f64, b_bar: f64) -> Result<f64> {
    if !(a_bar >= 0.0 && b_bar >= 0.0) {
        return Err(Error::Argument(format!(
            "a_bar and b_bar must be non-negative, got ({a_bar}, {b_bar})"
        )));
    }
    if b_bar == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 / (1.0 + (-a_bar / b_bar).exp()))
}

pub fn cfo(alpha: f64, cci_val: f64, beta_prime: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Argument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    unit("cci", cci_val)?;
    unit("beta'", beta_prime)?;
    Ok((alpha * cci_val * (1.0 - beta_prime)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReuseScore {
    pub beta: f64,
    pub gamma: f64,
    pub beta_prime: f64,
    pub cci: f64,
    pub cfo: f64,
}

impl ReuseScore {
    pub fn evaluate(
        ctx: &PrefixContext,
        cci_val: f64,
        new_prefix: &[ChunkHash],
        alpha: f64,
    ) -> Result<Self> {
        let b = beta(ctx, new_prefix)?;
        let g = gamma(&ctx.ids, new_prefix)?;
        let bp = adjusted_beta(b, g)?;
        Ok(Self {
            beta: b,
            gamma: g,
            beta_prime: bp,
            cci: cci_val,
            cfo: cfo(alpha, cci_val, bp)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub alpha: f64,
    pub mean_cfo: f64,
    pub quality: f64,
    pub feasible: bool,
}

/// Evaluates every candidate alpha and marks which meet the quality target.
pub fn sweep_alpha<F>(
    candidates: &[f64],
    mut evaluate: F,
    quality_desired: f64,
) -> Result<Vec<CalibrationRow>>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
{
    if candidates.is_empty() {
        return Err(Error::Argument("empty alpha grid".into()));
    }
    candidates
        .iter()
        .map(|&alpha| {
            if !(alpha > 0.0) {
                return Err(Error::Argument(format!(
                    "alpha must be positive, got {alpha}"
                )));
            }
            let (mean_cfo, quality) = evaluate(alpha)?;
            Ok(CalibrationRow {
                alpha,
                mean_cfo,
                quality,
                feasible: quality >= quality_desired,
            })
        })
        .collect()
}

/// Picks the feasible row with the smallest mean CFO (smaller alpha on ties).
pub fn choose_alpha(rows: &[CalibrationRow]) -> Result<f64> {
    rows.iter()
        .filter(|r| r.feasible)
        .min_by(|a, b| {
            a.mean_cfo
                .total_cmp(&b.mean_cfo)
                .then(a.alpha.total_cmp(&b.alpha))
        })
        .map(|r| r.alpha)
        .ok_or_else(|| Error::Infeasible {
            best_quality: rows
                .iter()
                .map(|r| r.quality)
                .fold(f64::NEG_INFINITY, f64::max),
        })
}

/// `argmin_alpha E[CFO_alpha]` subject to `quality_alpha >= quality_desired`.
pub fn calibrate_alpha<F>(candidates: &[f64], evaluate: F, quality_desired: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<(f64, f64)>,
{
    choose_alpha(&sweep_alpha(candidates, evaluate, quality_desired)?)
}

pub fn write_calibration_csv<W: Write>(w: W, rows: &[CalibrationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["alpha", "mean_cfo", "quality", "feasible"])?;
    for r in rows {
        out.write_record([
            fmt6(r.alpha),
            fmt6(r.mean_cfo),
            fmt6(r.quality),
            r.feasible.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<calibration csv>", e))
}

/// Six significant digits, the fixed float format of every CSV export.
pub(crate) fn fmt6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = 5 - x.abs().log10().floor() as i32;
    if (0..=9).contains(&digits) {
        let s = format!("{:.*}", digits as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}
