//! Per-request measurements and their aggregate, with CSV and JSON export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::fmt6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub id: u64,
    pub k: usize,
    pub hits: usize,
    pub tokens_total: usize,
    pub tokens_computed: usize,
    pub tokens_reused: usize,
    pub recompute_fraction: f64,
    pub deviation: f64,
    /// Mean CFO over reused chunks; absent when nothing was reused.
    pub mean_cfo: Option<f64>,
    pub queue_wait: f64,
    pub ttft: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Summary {
    pub requests: usize,
    pub tokens_total: usize,
    pub tokens_computed: usize,
    pub tokens_reused: usize,
    pub recompute_fraction: f64,
    pub hit_rate: f64,
    pub mean_deviation: f64,
    pub mean_cfo: Option<f64>,
    pub mean_ttft: f64,
}

impl Summary {
    pub fn from_rows(rows: &[RequestRow]) -> Self {
        if rows.is_empty() {
            return Self::default();
        }
        let n = rows.len() as f64;
        let total: usize = rows.iter().map(|r| r.tokens_total).sum();
        let computed: usize = rows.iter().map(|r| r.tokens_computed).sum();
        let hits: usize = rows.iter().map(|r| r.hits).sum();
        let k: usize = rows.iter().map(|r| r.k).sum();
        // CFO is averaged over reused chunks, not requests.
        let (cfo_sum, cfo_n) = rows
            .iter()
            .fold((0.0, 0usize), |(s, c), r| match r.mean_cfo {
                Some(m) => (s + m * r.hits as f64, c + r.hits),
                None => (s, c),
            });
        Self {
            requests: rows.len(),
            tokens_total: total,
            tokens_computed: computed,
            tokens_reused: total - computed,
            recompute_fraction: computed as f64 / total as f64,
            hit_rate: hits as f64 / k as f64,
            mean_deviation: rows.iter().map(|r| r.deviation).sum::<f64>() / n,
            mean_cfo: (cfo_n > 0).then(|| cfo_sum / cfo_n as f64),
            mean_ttft: rows.iter().map(|r| r.ttft).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub policy: String,
    pub alpha: f64,
    pub warmup: usize,
    pub rows: Vec<RequestRow>,
    pub summary: Summary,
}

const ROW_HEADER: [&str; 11] = [
    "id",
    "k",
    "hits",
    "tokens_total",
    "tokens_computed",
    "tokens_reused",
    "recompute_fraction",
    "deviation",
    "mean_cfo",
    "queue_wait",
    "ttft",
];

fn opt(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_default()
}

impl Report {
    pub fn new(policy: &str, alpha: f64, warmup: usize, rows: Vec<RequestRow>) -> Self {
        let summary = Summary::from_rows(&rows);
        Self {
            policy: policy.to_string(),
            alpha,
            warmup,
            rows,
            summary,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(ROW_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.id.to_string(),
                r.k.to_string(),
                r.hits.to_string(),
                r.tokens_total.to_string(),
                r.tokens_computed.to_string(),
                r.tokens_reused.to_string(),
                fmt6(r.recompute_fraction),
                fmt6(r.deviation),
                opt(r.mean_cfo),
                fmt6(r.queue_wait),
                fmt6(r.ttft),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<report csv>", e))
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Writes CSV or JSON depending on the extension (`.json` or anything
    /// else for CSV).
    pub fn export(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        if path.extension().is_some_and(|e| e == "json") {
            self.write_json(&mut w)?;
        } else {
            self.write_csv(&mut w)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One aggregate line per policy.
pub fn write_comparison_csv<W: Write>(w: W, reports: &[Report]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "policy",
        "alpha",
        "requests",
        "tokens_computed",
        "tokens_reused",
        "recompute_fraction",
        "hit_rate",
        "mean_deviation",
        "mean_cfo",
        "mean_ttft",
    ])?;
    for r in reports {
        let s = &r.summary;
        out.write_record([
            r.policy.clone(),
            fmt6(r.alpha),
            s.requests.to_string(),
            s.tokens_computed.to_string(),
            s.tokens_reused.to_string(),
            fmt6(s.recompute_fraction),
            fmt6(s.hit_rate),
            fmt6(s.mean_deviation),
            opt(s.mean_cfo),
            fmt6(s.mean_ttft),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<comparison csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: u64, hits: usize, computed: usize, cfo: Option<f64>) -> RequestRow {
        RequestRow {
            id,
            k: 4,
            hits,
            tokens_total: 100,
            tokens_computed: computed,
            tokens_reused: 100 - computed,
            recompute_fraction: computed as f64 / 100.0,
            deviation: 0.125,
            mean_cfo: cfo,
            queue_wait: 0.0,
            ttft: 1.0 / 3.0,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = Report::new("cachecraft", 1.0, 20, Vec::new());
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
        assert_eq!(r.summary, Summary::default());
    }

    #[test]
    fn json_round_trip_and_stable_csv() {
        let r = Report::new(
            "cachecraft",
            0.5,
            2,
            vec![row(2, 2, 40, Some(0.25)), row(3, 0, 100, None)],
        );
        let mut buf = Vec::new();
        r.write_json(&mut buf).unwrap();
        let back: Report = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, r);
        let mut csv1 = Vec::new();
        r.write_csv(&mut csv1).unwrap();
        let mut csv2 = Vec::new();
        back.write_csv(&mut csv2).unwrap();
        assert_eq!(csv1, csv2);
        let text = String::from_utf8(csv1).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "2,4,2,100,40,60,0.4,0.125,0.25,0,0.333333"
        );
        assert_eq!(
            text.lines().nth(2).unwrap(),
            "3,4,0,100,100,0,1,0.125,,0,0.333333"
        );
    }

    #[test]
    fn summary_arithmetic() {
        let s = Summary::from_rows(&[row(0, 2, 40, Some(0.25)), row(1, 1, 70, Some(1.0))]);
        assert_eq!((s.tokens_computed, s.tokens_reused), (110, 90));
        assert!((s.recompute_fraction - 0.55).abs() < 1e-12);
        assert!((s.hit_rate - 3.0 / 8.0).abs() < 1e-12);
        assert!((s.mean_cfo.unwrap() - 0.5).abs() < 1e-12);
    }
}
