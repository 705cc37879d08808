//! Command-line front end: trace generation, replay, alpha calibration,
//! store census and preload schedules.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chunkcache::harness::{
    gen_synthetic, read_trace, top_share, tune_zipf, write_trace, Config, GenConfig, Policy,
    Replayer,
};
use chunkcache::model::Model;
use chunkcache::scoring::write_calibration_csv;
use chunkcache::store::MetadataStore;
use chunkcache::tiers::schedule;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chunkcache", version, about = "Chunk-cache reuse simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace under one policy and write the per-request report.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "cachecraft")]
        policy: String,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// TOML configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; `.json` writes JSON, anything else CSV.
        #[arg(long)]
        out: PathBuf,
        /// Directory to snapshot the final store into.
        #[arg(long)]
        save_store: Option<PathBuf>,
    },
    /// Generate a synthetic Zipf trace as JSONL.
    Gen {
        #[arg(long)]
        chunks: usize,
        #[arg(long, default_value_t = 1.0)]
        zipf: f64,
        /// Search for the exponent giving this top-5% retrieval share
        /// instead of using --zipf.
        #[arg(long)]
        top_share: Option<f64>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        requests: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        question_len: usize,
        /// Mean arrivals per second.
        #[arg(long, default_value_t = 4.0)]
        rate: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep alpha and pick the cheapest one meeting a quality target.
    Calibrate {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,3")]
        grid: Vec<f64>,
        /// Required quality, `1 - deviation / naive deviation`.
        #[arg(long)]
        target: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV path for the sweep; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the variants-per-chunk histogram of a saved store.
    Census {
        #[arg(long)]
        store: PathBuf,
    },
    /// Print the load/compute schedule for uniform per-layer times.
    Gantt {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        t_prefill: f64,
        #[arg(long)]
        t_load: f64,
        /// Preload depth; the optimal depth when omitted.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        queue_wait: f64,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Replay {
            trace,
            policy,
            alpha,
            config,
            out,
            save_store,
        } => {
            let policy: Policy = policy.parse()?;
            let config = load_config(config.as_deref())?;
            let trace = read_trace(&trace)?;
            let model = Model::new(config.model.clone())?;
            let mut replayer = Replayer::new(&model, config)?;
            let replay = replayer.replay(&trace, policy, alpha)?;
            replay.report.export(&out)?;
            if let Some(dir) = save_store {
                match &replay.store {
                    Some(store) => store.save(&dir)?,
                    None => bail!("policy {policy} keeps no store to save"),
                }
            }
            let s = &replay.report.summary;
            eprintln!(
                "{policy}: {} requests, recompute fraction {:.4}, hit rate {:.4}, mean deviation {:.4}, mean TTFT {:.4}s",
                s.requests, s.recompute_fraction, s.hit_rate, s.mean_deviation, s.mean_ttft
            );
        }
        Command::Gen {
            chunks,
            zipf,
            top_share: share,
            k,
            requests,
            seed,
            question_len,
            rate,
            config,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let mut cfg = GenConfig {
                n_chunks: chunks,
                zipf_s: zipf,
                k,
                n_requests: requests,
                question_len,
                vocab_size: config.model.vocab_size,
                rate,
                seed,
            };
            if let Some(target) = share {
                cfg.zipf_s = tune_zipf(&cfg, target)?.0;
            }
            let trace = gen_synthetic(&cfg)?;
            write_trace(&out, &trace)?;
            eprintln!(
                "wrote {} requests, zipf s = {:.2}, top-5% share {:.3}",
                trace.len(),
                cfg.zipf_s,
                top_share(&trace, chunks, 0.05)
            );
        }
        Command::Calibrate {
            trace,
            grid,
            target,
            config,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            let trace = read_trace(&trace)?;
            let model = Model::new(config.model.clone())?;
            let mut replayer = Replayer::new(&model, config)?;
            let (rows, choice) = replayer.calibrate(&trace, &grid, target)?;
            match out {
                Some(p) => write_calibration_csv(std::fs::File::create(&p)?, &rows)?,
                None => write_calibration_csv(io::stdout().lock(), &rows)?,
            }
            eprintln!("alpha = {}", choice?);
        }
        Command::Census { store } => {
            let store = MetadataStore::load(&store)?;
            store.write_census_csv(io::stdout().lock())?;
        }
        Command::Gantt {
            layers,
            t_prefill,
            t_load,
            depth,
            queue_wait,
            json,
        } => {
            let t = schedule(
                &vec![t_load; layers],
                &vec![t_prefill; layers],
                0.0,
                queue_wait,
                depth,
            )?;
            let mut stdout = io::stdout().lock();
            if json {
                writeln!(stdout, "{}", t.to_json()?)?;
            } else {
                t.write_gantt_csv(&mut stdout)?;
            }
            eprintln!(
                "preload depth {}, total gap {:.6}s, TTFT {:.6}s",
                t.preload_depth, t.total_gap, t.ttft
            );
        }
    }
    Ok(())
}
