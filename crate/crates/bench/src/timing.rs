//! `bench`: wall-clock timings of every engine on one scenario.
//!
//! Apart from `mean_ms` and `min_ms`, every column is a function of the
//! scenario alone, so repeated runs differ only in the timing columns.

use std::io::Write;
use std::time::Instant;

use anyhow::Result;
use fsa_core::fsa::{fsa_selected_backward, fsa_selected_forward};
use fsa_core::meter::TrafficMeter;
use fsa_core::nsa::{nsa_selected_backward, nsa_selected_forward, NsaOptions};
use fsa_core::oracle::{masked_attention_forward, BlockMask};
use serde::Serialize;

use crate::{csv_sink, resolve, ScenarioArgs};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub engine: &'static str,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub g: usize,
    #[serde(rename = "h_K")]
    pub h_kv: usize,
    #[serde(rename = "B_K")]
    pub block_k: usize,
    #[serde(rename = "T")]
    pub top_t: usize,
    pub seed: u64,
    pub repeat: usize,
    /// Metered bytes of one run; empty for the dense oracle.
    pub bytes: Option<u64>,
    pub flops: Option<u64>,
    pub mean_ms: f64,
    pub min_ms: f64,
}

/// Runs `f` `repeat` times; returns (mean ms, min ms, meter of the last run).
fn time<F>(repeat: usize, mut f: F) -> Result<(f64, f64, Option<TrafficMeter>)>
where
    F: FnMut() -> Result<Option<TrafficMeter>>,
{
    let mut total = 0.0;
    let mut best = f64::INFINITY;
    let mut meter = None;
    for _ in 0..repeat {
        let t0 = Instant::now();
        meter = f()?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        total += ms;
        best = best.min(ms);
    }
    Ok((total / repeat as f64, best, meter))
}

pub fn cmd_bench(args: &ScenarioArgs, out: &mut dyn Write) -> Result<bool> {
    let r = resolve(args)?;
    let (p, cfg) = (&r.problem, &r.problem.cfg);
    let repeat = r.scenario.repeat;
    let nsa_opts = NsaOptions::default();
    let mask = BlockMask::from_selection(&p.selection, cfg);
    let mut rows = Vec::new();
    let mut push = |engine, (mean_ms, min_ms, meter): (f64, f64, Option<TrafficMeter>)| {
        let total = meter.map(|m| m.total());
        rows.push(TimingRow {
            engine,
            n: cfg.n,
            d: cfg.d_k,
            g: cfg.group_size(),
            h_kv: cfg.h_kv,
            block_k: cfg.block_k,
            top_t: cfg.top_t,
            seed: r.scenario.seed,
            repeat,
            bytes: total.map(|t| t.bytes()),
            flops: total.map(|t| t.flops),
            mean_ms,
            min_ms,
        });
    };
    push(
        "dense_oracle",
        time(repeat, || {
            masked_attention_forward(&p.q, &p.k, &p.v, &mask, cfg)?;
            Ok(None)
        })?,
    );
    push(
        "fsa_forward",
        time(repeat, || {
            Ok(Some(fsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, cfg, &r.fsa_opts)?.meter))
        })?,
    );
    push(
        "nsa_forward",
        time(repeat, || {
            Ok(Some(nsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, cfg, &nsa_opts)?.meter))
        })?,
    );
    push(
        "fsa_backward",
        time(repeat, || {
            Ok(Some(fsa_selected_backward(&p.q, &p.k, &p.v, &p.selection, &p.d_out, cfg, &r.fsa_opts)?.meter))
        })?,
    );
    push(
        "nsa_backward",
        time(repeat, || {
            Ok(Some(nsa_selected_backward(&p.q, &p.k, &p.v, &p.selection, &p.d_out, cfg, &nsa_opts)?.meter))
        })?,
    );
    let sink: Box<dyn Write + '_> = match csv_sink(&args.csv)? {
        Some(s) => s,
        None => Box::new(out),
    };
    let mut w = csv::Writer::from_writer(sink);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(true)
}
