//! `cost-sweep`: analytic cost rows over a parameter grid, optionally
//! followed by rows measured on the instrumented engines.

use std::io::Write;

use anyhow::{bail, Result};
use fsa_core::config::AttentionConfig;
use fsa_core::cost::CostRow;
use fsa_core::fsa::{fsa_selected_forward, FsaOptions};
use fsa_core::nsa::{nsa_selected_forward, NsaOptions};
use fsa_core::scenario::{Scenario, SelectionMode};
use fsa_core::schedule::TaskOrder;

use crate::{csv_sink, SweepArgs};

/// Largest sequence length the `--measure` runs accept.
pub const MEASURE_MAX_N: usize = 4096;

/// Grid points in (N, d, B_K:T, g) nesting order.
pub fn grid(args: &SweepArgs) -> Result<Vec<AttentionConfig>> {
    let mut out = Vec::new();
    for &n in &args.grid_n {
        for &d in &args.grid_d {
            for &(bk, t) in &args.grid_bk_t {
                for &g in &args.grid_g {
                    let cfg = AttentionConfig::new(n, d, g * args.h_kv, args.h_kv, bk, t)
                        .with_min_tile(args.min_tile)
                        .with_bytes_per_elem(args.bytes_per_elem)
                        .validate()?;
                    out.push(cfg);
                }
            }
        }
    }
    if out.is_empty() {
        bail!("empty grid");
    }
    Ok(out)
}

/// One FSA and one NSA forward run on a uniform-random selection.
pub fn measured_row(cfg: &AttentionConfig, seed: u64, opts: FsaOptions) -> Result<CostRow> {
    let p = Scenario::new(cfg.clone(), seed, SelectionMode::RandomUniform).materialize()?;
    let fsa = fsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, cfg, &opts)?;
    let nsa = nsa_selected_forward(
        &p.q,
        &p.k,
        &p.v,
        &p.selection,
        cfg,
        &NsaOptions {
            task_order: TaskOrder::Parallel,
        },
    )?;
    Ok(CostRow::measured(cfg, &fsa.meter.merged(&nsa.meter))?)
}

pub fn sweep_rows(args: &SweepArgs) -> Result<Vec<CostRow>> {
    let opts = FsaOptions {
        stats_mode: args.stats_mode.into(),
        task_order: TaskOrder::Parallel,
    };
    let mut rows = Vec::new();
    for cfg in grid(args)? {
        rows.push(CostRow::analytic(&cfg)?);
        if args.measure {
            if cfg.n > MEASURE_MAX_N {
                eprintln!("note: skipping measured row for N={} (limit {MEASURE_MAX_N})", cfg.n);
            } else {
                rows.push(measured_row(&cfg, args.seed, opts)?);
            }
        }
    }
    Ok(rows)
}

pub fn cmd_cost_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<bool> {
    let rows = sweep_rows(args)?;
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
