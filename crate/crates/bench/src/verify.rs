//! `verify`: every engine invariant as a named check with a tolerance.

use std::io::Write;

use anyhow::Result;
use fsa_core::branches::{compress_kv, compressed_attention_forward, gated_combine, sliding_attention_forward, GateTensor};
use fsa_core::config::AttentionConfig;
use fsa_core::cost::{analytic_cost, cost_ratio, fsa_buffer_bound_elems};
use fsa_core::fsa::{fsa_selected_backward, fsa_selected_forward, FsaOptions, StatsMode};
use fsa_core::meter::Phase;
use fsa_core::nsa::{nsa_selected_backward, nsa_selected_forward, NsaOptions};
use fsa_core::oracle::{dense_backward, full_attention_forward, masked_attention_forward, BlockMask};
use fsa_core::scenario::{random_tensor, Problem, TensorStream};
use fsa_core::schedule::TaskOrder;
use fsa_core::selection::build_inverse_index;
use fsa_core::tensor::HeadedTensor;
use serde::Serialize;

use crate::{csv_sink, resolve, ScenarioArgs};

/// One verification result. A check passes when `max_error ≤ tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check_name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Default)]
struct Checks(Vec<CheckRow>);

impl Checks {
    fn add(&mut self, name: &str, max_error: f64, tolerance: f64) {
        self.0.push(CheckRow {
            check_name: name.to_string(),
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        });
    }

    fn exact(&mut self, name: &str, ok: bool) {
        self.add(name, if ok { 0.0 } else { 1.0 }, 0.0);
    }
}

fn zeros_like(x: &HeadedTensor) -> HeadedTensor {
    let (n, d, h) = x.shape();
    HeadedTensor::zeros(n, d, h)
}

fn max_abs(x: &HeadedTensor) -> f64 {
    x.as_slice().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Relative error of central differences against `dense_backward` on up to
/// `samples` evenly spaced entries of each of Q, K and V.
fn finite_difference_error(p: &Problem, mask: &BlockMask, samples: usize) -> Result<f64> {
    let cfg = &p.cfg;
    let an = dense_backward(&p.q, &p.k, &p.v, mask, &p.d_out, cfg)?;
    let loss = |q: &HeadedTensor, k: &HeadedTensor, v: &HeadedTensor| -> Result<f64> {
        let o = masked_attention_forward(q, k, v, mask, cfg)?;
        Ok(o.out.as_slice().iter().zip(p.d_out.as_slice()).map(|(a, b)| a * b).sum())
    };
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (which, grad) in [&an.dq, &an.dk, &an.dv].into_iter().enumerate() {
        let len = grad.as_slice().len();
        let stride = (len / samples).max(1);
        for idx in (0..len).step_by(stride) {
            let eval = |delta: f64| {
                let (mut q, mut k, mut v) = (p.q.clone(), p.k.clone(), p.v.clone());
                let target = match which {
                    0 => &mut q,
                    1 => &mut k,
                    _ => &mut v,
                };
                target.as_mut_slice()[idx] += delta;
                loss(&q, &k, &v)
            };
            let fd = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = grad.as_slice()[idx];
            worst = worst.max((fd - a).abs() / a.abs().max(1e-3));
        }
    }
    Ok(worst)
}

/// Runs every check on one problem.
pub fn run_checks(p: &Problem, fsa_opts: FsaOptions, fixture: bool) -> Result<Vec<CheckRow>> {
    let cfg = &p.cfg;
    let mut c = Checks::default();
    let mask = BlockMask::from_selection(&p.selection, cfg);
    let nsa_opts = NsaOptions::default();

    // forward equivalence
    let oracle = masked_attention_forward(&p.q, &p.k, &p.v, &mask, cfg)?;
    let fsa = fsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, cfg, &fsa_opts)?;
    let nsa = nsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, cfg, &nsa_opts)?;
    c.add("fwd_fsa_vs_oracle", fsa.output.max_abs_diff(&oracle), 1e-10);
    c.add("fwd_nsa_vs_oracle", nsa.output.max_abs_diff(&oracle), 1e-10);
    c.add("fwd_fsa_vs_nsa", fsa.output.max_abs_diff(&nsa.output), 1e-10);
    let lse_err = |a: &[f64]| a.iter().zip(&oracle.lse).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    c.add("fwd_lse_fsa_vs_oracle", lse_err(&fsa.output.lse), 1e-10);
    c.add("fwd_lse_nsa_vs_oracle", lse_err(&nsa.output.lse), 1e-10);

    // statistics variants
    let exact = fsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, cfg, &FsaOptions::default())?;
    for (name, mode) in [
        ("stats_shared_group_max", StatsMode::SharedGroupMax),
        ("stats_speculative_per_kv_head", StatsMode::SpeculativePerKvHead),
    ] {
        let opts = FsaOptions {
            stats_mode: mode,
            ..fsa_opts
        };
        let o = fsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, cfg, &opts)?;
        c.add(name, o.output.max_abs_diff(&exact.output), 1e-10);
    }

    // schedules
    let mut identical = true;
    for order in [TaskOrder::Descending, TaskOrder::Parallel] {
        let f = fsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, cfg, &FsaOptions { task_order: order, ..fsa_opts })?;
        let n = nsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, cfg, &NsaOptions { task_order: order })?;
        identical &= f.output == fsa.output && f.meter == fsa.meter && n.output == nsa.output && n.meter == nsa.meter;
    }
    c.exact("schedule_bit_identical", identical);

    // backward
    let dense = dense_backward(&p.q, &p.k, &p.v, &mask, &p.d_out, cfg)?;
    let fsa_b = fsa_selected_backward(&p.q, &p.k, &p.v, &p.selection, &p.d_out, cfg, &fsa_opts)?;
    let nsa_b = nsa_selected_backward(&p.q, &p.k, &p.v, &p.selection, &p.d_out, cfg, &nsa_opts)?;
    c.add("bwd_fsa_vs_dense", fsa_b.grads.max_abs_diff(&dense), 1e-9);
    c.add("bwd_nsa_vs_dense", nsa_b.grads.max_abs_diff(&dense), 1e-9);
    c.add("bwd_dense_vs_finite_difference", finite_difference_error(p, &mask, 24)?, 1e-5);
    c.add("bwd_kv_single_writer", fsa_b.max_kv_region_writers.saturating_sub(1) as f64, 0.0);
    let zero = zeros_like(&p.d_out);
    let fz = fsa_selected_backward(&p.q, &p.k, &p.v, &p.selection, &zero, cfg, &fsa_opts)?.grads;
    let nz = nsa_selected_backward(&p.q, &p.k, &p.v, &p.selection, &zero, cfg, &nsa_opts)?.grads;
    let zero_err = [&fz.dq, &fz.dk, &fz.dv, &nz.dq, &nz.dk, &nz.dv].into_iter().map(max_abs).fold(0.0, f64::max);
    c.add("bwd_zero_upstream", zero_err, 0.0);

    // selection and inverse index
    c.exact("selection_structure", p.selection.validate(cfg).is_ok());
    if !fixture {
        c.exact("selection_own_block", p.selection.covers_own_block(cfg));
    }
    let inv = build_inverse_index(&p.selection, cfg)?;
    c.exact("inverse_index_round_trip", inv.to_selection() == p.selection);
    let slots_ok = (0..cfg.h_kv).all(|kh| {
        (0..cfg.num_blocks()).all(|i| {
            let l = inv.get(kh, i);
            l.queries.windows(2).all(|w| w[0] < w[1]) && l.slots.iter().copied().eq(0..l.n_valid())
        })
    });
    c.exact("inverse_index_compact_slots", slots_ok);

    // counters
    let bp = fsa.meter.phase(Phase::BlockPass);
    let iters: u64 = (0..cfg.h)
        .flat_map(|j| (0..cfg.num_blocks()).map(move |i| (j, i)))
        .map(|(j, i)| inv.n_valid(cfg.kv_head_of(j), i).div_ceil(cfg.block_q) as u64)
        .sum();
    c.add("counter_block_pass_iterations", bp.inner_iterations.abs_diff(iters) as f64, 0.0);
    let qm = nsa.meter.phase(Phase::QueryMajor);
    let per_token = (cfg.group_size().max(cfg.min_tile) * cfg.d_k * cfg.bytes_per_elem) as u64;
    c.add(
        "counter_nsa_query_load",
        qm.query_bytes_loaded.abs_diff(per_token * (cfg.n * cfg.h_kv) as u64) as f64,
        0.0,
    );
    let non_empty: u64 = (0..cfg.h)
        .map(|j| (0..cfg.num_blocks()).filter(|&i| inv.n_valid(cfg.kv_head_of(j), i) > 0).count() as u64)
        .sum();
    let kv_per_task = (cfg.block_k * (cfg.d_k + cfg.d_v) * cfg.bytes_per_elem) as u64;
    c.exact(
        "counter_early_return",
        bp.kv_bytes_loaded == non_empty * kv_per_task && bp.task_count == (cfg.h * cfg.num_blocks()) as u64,
    );
    let (q2, k2, v2) = (
        random_tensor(0x9e37_79b9, TensorStream::Query, cfg.n, cfg.d_k, cfg.h),
        random_tensor(0x9e37_79b9, TensorStream::Key, cfg.n, cfg.d_k, cfg.h_kv),
        random_tensor(0x9e37_79b9, TensorStream::Value, cfg.n, cfg.d_v, cfg.h_kv),
    );
    let f2 = fsa_selected_forward(&q2, &k2, &v2, &p.selection, cfg, &fsa_opts)?;
    let n2 = nsa_selected_forward(&q2, &k2, &v2, &p.selection, cfg, &nsa_opts)?;
    c.exact("counter_data_independence", f2.meter == fsa.meter && n2.meter == nsa.meter);
    c.add(
        "buffer_within_dnt",
        fsa.meter.peak_buffer_elems.saturating_sub(fsa_buffer_bound_elems(cfg)) as f64,
        0.0,
    );
    let ab = fsa.meter.clone().merged(&nsa.meter);
    c.exact("meter_merge_commutative", ab == nsa.meter.clone().merged(&fsa.meter));

    // auxiliary branches
    let wide = cfg.clone().with_window(cfg.n).validate()?;
    let sliding = sliding_attention_forward(&p.q, &p.k, &p.v, &wide)?;
    let full = full_attention_forward(&p.q, &p.k, &p.v, cfg)?;
    c.add("branch_sliding_full_window", sliding.max_abs_diff(&full), 1e-12);
    let unit = AttentionConfig::new(cfg.n, cfg.d_k, cfg.h, cfg.h_kv, 1, 1).with_value_dim(cfg.d_v).validate()?;
    let cmp = compress_kv(&p.k, &p.v, &unit)?;
    let compressed = compressed_attention_forward(&p.q, &p.k, &p.v, &cmp, &unit)?;
    c.add("branch_compressed_unit_blocks", compressed.max_abs_diff(&full), 1e-12);
    let one_hot = GateTensor::constant(cfg.n, [0.0, 1.0, 0.0])?;
    let mixed = gated_combine([&compressed, &nsa.output, &sliding], &one_hot)?;
    c.add("branch_gate_one_hot", mixed.out.max_abs_diff(&nsa.output.out), 0.0);

    // cost model
    if let Ok(d) = cfg.uniform_head_dim() {
        let a = analytic_cost(cfg)?;
        let (n, h, hk, t) = (cfg.n as u64, cfg.h as u64, cfg.h_kv as u64, cfg.top_t as u64);
        let total = d as u64 * n * (6 * h + 2 * hk) * (1 + t) * cfg.bytes_per_elem as u64 / 2;
        c.add("cost_components_sum", a.fsa_bytes.total().abs_diff(total) as f64, 0.0);
    }
    let reference = AttentionConfig::new(65536, 128, 4, 1, 64, 16).validate()?;
    let (mem, fl) = cost_ratio(&reference)?;
    c.add("cost_ratio_reference_memory", (mem - 0.213).abs(), 1e-3);
    c.add("cost_ratio_reference_flops", (fl - 0.5625).abs(), 5e-4);
    let ratios: Vec<f64> = [1, 2, 4, 8]
        .iter()
        .map(|&g| cost_ratio(&AttentionConfig::new(65536, 128, g, 1, 64, 16).validate()?).map(|r| r.0))
        .collect::<fsa_core::Result<_>>()?;
    c.exact(
        "cost_sweep_increasing_in_g",
        ratios.windows(2).all(|w| w[0] < w[1]) && ratios[3] < 1.0,
    );
    Ok(c.0)
}

pub fn cmd_verify(args: &ScenarioArgs, out: &mut dyn Write) -> Result<bool> {
    let r = resolve(args)?;
    let cfg = &r.problem.cfg;
    writeln!(
        out,
        "verify: N={} d_K={} d_V={} h={} h_K={} B_K={} T={} B_Q={} seed={} selection={}",
        cfg.n,
        cfg.d_k,
        cfg.d_v,
        cfg.h,
        cfg.h_kv,
        cfg.block_k,
        cfg.top_t,
        cfg.block_q,
        r.scenario.seed,
        if r.fixture { "fixture".to_string() } else { r.scenario.selection_mode.to_string() },
    )?;
    let rows = run_checks(&r.problem, r.fsa_opts, r.fixture)?;
    for row in &rows {
        writeln!(
            out,
            "{:<34} {:>10.3e}  tol {:>8.1e}  {}",
            row.check_name,
            row.max_error,
            row.tolerance,
            if row.passed { "ok" } else { "FAIL" }
        )?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    writeln!(out, "{} checks, {} failed", rows.len(), failed)?;
    if let Some(sink) = csv_sink(&args.csv)? {
        let mut w = csv::Writer::from_writer(sink);
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(failed == 0)
}
