//! Closed-form memory and FLOP estimates for both schedules, and the matching
//! totals read off a [`TrafficMeter`].
//!
//! Byte formulas are stated for 2-byte elements and scale linearly with
//! `bytes_per_elem`; FLOP formulas do not depend on element width. Every
//! formula assumes a uniform head dim `d = d_K = d_V`.

use serde::{Deserialize, Serialize};

use crate::config::AttentionConfig;
use crate::error::Result;
use crate::meter::{Phase, TrafficMeter};

/// One quantity split over the three FSA kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsaTerms {
    pub selected: u64,
    pub stats: u64,
    pub reduce: u64,
}

impl FsaTerms {
    pub fn total(&self) -> u64 {
        self.selected + self.stats + self.reduce
    }
}

/// Analytic cost of one forward pass under each schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub fsa_bytes: FsaTerms,
    /// The reduction kernel's FLOPs are not modeled and stay 0.
    pub fsa_flops: FsaTerms,
    pub nsa_bytes: u64,
    /// `4 · max(g, min_tile) · d · h_K · N · B_K · T`, i.e. `32 d h_K N B_K T`
    /// on 8-wide tiles with `g ≤ 8`.
    pub nsa_flops: u64,
    /// Per-step recount: padded heads × `4 B_K d` per block × `T/2` visited
    /// blocks. Half of [`CostBreakdown::nsa_flops`].
    pub nsa_flops_rederived: u64,
}

impl CostBreakdown {
    pub fn memory_ratio(&self) -> f64 {
        self.fsa_bytes.total() as f64 / self.nsa_bytes as f64
    }

    pub fn flops_ratio(&self) -> f64 {
        self.fsa_flops.total() as f64 / self.nsa_flops as f64
    }
}

fn byte_scale(cfg: &AttentionConfig, elems_at_two_bytes: u64) -> u64 {
    elems_at_two_bytes * cfg.bytes_per_elem as u64 / 2
}

/// FSA bytes `dN(6h + 2h_K)(1 + T)` and FLOPs `dN B_K T(4h + 2h_K)`, per kernel.
pub fn fsa_analytic_cost(cfg: &AttentionConfig) -> Result<(FsaTerms, FsaTerms)> {
    let d = cfg.uniform_head_dim()? as u64;
    let (n, h, hk, bk, t) = (cfg.n as u64, cfg.h as u64, cfg.h_kv as u64, cfg.block_k as u64, cfg.top_t as u64);
    let bytes = FsaTerms {
        selected: byte_scale(cfg, 4 * d * h * n * (1 + t)),
        stats: byte_scale(cfg, 2 * d * hk * n * (1 + t)),
        reduce: byte_scale(cfg, 2 * d * h * n * (1 + t)),
    };
    let flops = FsaTerms {
        selected: 4 * d * h * n * bk * t,
        stats: 2 * d * hk * n * bk * t,
        reduce: 0,
    };
    Ok((bytes, flops))
}

/// NSA bytes `2 d h_K N (B_K T + g + max(g, min_tile))` and FLOPs as
/// documented on [`CostBreakdown`]. Returns (bytes, flops, rederived flops).
pub fn nsa_analytic_cost(cfg: &AttentionConfig) -> Result<(u64, u64, u64)> {
    let d = cfg.uniform_head_dim()? as u64;
    let (n, hk, bk, t) = (cfg.n as u64, cfg.h_kv as u64, cfg.block_k as u64, cfg.top_t as u64);
    let g = cfg.group_size() as u64;
    let padded = g.max(cfg.min_tile as u64);
    let bytes = byte_scale(cfg, 2 * d * hk * n * (bk * t + g + padded));
    let flops = 4 * padded * d * hk * n * bk * t;
    Ok((bytes, flops, flops / 2))
}

pub fn analytic_cost(cfg: &AttentionConfig) -> Result<CostBreakdown> {
    let (fsa_bytes, fsa_flops) = fsa_analytic_cost(cfg)?;
    let (nsa_bytes, nsa_flops, nsa_flops_rederived) = nsa_analytic_cost(cfg)?;
    Ok(CostBreakdown {
        fsa_bytes,
        fsa_flops,
        nsa_bytes,
        nsa_flops,
        nsa_flops_rederived,
    })
}

/// `(memory_ratio, flops_ratio)` of FSA over NSA.
pub fn cost_ratio(cfg: &AttentionConfig) -> Result<(f64, f64)> {
    let c = analytic_cost(cfg)?;
    Ok((c.memory_ratio(), c.flops_ratio()))
}

/// Size of the FSA partial-output buffer for one query head when every token
/// keeps all `T` entries: `d_V · N · T` elements.
pub fn fsa_buffer_bound_elems(cfg: &AttentionConfig) -> u64 {
    (cfg.d_v * cfg.n * cfg.top_t) as u64
}

/// [`fsa_buffer_bound_elems`] over all `h` heads, in bytes.
pub fn fsa_buffer_bound_bytes(cfg: &AttentionConfig) -> u64 {
    fsa_buffer_bound_elems(cfg) * (cfg.h * cfg.bytes_per_elem) as u64
}

/// Forward-pass totals read from a meter, laid out like [`CostBreakdown`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MeasuredCost {
    pub fsa_bytes: FsaTerms,
    pub fsa_flops: FsaTerms,
    pub nsa_bytes: u64,
    pub nsa_flops: u64,
    pub nsa_inner_iterations: u64,
    pub peak_buffer_elems: u64,
}

impl MeasuredCost {
    pub fn memory_ratio(&self) -> Option<f64> {
        (self.nsa_bytes > 0 && self.fsa_bytes.total() > 0)
            .then(|| self.fsa_bytes.total() as f64 / self.nsa_bytes as f64)
    }

    pub fn flops_ratio(&self) -> Option<f64> {
        (self.nsa_flops > 0 && self.fsa_flops.total() > 0)
            .then(|| self.fsa_flops.total() as f64 / self.nsa_flops as f64)
    }
}

/// Maps meter phases onto cost components: block pass → selected, stats →
/// stats, reduce → reduce, query-major → NSA. Backward phases are ignored.
pub fn measured_cost(meter: &TrafficMeter) -> MeasuredCost {
    let terms = |f: fn(&crate::meter::PhaseCounters) -> u64| FsaTerms {
        selected: f(meter.phase(Phase::BlockPass)),
        stats: f(meter.phase(Phase::Stats)),
        reduce: f(meter.phase(Phase::Reduce)),
    };
    let qm = meter.phase(Phase::QueryMajor);
    MeasuredCost {
        fsa_bytes: terms(|c| c.bytes()),
        fsa_flops: terms(|c| c.flops),
        nsa_bytes: qm.bytes(),
        nsa_flops: qm.flops,
        nsa_inner_iterations: qm.inner_iterations,
        peak_buffer_elems: meter.peak_buffer_elems,
    }
}

/// Whether a [`CostRow`] holds formula values or meter readings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostSource {
    Analytic,
    Measured,
}

/// One line of a cost report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub g: usize,
    #[serde(rename = "B_K")]
    pub block_k: usize,
    #[serde(rename = "T")]
    pub top_t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub fsa_bytes: u64,
    pub nsa_bytes: u64,
    pub memory_ratio: f64,
    pub fsa_flops: u64,
    pub nsa_flops: u64,
    pub flops_ratio: f64,
    pub source: CostSource,
    /// Empty for measured rows.
    pub nsa_flops_rederived: Option<u64>,
}

impl CostRow {
    pub fn analytic(cfg: &AttentionConfig) -> Result<Self> {
        let c = analytic_cost(cfg)?;
        Ok(Self {
            g: cfg.group_size(),
            block_k: cfg.block_k,
            top_t: cfg.top_t,
            n: cfg.n,
            d: cfg.uniform_head_dim()?,
            fsa_bytes: c.fsa_bytes.total(),
            nsa_bytes: c.nsa_bytes,
            memory_ratio: c.memory_ratio(),
            fsa_flops: c.fsa_flops.total(),
            nsa_flops: c.nsa_flops,
            flops_ratio: c.flops_ratio(),
            source: CostSource::Analytic,
            nsa_flops_rederived: Some(c.nsa_flops_rederived),
        })
    }

    /// Needs a meter holding both an FSA and an NSA forward run.
    pub fn measured(cfg: &AttentionConfig, meter: &TrafficMeter) -> Result<Self> {
        let m = measured_cost(meter);
        Ok(Self {
            g: cfg.group_size(),
            block_k: cfg.block_k,
            top_t: cfg.top_t,
            n: cfg.n,
            d: cfg.uniform_head_dim()?,
            fsa_bytes: m.fsa_bytes.total(),
            nsa_bytes: m.nsa_bytes,
            memory_ratio: m.memory_ratio().unwrap_or(f64::NAN),
            fsa_flops: m.fsa_flops.total(),
            nsa_flops: m.nsa_flops,
            flops_ratio: m.flops_ratio().unwrap_or(f64::NAN),
            source: CostSource::Measured,
            nsa_flops_rederived: None,
        })
    }
}
