//! KV-block-major selected attention.
//!
//! One task per (query head, KV block) loads its block once and walks the
//! gathered batches of attending tokens (𝓘ᵢ), writing unnormalized partial
//! rows into a compact [`OutputBuffer`] at the slots 𝓞ᵢ. Three passes, no
//! atomics:
//!
//! 1. [`compute_softmax_stats`]: per-token running max `m` and exp-sum `l`.
//! 2. [`fsa_block_pass_forward`]: `exp(QKᵀ·scale − m)·V` per task, tasks with
//!    no attending tokens return before any load.
//! 3. [`fsa_reduce_forward`]: sum partial rows in ascending block order, divide by `l`.
//!
//! The backward pass runs one task per (KV head, block): it owns `dK_i` and
//! `dV_i` outright, and writes `dQ` partials to a buffer reduced afterwards.

use std::sync::Arc;

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::meter::{Phase, TaskMeter, TrafficMeter};
use crate::oracle::{AttentionOutput, Gradients};
use crate::schedule::{run_tasks, HeadMatrices, TaskOrder};
use crate::selection::{IndexCache, InverseIndex, SelectionTensor};
use crate::tensor::{axpy, dot, HeadedTensor};

/// How the statistics pre-pass produces `m` and `l`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum StatsMode {
    /// Exact `m`, `l` for every query head.
    #[default]
    PerQueryHead,
    /// One `m` per KV-head group (the max over its query heads); `l` per head
    /// rebased onto it. Same traffic as `PerQueryHead`.
    SharedGroupMax,
    /// The pre-pass runs once per KV head using the group's leading query
    /// head only; every head of the group reuses that `m`. `l` is not
    /// produced up front: the block pass stores per-row partial exp-sums and
    /// the reduction sums them. Exact while logits of different heads stay
    /// within ~700 of each other (f64 `exp` range).
    SpeculativePerKvHead,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FsaOptions {
    pub stats_mode: StatsMode,
    pub task_order: TaskOrder,
}

/// Per (query head, token) softmax statistics, indexed `head * N + token`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxStats {
    pub m: Vec<f64>,
    /// `None` in [`StatsMode::SpeculativePerKvHead`], where the reduction derives `l`.
    pub l: Option<Vec<f64>>,
    n: usize,
}

impl SoftmaxStats {
    pub fn m_at(&self, head: usize, token: usize) -> f64 {
        self.m[head * self.n + token]
    }

    pub fn l_at(&self, head: usize, token: usize) -> Option<f64> {
        self.l.as_ref().map(|l| l[head * self.n + token])
    }

    /// Replaces `m` with `new_m` and rescales `l` so that `l·e^m` is unchanged.
    pub fn rebased(&self, new_m: &[f64]) -> Self {
        assert_eq!(new_m.len(), self.m.len());
        let l = self.l.as_ref().map(|l| {
            l.iter()
                .zip(&self.m)
                .zip(new_m)
                .map(|((l, m), nm)| l * (m - nm).exp())
                .collect()
        });
        Self {
            m: new_m.to_vec(),
            l,
            n: self.n,
        }
    }
}

/// Compact per-(query head, block) regions of `width`-wide rows.
///
/// Region `(j, i)` holds `n_valid(j / g, i)` rows; row `𝓞ᵢ[t]` belongs to
/// token `t`. Regions are disjoint and laid out in `(j, i)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBuffer {
    data: Vec<f64>,
    /// Per-row partial exp-sums (speculative stats only).
    row_sums: Option<Vec<f64>>,
    /// Row offset of each region; length `h·b + 1`.
    offsets: Vec<usize>,
    width: usize,
    blocks: usize,
}

impl OutputBuffer {
    fn new(inv: &InverseIndex, cfg: &AttentionConfig, width: usize, with_row_sums: bool) -> Self {
        let blocks = cfg.num_blocks();
        let mut offsets = Vec::with_capacity(cfg.h * blocks + 1);
        let mut rows = 0;
        for j in 0..cfg.h {
            for i in 0..blocks {
                offsets.push(rows);
                rows += inv.n_valid(cfg.kv_head_of(j), i);
            }
        }
        offsets.push(rows);
        Self {
            data: vec![0.0; rows * width],
            row_sums: with_row_sums.then(|| vec![0.0; rows]),
            offsets,
            width,
            blocks,
        }
    }

    fn region_index(&self, head: usize, block: usize) -> usize {
        head * self.blocks + block
    }

    /// Reserved rows of region `(head, block)`.
    pub fn capacity(&self, head: usize, block: usize) -> usize {
        let r = self.region_index(head, block);
        self.offsets[r + 1] - self.offsets[r]
    }

    pub fn region(&self, head: usize, block: usize) -> &[f64] {
        let r = self.region_index(head, block);
        &self.data[self.offsets[r] * self.width..self.offsets[r + 1] * self.width]
    }

    pub fn row(&self, head: usize, block: usize, slot: usize) -> Option<&[f64]> {
        (slot < self.capacity(head, block)).then(|| {
            let start = (self.offsets[self.region_index(head, block)] + slot) * self.width;
            &self.data[start..start + self.width]
        })
    }

    pub fn row_sum(&self, head: usize, block: usize, slot: usize) -> Option<f64> {
        let sums = self.row_sums.as_ref()?;
        (slot < self.capacity(head, block)).then(|| sums[self.offsets[self.region_index(head, block)] + slot])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Total reserved elements over every region.
    pub fn total_elems(&self) -> usize {
        self.data.len()
    }

    /// Elements reserved for one query head (the unit the buffer is reused at).
    pub fn head_elems(&self, head: usize) -> usize {
        let lo = self.offsets[head * self.blocks];
        let hi = self.offsets[(head + 1) * self.blocks];
        (hi - lo) * self.width
    }

    pub fn max_region_rows(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn write_region(&mut self, head: usize, block: usize, rows: &[f64], sums: Option<&[f64]>) {
        let r = self.region_index(head, block);
        let (lo, hi) = (self.offsets[r], self.offsets[r + 1]);
        debug_assert_eq!(rows.len(), (hi - lo) * self.width);
        self.data[lo * self.width..hi * self.width].copy_from_slice(rows);
        if let (Some(dst), Some(src)) = (self.row_sums.as_mut(), sums) {
            dst[lo..hi].copy_from_slice(src);
        }
    }
}

fn check_qkv(q: &HeadedTensor, k: &HeadedTensor, v: &HeadedTensor, cfg: &AttentionConfig) -> Result<()> {
    cfg.ensure_validated()?;
    q.expect_shape("Q", cfg.n, cfg.d_k, cfg.h)?;
    k.expect_shape("K", cfg.n, cfg.d_k, cfg.h_kv)?;
    v.expect_shape("V", cfg.n, cfg.d_v, cfg.h_kv)
}

/// Output of one stats task: per processed head, per slot, (local max, local sum).
struct StatsTask {
    local: Vec<Vec<(f64, f64)>>,
    meter: Option<TaskMeter>,
}

/// Online-softmax pre-pass, KV-block-major.
///
/// Task `(kh, i)` loads `K_i` once and, for each gathered batch of attending
/// tokens, the query rows of the heads it serves; it stores one local
/// (max, exp-sum) pair per (head, token, block) (one scalar in speculative
/// mode). A merge then folds the local pairs of each token in ascending block
/// order: `m = max mᵢ`, `l = Σ lᵢ·e^{mᵢ − m}`.
pub fn compute_softmax_stats(
    q: &HeadedTensor,
    k: &HeadedTensor,
    inv: &InverseIndex,
    sel: &SelectionTensor,
    cfg: &AttentionConfig,
    opts: &FsaOptions,
    meter: &mut TrafficMeter,
) -> Result<SoftmaxStats> {
    cfg.ensure_validated()?;
    q.expect_shape("Q", cfg.n, cfg.d_k, cfg.h)?;
    k.expect_shape("K", cfg.n, cfg.d_k, cfg.h_kv)?;
    let q_mats: Vec<_> = (0..cfg.h).map(|j| q.head_matrix(j)).collect();
    let k_mats: Vec<_> = (0..cfg.h_kv).map(|kh| k.head_matrix(kh)).collect();
    let (n, d_k, bk, blocks) = (cfg.n, cfg.d_k, cfg.block_k, cfg.num_blocks());
    let scale = cfg.softmax_scale();
    let speculative = opts.stats_mode == StatsMode::SpeculativePerKvHead;
    let heads_for = |kh: usize| -> Vec<usize> {
        if speculative {
            vec![cfg.heads_of(kh).start]
        } else {
            cfg.heads_of(kh).collect()
        }
    };
    let scalars_per_pair = if speculative { 1 } else { 2 };

    let tasks = run_tasks(cfg.h_kv * blocks, opts.task_order, |task| {
        let (kh, i) = (task / blocks, task % blocks);
        let list = inv.get(kh, i);
        if list.n_valid() == 0 {
            return Ok(StatsTask {
                local: Vec::new(),
                meter: None,
            });
        }
        let mut tm = TaskMeter::new(cfg.bytes_per_elem);
        tm.load_kv(bk * d_k);
        let k_block = &k_mats[kh][i * bk * d_k..(i + 1) * bk * d_k];
        let heads = heads_for(kh);
        let mut local = vec![vec![(0.0, 0.0); list.n_valid()]; heads.len()];
        for (hp, &j) in heads.iter().enumerate() {
            for (batch, slots) in list.queries.chunks(cfg.block_q).zip(list.slots.chunks(cfg.block_q)) {
                tm.iteration();
                tm.load_query(batch.len() * d_k);
                tm.flops(2 * batch.len() * bk * d_k);
                tm.store(batch.len() * scalars_per_pair);
                for (&t, &slot) in batch.iter().zip(slots) {
                    let qt = &q_mats[j][t * d_k..(t + 1) * d_k];
                    let visible = (t + 1).saturating_sub(i * bk).min(bk);
                    let logits: Vec<f64> = (0..visible)
                        .map(|s| scale * dot(qt, &k_block[s * d_k..(s + 1) * d_k]))
                        .collect();
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum = logits.iter().map(|z| (z - mx).exp()).sum();
                    local[hp][slot] = (mx, sum);
                }
            }
        }
        Ok(StatsTask { local, meter: Some(tm) })
    })?;

    let mut merge = TaskMeter::new(cfg.bytes_per_elem);
    merge.counters.task_count = 0;
    for st in &tasks {
        match &st.meter {
            Some(tm) => meter.record(Phase::Stats, tm),
            None => meter.record_empty_task(Phase::Stats),
        }
    }

    let mut m = vec![0.0; cfg.h * n];
    let mut l = vec![0.0; cfg.h * n];
    for kh in 0..cfg.h_kv {
        let heads = heads_for(kh);
        for (hp, &j) in heads.iter().enumerate() {
            for t in 0..n {
                let mut row_m = f64::NEG_INFINITY;
                let mut row_l = 0.0;
                let mut count = 0;
                for blk in sel.row_blocks(kh, t) {
                    let slot = inv.get(kh, blk).slot_of(t).ok_or(Error::MissingSlot {
                        kv_head: kh,
                        block: blk,
                        token: t,
                    })?;
                    let (lm, ls) = tasks[kh * blocks + blk].local[hp][slot];
                    let new_m = row_m.max(lm);
                    row_l = row_l * (row_m - new_m).exp() + ls * (lm - new_m).exp();
                    row_m = new_m;
                    count += 1;
                }
                if count == 0 {
                    return Err(Error::EmptyAttentionRow { head: j, token: t });
                }
                merge.load(count * scalars_per_pair);
                merge.flops(4 * count);
                merge.store(scalars_per_pair);
                m[j * n + t] = row_m;
                l[j * n + t] = row_l;
            }
        }
    }
    meter.record(Phase::Stats, &merge);

    let stats = match opts.stats_mode {
        StatsMode::PerQueryHead => SoftmaxStats { m, l: Some(l), n },
        StatsMode::SharedGroupMax => {
            let mut shared = m.clone();
            for kh in 0..cfg.h_kv {
                for t in 0..n {
                    let gm = cfg.heads_of(kh).map(|j| m[j * n + t]).fold(f64::NEG_INFINITY, f64::max);
                    for j in cfg.heads_of(kh) {
                        shared[j * n + t] = gm;
                    }
                }
            }
            SoftmaxStats { m, l: Some(l), n }.rebased(&shared)
        }
        StatsMode::SpeculativePerKvHead => {
            for kh in 0..cfg.h_kv {
                let lead = cfg.heads_of(kh).start;
                for j in cfg.heads_of(kh).skip(1) {
                    for t in 0..n {
                        m[j * n + t] = m[lead * n + t];
                    }
                }
            }
            SoftmaxStats { m, l: None, n }
        }
    };
    Ok(stats)
}

struct BlockTask {
    rows: Vec<f64>,
    sums: Option<Vec<f64>>,
    meter: Option<TaskMeter>,
}

/// Selected-attention kernel: one task per (query head, KV block).
///
/// Writes `Σ_s exp(q·k_s·scale − m)·v_s` over the block's visible positions
/// (`s ≤ t`) to each attending token's slot. With speculative stats it also
/// writes the row's exp-sum. Tasks with `n_valid = 0` touch no memory.
#[allow(clippy::too_many_arguments)]
pub fn fsa_block_pass_forward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    inv: &InverseIndex,
    stats: &SoftmaxStats,
    cfg: &AttentionConfig,
    opts: &FsaOptions,
    meter: &mut TrafficMeter,
) -> Result<OutputBuffer> {
    check_qkv(q, k, v, cfg)?;
    let mats = HeadMatrices::new(q, k, v);
    let (d_k, d_v, bk, blocks) = (cfg.d_k, cfg.d_v, cfg.block_k, cfg.num_blocks());
    let scale = cfg.softmax_scale();
    let with_sums = stats.l.is_none();
    let mut buf = OutputBuffer::new(inv, cfg, d_v, with_sums);

    let tasks = run_tasks(cfg.h * blocks, opts.task_order, |task| {
        let (j, i) = (task / blocks, task % blocks);
        let kh = cfg.kv_head_of(j);
        let list = inv.get(kh, i);
        let capacity = buf.capacity(j, i);
        if list.n_valid() == 0 {
            return Ok(BlockTask {
                rows: Vec::new(),
                sums: with_sums.then(Vec::new),
                meter: None,
            });
        }
        let mut tm = TaskMeter::new(cfg.bytes_per_elem);
        tm.load_kv(bk * (d_k + d_v));
        let k_block = &mats.k[kh][i * bk * d_k..(i + 1) * bk * d_k];
        let v_block = &mats.v[kh][i * bk * d_v..(i + 1) * bk * d_v];
        let mut rows = vec![0.0; capacity * d_v];
        let mut sums = vec![0.0; capacity];
        for (batch, slots) in list.queries.chunks(cfg.block_q).zip(list.slots.chunks(cfg.block_q)) {
            tm.iteration();
            tm.load_query(batch.len() * d_k);
            tm.load(batch.len());
            tm.flops(2 * batch.len() * bk * (d_k + d_v));
            tm.store(batch.len() * d_v + if with_sums { batch.len() } else { 0 });
            for (&t, &slot) in batch.iter().zip(slots) {
                if slot >= capacity {
                    return Err(Error::BufferOverflow {
                        head: j,
                        block: i,
                        slot,
                        capacity,
                    });
                }
                let qt = &mats.q[j][t * d_k..(t + 1) * d_k];
                let m = stats.m_at(j, t);
                let out = &mut rows[slot * d_v..(slot + 1) * d_v];
                let visible = (t + 1).saturating_sub(i * bk).min(bk);
                for s in 0..visible {
                    let p = (scale * dot(qt, &k_block[s * d_k..(s + 1) * d_k]) - m).exp();
                    sums[slot] += p;
                    axpy(p, &v_block[s * d_v..(s + 1) * d_v], out);
                }
            }
        }
        Ok(BlockTask {
            rows,
            sums: with_sums.then_some(sums),
            meter: Some(tm),
        })
    })?;

    for (task, bt) in tasks.iter().enumerate() {
        let (j, i) = (task / blocks, task % blocks);
        match &bt.meter {
            Some(tm) => {
                meter.record(Phase::BlockPass, tm);
                buf.write_region(j, i, &bt.rows, bt.sums.as_deref());
            }
            None => meter.record_empty_task(Phase::BlockPass),
        }
    }
    let per_head = (0..cfg.h).map(|j| buf.head_elems(j)).max().unwrap_or(0);
    meter.note_buffer(per_head);
    Ok(buf)
}

/// Reduction kernel: one task per (query head, token), summing the token's
/// partial rows in ascending block order and dividing by `l`.
pub fn fsa_reduce_forward(
    buf: &OutputBuffer,
    inv: &InverseIndex,
    sel: &SelectionTensor,
    stats: &SoftmaxStats,
    cfg: &AttentionConfig,
    meter: &mut TrafficMeter,
) -> Result<AttentionOutput> {
    cfg.ensure_validated()?;
    let (n, d_v) = (cfg.n, cfg.d_v);
    let mut outs = vec![vec![0.0; n * d_v]; cfg.h];
    let mut lse = vec![0.0; cfg.h * n];
    for (j, out) in outs.iter_mut().enumerate() {
        let kh = cfg.kv_head_of(j);
        for t in 0..n {
            let mut tm = TaskMeter::new(cfg.bytes_per_elem);
            let acc = &mut out[t * d_v..(t + 1) * d_v];
            let mut sum_l = 0.0;
            let mut count = 0;
            for blk in sel.row_blocks(kh, t) {
                let missing = Error::MissingSlot {
                    kv_head: kh,
                    block: blk,
                    token: t,
                };
                let slot = inv.get(kh, blk).slot_of(t).ok_or_else(|| missing.clone())?;
                let row = buf.row(j, blk, slot).ok_or_else(|| missing.clone())?;
                axpy(1.0, row, acc);
                if stats.l.is_none() {
                    sum_l += buf.row_sum(j, blk, slot).ok_or(missing)?;
                }
                count += 1;
            }
            if count == 0 {
                return Err(Error::EmptyAttentionRow { head: j, token: t });
            }
            let l = stats.l_at(j, t).unwrap_or(sum_l);
            acc.iter_mut().for_each(|x| *x /= l);
            lse[j * n + t] = stats.m_at(j, t) + l.ln();
            // partial rows (+ partial sums) in, m and l in, one row out
            tm.load(count * d_v + if stats.l.is_none() { count + 1 } else { 2 });
            tm.flops(count * d_v + d_v);
            tm.store(d_v);
            meter.record(Phase::Reduce, &tm);
        }
    }
    Ok(AttentionOutput {
        out: HeadedTensor::from_head_matrices(&outs, n, d_v),
        lse,
    })
}

/// Result of a full FSA forward run.
#[derive(Debug, Clone)]
pub struct FsaForward {
    pub output: AttentionOutput,
    pub stats: SoftmaxStats,
    pub buffer: OutputBuffer,
    pub meter: TrafficMeter,
    pub index: Arc<InverseIndex>,
}

/// Result of an FSA backward run (forward recomputation included in `meter`).
#[derive(Debug, Clone)]
pub struct FsaBackward {
    pub grads: Gradients,
    pub dq_buffer: OutputBuffer,
    pub meter: TrafficMeter,
    /// Largest number of tasks that wrote any one `dK_i`/`dV_i` region.
    pub max_kv_region_writers: usize,
}

/// Runs FSA passes and memoizes inverse indices across forward/backward calls.
#[derive(Debug)]
pub struct FsaEngine {
    cfg: AttentionConfig,
    opts: FsaOptions,
    cache: IndexCache,
}

impl FsaEngine {
    pub fn new(cfg: &AttentionConfig, opts: FsaOptions) -> Result<Self> {
        cfg.ensure_validated()?;
        Ok(Self {
            cfg: cfg.clone(),
            opts,
            cache: IndexCache::new(),
        })
    }

    pub fn index_cache(&self) -> &IndexCache {
        &self.cache
    }

    pub fn forward(
        &self,
        q: &HeadedTensor,
        k: &HeadedTensor,
        v: &HeadedTensor,
        sel: &SelectionTensor,
    ) -> Result<FsaForward> {
        let cfg = &self.cfg;
        check_qkv(q, k, v, cfg)?;
        let index = self.cache.get_or_build(sel, cfg)?;
        let mut meter = TrafficMeter::new(cfg.bytes_per_elem);
        let stats = compute_softmax_stats(q, k, &index, sel, cfg, &self.opts, &mut meter)?;
        let buffer = fsa_block_pass_forward(q, k, v, &index, &stats, cfg, &self.opts, &mut meter)?;
        let output = fsa_reduce_forward(&buffer, &index, sel, &stats, cfg, &mut meter)?;
        Ok(FsaForward {
            output,
            stats,
            buffer,
            meter,
            index,
        })
    }

    pub fn backward(
        &self,
        q: &HeadedTensor,
        k: &HeadedTensor,
        v: &HeadedTensor,
        sel: &SelectionTensor,
        d_out: &HeadedTensor,
    ) -> Result<FsaBackward> {
        let cfg = &self.cfg;
        d_out.expect_shape("dOut", cfg.n, cfg.d_v, cfg.h)?;
        let fwd = self.forward(q, k, v, sel)?;
        let index = self.cache.get_or_build(sel, cfg)?;
        let mut meter = fwd.meter.clone();
        let delta = grad_prep(&fwd.output, d_out, cfg, &mut meter);
        let (dk, dv, dq_buffer, writers) =
            fsa_backward_block_pass(q, k, v, d_out, &fwd.output, &delta, &index, cfg, &self.opts, &mut meter)?;
        let dq = fsa_reduce_dq(&dq_buffer, &index, sel, cfg, &mut meter)?;
        Ok(FsaBackward {
            grads: Gradients { dq, dk, dv },
            dq_buffer,
            meter,
            max_kv_region_writers: writers,
        })
    }
}

/// FSA forward with a fresh engine.
pub fn fsa_selected_forward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    sel: &SelectionTensor,
    cfg: &AttentionConfig,
    opts: &FsaOptions,
) -> Result<FsaForward> {
    FsaEngine::new(cfg, *opts)?.forward(q, k, v, sel)
}

/// FSA backward with a fresh engine; the forward's index is reused via the cache.
pub fn fsa_selected_backward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    sel: &SelectionTensor,
    d_out: &HeadedTensor,
    cfg: &AttentionConfig,
    opts: &FsaOptions,
) -> Result<FsaBackward> {
    FsaEngine::new(cfg, *opts)?.backward(q, k, v, sel, d_out)
}

/// `D[j, t] = dO[t, :, j] · O[t, :, j]`, indexed `j * N + t`.
pub(crate) fn grad_prep(
    out: &AttentionOutput,
    d_out: &HeadedTensor,
    cfg: &AttentionConfig,
    meter: &mut TrafficMeter,
) -> Vec<f64> {
    let n = cfg.n;
    let mut delta = vec![0.0; cfg.h * n];
    for j in 0..cfg.h {
        for t in 0..n {
            let mut tm = TaskMeter::new(cfg.bytes_per_elem);
            delta[j * n + t] = dot(&out.out.row(t, j), &d_out.row(t, j));
            tm.load(2 * cfg.d_v);
            tm.flops(2 * cfg.d_v);
            tm.store(1);
            meter.record(Phase::GradPrep, &tm);
        }
    }
    delta
}

struct GradTask {
    dk: Vec<f64>,
    dv: Vec<f64>,
    /// dQ partial rows, one vector per query head of the group.
    dq: Vec<Vec<f64>>,
    meter: Option<TaskMeter>,
}

/// Backward block kernel: one task per (KV head, block) iterating the group's
/// heads and gathered token batches. Returns (dK, dV, dQ partial buffer, max
/// writers per KV region).
#[allow(clippy::too_many_arguments)]
fn fsa_backward_block_pass(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    d_out: &HeadedTensor,
    fwd: &AttentionOutput,
    delta: &[f64],
    inv: &InverseIndex,
    cfg: &AttentionConfig,
    opts: &FsaOptions,
    meter: &mut TrafficMeter,
) -> Result<(HeadedTensor, HeadedTensor, OutputBuffer, usize)> {
    let mats = HeadMatrices::new(q, k, v);
    let do_mats: Vec<_> = (0..cfg.h).map(|j| d_out.head_matrix(j)).collect();
    let (n, d_k, d_v, bk, blocks) = (cfg.n, cfg.d_k, cfg.d_v, cfg.block_k, cfg.num_blocks());
    let scale = cfg.softmax_scale();
    let mut dq_buf = OutputBuffer::new(inv, cfg, d_k, false);

    let tasks = run_tasks(cfg.h_kv * blocks, opts.task_order, |task| {
        let (kh, i) = (task / blocks, task % blocks);
        let list = inv.get(kh, i);
        if list.n_valid() == 0 {
            return Ok(GradTask {
                dk: Vec::new(),
                dv: Vec::new(),
                dq: Vec::new(),
                meter: None,
            });
        }
        let mut tm = TaskMeter::new(cfg.bytes_per_elem);
        tm.load_kv(bk * (d_k + d_v));
        let k_block = &mats.k[kh][i * bk * d_k..(i + 1) * bk * d_k];
        let v_block = &mats.v[kh][i * bk * d_v..(i + 1) * bk * d_v];
        let mut dk = vec![0.0; bk * d_k];
        let mut dv = vec![0.0; bk * d_v];
        let mut dq = Vec::with_capacity(cfg.group_size());
        for j in cfg.heads_of(kh) {
            let mut dq_rows = vec![0.0; list.n_valid() * d_k];
            for (batch, slots) in list.queries.chunks(cfg.block_q).zip(list.slots.chunks(cfg.block_q)) {
                tm.iteration();
                tm.load_query(batch.len() * d_k);
                tm.load(batch.len() * d_v + 2 * batch.len());
                tm.flops(batch.len() * bk * (6 * d_k + 4 * d_v));
                tm.store(batch.len() * d_k);
                for (&t, &slot) in batch.iter().zip(slots) {
                    let qt = &mats.q[j][t * d_k..(t + 1) * d_k];
                    let dot_t = &do_mats[j][t * d_v..(t + 1) * d_v];
                    let lse = fwd.lse_at(j, t);
                    let big_d = delta[j * n + t];
                    let dq_row = &mut dq_rows[slot * d_k..(slot + 1) * d_k];
                    let visible = (t + 1).saturating_sub(i * bk).min(bk);
                    for s in 0..visible {
                        let ks = &k_block[s * d_k..(s + 1) * d_k];
                        let vs = &v_block[s * d_v..(s + 1) * d_v];
                        let p = (scale * dot(qt, ks) - lse).exp();
                        let ds = p * (dot(dot_t, vs) - big_d);
                        axpy(p, dot_t, &mut dv[s * d_v..(s + 1) * d_v]);
                        axpy(scale * ds, qt, &mut dk[s * d_k..(s + 1) * d_k]);
                        axpy(scale * ds, ks, dq_row);
                    }
                }
            }
            dq.push(dq_rows);
        }
        tm.store(bk * (d_k + d_v));
        Ok(GradTask {
            dk,
            dv,
            dq,
            meter: Some(tm),
        })
    })?;

    let mut dk_mats = vec![vec![0.0; n * d_k]; cfg.h_kv];
    let mut dv_mats = vec![vec![0.0; n * d_v]; cfg.h_kv];
    let mut writers = vec![0usize; cfg.h_kv * blocks];
    for (task, gt) in tasks.iter().enumerate() {
        let (kh, i) = (task / blocks, task % blocks);
        let Some(tm) = &gt.meter else {
            meter.record_empty_task(Phase::GradBlockPass);
            continue;
        };
        meter.record(Phase::GradBlockPass, tm);
        writers[task] += 1;
        dk_mats[kh][i * bk * d_k..(i + 1) * bk * d_k].copy_from_slice(&gt.dk);
        dv_mats[kh][i * bk * d_v..(i + 1) * bk * d_v].copy_from_slice(&gt.dv);
        for (j, rows) in cfg.heads_of(kh).zip(&gt.dq) {
            dq_buf.write_region(j, i, rows, None);
        }
    }
    let per_head = (0..cfg.h).map(|j| dq_buf.head_elems(j)).max().unwrap_or(0);
    meter.note_buffer(per_head);
    Ok((
        HeadedTensor::from_head_matrices(&dk_mats, n, d_k),
        HeadedTensor::from_head_matrices(&dv_mats, n, d_v),
        dq_buf,
        writers.into_iter().max().unwrap_or(0),
    ))
}

fn fsa_reduce_dq(
    buf: &OutputBuffer,
    inv: &InverseIndex,
    sel: &SelectionTensor,
    cfg: &AttentionConfig,
    meter: &mut TrafficMeter,
) -> Result<HeadedTensor> {
    let (n, d_k) = (cfg.n, cfg.d_k);
    let mut mats = vec![vec![0.0; n * d_k]; cfg.h];
    for (j, dq) in mats.iter_mut().enumerate() {
        let kh = cfg.kv_head_of(j);
        for t in 0..n {
            let mut tm = TaskMeter::new(cfg.bytes_per_elem);
            let mut count = 0;
            for blk in sel.row_blocks(kh, t) {
                let missing = Error::MissingSlot {
                    kv_head: kh,
                    block: blk,
                    token: t,
                };
                let slot = inv.get(kh, blk).slot_of(t).ok_or_else(|| missing.clone())?;
                let row = buf.row(j, blk, slot).ok_or(missing)?;
                axpy(1.0, row, &mut dq[t * d_k..(t + 1) * d_k]);
                count += 1;
            }
            tm.load(count * d_k);
            tm.flops(count * d_k);
            tm.store(d_k);
            meter.record(Phase::GradReduce, &tm);
        }
    }
    Ok(HeadedTensor::from_head_matrices(&mats, n, d_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_backward, full_attention_forward, masked_attention_forward, BlockMask};
    use crate::scenario::{random_tensor, TensorStream};
    use crate::selection::{build_inverse_index, full_selection, select_topk_blocks, self_block_selection, uniform_scores};

    struct Case {
        cfg: AttentionConfig,
        q: HeadedTensor,
        k: HeadedTensor,
        v: HeadedTensor,
        sel: SelectionTensor,
    }

    #[allow(clippy::too_many_arguments)]
    fn case(n: usize, d: usize, h: usize, h_kv: usize, bk: usize, t: usize, bq: usize, seed: u64) -> Case {
        let cfg = AttentionConfig::new(n, d, h, h_kv, bk, t).with_block_q(bq).validate().unwrap();
        let sel = select_topk_blocks(&uniform_scores(&cfg, seed), &cfg);
        Case {
            q: random_tensor(seed, TensorStream::Query, n, d, h),
            k: random_tensor(seed, TensorStream::Key, n, d, h_kv),
            v: random_tensor(seed, TensorStream::Value, n, d, h_kv),
            sel,
            cfg,
        }
    }

    fn oracle(c: &Case) -> AttentionOutput {
        masked_attention_forward(&c.q, &c.k, &c.v, &BlockMask::from_selection(&c.sel, &c.cfg), &c.cfg).unwrap()
    }

    #[test]
    fn single_logit_stats() {
        let cfg = AttentionConfig::new(1, 1, 1, 1, 1, 1).validate().unwrap();
        let z = HeadedTensor::zeros(1, 1, 1);
        let sel = self_block_selection(&cfg);
        let inv = build_inverse_index(&sel, &cfg).unwrap();
        let mut m = TrafficMeter::new(2);
        let s = compute_softmax_stats(&z, &z, &inv, &sel, &cfg, &FsaOptions::default(), &mut m).unwrap();
        assert_eq!((s.m_at(0, 0), s.l_at(0, 0)), (0.0, Some(1.0)));
    }

    #[test]
    fn two_equal_logits_stats() {
        let cfg = AttentionConfig::new(2, 1, 1, 1, 2, 1).with_block_q(1).validate().unwrap();
        let q = HeadedTensor::from_vec(vec![1.0, 2.0], 2, 1, 1).unwrap();
        let k = HeadedTensor::from_vec(vec![1.5, 1.5], 2, 1, 1).unwrap();
        let sel = self_block_selection(&cfg);
        let inv = build_inverse_index(&sel, &cfg).unwrap();
        let mut m = TrafficMeter::new(2);
        let s = compute_softmax_stats(&q, &k, &inv, &sel, &cfg, &FsaOptions::default(), &mut m).unwrap();
        assert_eq!((s.m_at(0, 1), s.l_at(0, 1)), (3.0, Some(2.0)));
    }

    #[test]
    fn stats_match_dense_row_max_and_sum() {
        let c = case(64, 8, 4, 2, 8, 3, 4, 1);
        let inv = build_inverse_index(&c.sel, &c.cfg).unwrap();
        let mut m = TrafficMeter::new(2);
        let s = compute_softmax_stats(&c.q, &c.k, &inv, &c.sel, &c.cfg, &FsaOptions::default(), &mut m).unwrap();
        let mask = BlockMask::from_selection(&c.sel, &c.cfg);
        for j in 0..4 {
            for t in 0..64 {
                let logits: Vec<f64> = (0..=t)
                    .filter(|&s| mask.allows(j / 2, t, s))
                    .map(|s| dot(&c.q.row(t, j), &c.k.row(s, j / 2)) / 8f64.sqrt())
                    .collect();
                let mx = logits.iter().copied().fold(f64::MIN, f64::max);
                let sum: f64 = logits.iter().map(|z| (z - mx).exp()).sum();
                assert!((s.m_at(j, t) - mx).abs() <= 1e-12);
                assert!((s.l_at(j, t).unwrap() - sum).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_matches_masked_oracle() {
        for (seed, (h, h_kv, bq)) in [(4, 2, 8), (8, 1, 3), (2, 2, 64)].into_iter().enumerate() {
            let c = case(64, 8, h, h_kv, 8, 2, bq, seed as u64);
            let f = fsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &FsaOptions::default()).unwrap();
            let o = oracle(&c);
            assert!(f.output.max_abs_diff(&o) <= 1e-10);
            let lse_err = f.output.lse.iter().zip(&o.lse).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(lse_err <= 1e-10);
        }
    }

    #[test]
    fn full_selection_equals_full_attention() {
        let cfg = AttentionConfig::new(32, 4, 2, 1, 8, 4).with_block_q(5).validate().unwrap();
        let q = random_tensor(3, TensorStream::Query, 32, 4, 2);
        let k = random_tensor(3, TensorStream::Key, 32, 4, 1);
        let v = random_tensor(3, TensorStream::Value, 32, 4, 1);
        let sel = full_selection(&cfg).unwrap();
        let f = fsa_selected_forward(&q, &k, &v, &sel, &cfg, &FsaOptions::default()).unwrap();
        let full = full_attention_forward(&q, &k, &v, &cfg).unwrap();
        assert!(f.output.max_abs_diff(&full) <= 1e-10);
    }

    #[test]
    fn self_block_unit_blocks_copy_values() {
        let cfg = AttentionConfig::new(8, 3, 2, 1, 1, 1).with_block_q(2).validate().unwrap();
        let q = random_tensor(4, TensorStream::Query, 8, 3, 2);
        let k = random_tensor(4, TensorStream::Key, 8, 3, 1);
        let v = random_tensor(4, TensorStream::Value, 8, 3, 1);
        let sel = self_block_selection(&cfg);
        let f = fsa_selected_forward(&q, &k, &v, &sel, &cfg, &FsaOptions::default()).unwrap();
        for t in 0..8 {
            // exp(z − m) = 1 for the single position
            assert_eq!(f.buffer.row(0, t, 0).unwrap(), v.row(t, 0).as_slice());
            for j in 0..2 {
                assert_eq!(f.output.out.row(t, j), v.row(t, 0));
            }
        }
    }

    #[test]
    fn identical_values_reduce_exactly() {
        let mut c = case(32, 4, 2, 1, 4, 3, 4, 5);
        c.v = HeadedTensor::from_fn(32, 4, 1, |_, x, _| [0.25, -1.0, 2.0, 0.5][x]);
        let f = fsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &FsaOptions::default()).unwrap();
        for t in 0..32 {
            for j in 0..2 {
                for (x, want) in [0.25, -1.0, 2.0, 0.5].into_iter().enumerate() {
                    assert!((f.output.out.get(t, x, j) - want).abs() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn single_block_rows_reduce_to_buffer_over_l() {
        let cfg = AttentionConfig::new(16, 4, 1, 1, 4, 1).with_block_q(3).validate().unwrap();
        let c = case(16, 4, 1, 1, 4, 1, 3, 6);
        let f = fsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &cfg, &FsaOptions::default()).unwrap();
        for t in 0..16 {
            let blk = t / 4;
            let row = f.buffer.row(0, blk, f.index.get(0, blk).slot_of(t).unwrap()).unwrap();
            let l = f.stats.l_at(0, t).unwrap();
            for (x, r) in row.iter().enumerate() {
                assert_eq!(f.output.out.get(t, x, 0), r / l);
            }
        }
    }

    #[test]
    fn early_return_tasks_record_nothing() {
        // Every token selects only block 0, so blocks 1..3 have no attending tokens.
        let cfg = AttentionConfig::new(16, 4, 2, 1, 4, 2).with_block_q(4).validate().unwrap();
        let sel = SelectionTensor::from_rows(1, 16, 2, |_, _| vec![0]).unwrap();
        let c = case(16, 4, 2, 1, 4, 2, 4, 7);
        let f = fsa_selected_forward(&c.q, &c.k, &c.v, &sel, &cfg, &FsaOptions::default()).unwrap();
        let bp = f.meter.phase(Phase::BlockPass);
        assert_eq!(bp.task_count, 2 * 4);
        assert_eq!(bp.kv_bytes_loaded, 2 * (4 * 8 * 2) as u64);
        assert_eq!(bp.inner_iterations, 2 * 4);
        for i in 1..4 {
            assert_eq!(f.buffer.capacity(0, i), 0);
        }
    }

    #[test]
    fn inner_iterations_count_gathered_batches() {
        let c = case(64, 4, 4, 2, 8, 3, 5, 8);
        let f = fsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &FsaOptions::default()).unwrap();
        let expect: u64 = (0..4)
            .flat_map(|j| (0..8).map(move |i| (j, i)))
            .map(|(j, i)| f.index.n_valid(j / 2, i).div_ceil(5) as u64)
            .sum();
        assert_eq!(f.meter.phase(Phase::BlockPass).inner_iterations, expect);
    }

    #[test]
    fn buffer_is_compact_and_bounded() {
        let c = case(128, 4, 2, 1, 8, 4, 8, 9);
        let f = fsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &FsaOptions::default()).unwrap();
        let inv = &f.index;
        assert_eq!(f.buffer.max_region_rows(), inv.max_n_valid(0));
        for j in 0..2 {
            assert!(f.buffer.head_elems(j) <= c.cfg.d_v * c.cfg.n * c.cfg.top_t);
        }
    }

    #[test]
    fn rebased_stats_leave_output_unchanged() {
        let c = case(64, 8, 4, 2, 8, 3, 4, 10);
        let opts = FsaOptions::default();
        let inv = build_inverse_index(&c.sel, &c.cfg).unwrap();
        let mut m = TrafficMeter::new(2);
        let stats = compute_softmax_stats(&c.q, &c.k, &inv, &c.sel, &c.cfg, &opts, &mut m).unwrap();
        let base = {
            let buf = fsa_block_pass_forward(&c.q, &c.k, &c.v, &inv, &stats, &c.cfg, &opts, &mut m).unwrap();
            fsa_reduce_forward(&buf, &inv, &c.sel, &stats, &c.cfg, &mut m).unwrap()
        };
        let shifts = random_tensor(10, TensorStream::Gates, 4 * 64, 1, 1);
        let new_m: Vec<f64> = stats.m.iter().zip(shifts.as_slice()).map(|(m, s)| m + 3.0 * s).collect();
        let shifted = stats.rebased(&new_m);
        let buf = fsa_block_pass_forward(&c.q, &c.k, &c.v, &inv, &shifted, &c.cfg, &opts, &mut m).unwrap();
        let out = fsa_reduce_forward(&buf, &inv, &c.sel, &shifted, &c.cfg, &mut m).unwrap();
        assert!(out.max_abs_diff(&base) <= 1e-10);
    }

    #[test]
    fn shared_and_speculative_stats_agree_with_exact() {
        let c = case(128, 8, 8, 2, 16, 4, 16, 11);
        let exact = fsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &FsaOptions::default()).unwrap();
        for mode in [StatsMode::SharedGroupMax, StatsMode::SpeculativePerKvHead] {
            let opts = FsaOptions {
                stats_mode: mode,
                ..Default::default()
            };
            let f = fsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &opts).unwrap();
            assert!(f.output.max_abs_diff(&exact.output) <= 1e-10, "{mode:?}");
            for kh in 0..2 {
                for t in 0..128 {
                    let heads: Vec<_> = c.cfg.heads_of(kh).map(|j| f.stats.m_at(j, t)).collect();
                    assert!(heads.iter().all(|&m| m == heads[0]));
                }
            }
        }
    }

    #[test]
    fn speculative_stats_load_one_query_head_per_kv_head() {
        let c = case(64, 4, 4, 1, 8, 2, 4, 12);
        let run = |mode| {
            let opts = FsaOptions {
                stats_mode: mode,
                ..Default::default()
            };
            fsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &opts).unwrap().meter
        };
        let exact = run(StatsMode::PerQueryHead);
        let speculative = run(StatsMode::SpeculativePerKvHead);
        let rows = c.sel.entry_count(0) as u64;
        assert_eq!(exact.phase(Phase::Stats).query_bytes_loaded, 4 * rows * 4 * 2);
        assert_eq!(speculative.phase(Phase::Stats).query_bytes_loaded, rows * 4 * 2);
    }

    #[test]
    fn schedules_are_bit_identical() {
        let c = case(128, 8, 4, 2, 16, 3, 7, 13);
        let d_out = random_tensor(13, TensorStream::OutputGrad, 128, 8, 4);
        let run = |order| {
            let opts = FsaOptions {
                task_order: order,
                ..Default::default()
            };
            let f = fsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &opts).unwrap();
            let b = fsa_selected_backward(&c.q, &c.k, &c.v, &c.sel, &d_out, &c.cfg, &opts).unwrap();
            (f.output, f.meter, b.grads)
        };
        let base = run(TaskOrder::Ascending);
        for order in [TaskOrder::Descending, TaskOrder::Parallel] {
            let other = run(order);
            assert_eq!(
                base.0.out.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                other.0.out.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
            assert_eq!(base.1, other.1);
            assert_eq!(base.2, other.2);
        }
    }

    #[test]
    fn backward_matches_dense() {
        let c = case(16, 4, 4, 2, 4, 2, 3, 14);
        let d_out = random_tensor(14, TensorStream::OutputGrad, 16, 4, 4);
        let b = fsa_selected_backward(&c.q, &c.k, &c.v, &c.sel, &d_out, &c.cfg, &FsaOptions::default()).unwrap();
        let mask = BlockMask::from_selection(&c.sel, &c.cfg);
        let dense = dense_backward(&c.q, &c.k, &c.v, &mask, &d_out, &c.cfg).unwrap();
        assert!(b.grads.max_abs_diff(&dense) <= 1e-9);
        assert_eq!(b.max_kv_region_writers, 1);
    }

    #[test]
    fn zero_upstream_zero_gradients_and_buffer() {
        let c = case(16, 4, 2, 1, 4, 2, 4, 15);
        let b = fsa_selected_backward(&c.q, &c.k, &c.v, &c.sel, &HeadedTensor::zeros(16, 4, 2), &c.cfg, &FsaOptions::default())
            .unwrap();
        assert!(b.dq_buffer.as_slice().iter().all(|&x| x == 0.0));
        let g = &b.grads;
        assert!(g.dq.as_slice().iter().chain(g.dk.as_slice()).chain(g.dv.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn self_block_unit_backward() {
        let cfg = AttentionConfig::new(8, 3, 1, 1, 1, 1).with_block_q(2).validate().unwrap();
        let q = random_tensor(16, TensorStream::Query, 8, 3, 1);
        let k = random_tensor(16, TensorStream::Key, 8, 3, 1);
        let v = random_tensor(16, TensorStream::Value, 8, 3, 1);
        let d_out = random_tensor(16, TensorStream::OutputGrad, 8, 3, 1);
        let b = fsa_selected_backward(&q, &k, &v, &self_block_selection(&cfg), &d_out, &cfg, &FsaOptions::default())
            .unwrap();
        assert_eq!(b.grads.dv, d_out);
        assert!(b.grads.dq.as_slice().iter().chain(b.grads.dk.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn backward_reuses_cached_index() {
        let c = case(32, 4, 2, 1, 8, 2, 4, 17);
        let d_out = random_tensor(17, TensorStream::OutputGrad, 32, 4, 2);
        let engine = FsaEngine::new(&c.cfg, FsaOptions::default()).unwrap();
        engine.forward(&c.q, &c.k, &c.v, &c.sel).unwrap();
        engine.backward(&c.q, &c.k, &c.v, &c.sel, &d_out).unwrap();
        assert_eq!(engine.index_cache().builds(), 1);
        assert!(engine.index_cache().hits() >= 2);
    }

    #[test]
    fn mismatched_index_reports_missing_slot() {
        let c = case(32, 4, 1, 1, 8, 2, 4, 18);
        let other = self_block_selection(&c.cfg);
        let inv = build_inverse_index(&other, &c.cfg).unwrap();
        let mut m = TrafficMeter::new(2);
        let err = compute_softmax_stats(&c.q, &c.k, &inv, &c.sel, &c.cfg, &FsaOptions::default(), &mut m);
        assert!(matches!(err, Err(Error::MissingSlot { .. })));
    }
}
