//! Query-major selected attention, the baseline schedule.
//!
//! One task per (KV head, token) batches the `g` query heads of the group,
//! padded with zero rows up to `min_tile` when `g < min_tile`. Padding is
//! loaded and multiplied like real data and dropped at the store. The task
//! walks its selected blocks in ascending order with a local online softmax;
//! blocks starting after the token are skipped, the token's own block is
//! loaded in full and masked.

use crate::config::AttentionConfig;
use crate::error::Result;
use crate::fsa::grad_prep;
use crate::meter::{Phase, TaskMeter, TrafficMeter};
use crate::oracle::{AttentionOutput, Gradients};
use crate::schedule::{run_tasks, HeadMatrices, TaskOrder};
use crate::selection::SelectionTensor;
use crate::tensor::{axpy, dot, HeadedTensor};

/// Query rows of one (KV head, token) task: `g` real rows, then zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedHeadBatch {
    /// `max(g, min_tile)` rows of width `d_K`, row-major.
    pub rows: Vec<f64>,
    pub valid_mask: Vec<bool>,
    width: usize,
}

impl PaddedHeadBatch {
    pub fn gather(q: &HeadedTensor, kv_head: usize, token: usize, cfg: &AttentionConfig) -> Self {
        let padded = cfg.group_size().max(cfg.min_tile);
        let mut rows = vec![0.0; padded * cfg.d_k];
        let mut valid_mask = vec![false; padded];
        for (r, j) in cfg.heads_of(kv_head).enumerate() {
            for c in 0..cfg.d_k {
                rows[r * cfg.d_k + c] = q.get(token, c, j);
            }
            valid_mask[r] = true;
        }
        Self {
            rows,
            valid_mask,
            width: cfg.d_k,
        }
    }

    pub fn row_count(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r * self.width..(r + 1) * self.width]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NsaOptions {
    pub task_order: TaskOrder,
}

/// Result of a query-major forward run.
#[derive(Debug, Clone)]
pub struct NsaForward {
    pub output: AttentionOutput,
    pub meter: TrafficMeter,
}

#[derive(Debug, Clone)]
pub struct NsaBackward {
    pub grads: Gradients,
    pub meter: TrafficMeter,
}

struct RowResult {
    /// `g` output rows.
    out: Vec<f64>,
    lse: Vec<f64>,
    meter: TaskMeter,
}

/// Runs one (KV head, token) task over an already gathered batch.
fn row_forward(
    batch: &PaddedHeadBatch,
    kh: usize,
    t: usize,
    k_mat: &[f64],
    v_mat: &[f64],
    sel: &SelectionTensor,
    cfg: &AttentionConfig,
) -> RowResult {
    let (d_k, d_v, bk) = (cfg.d_k, cfg.d_v, cfg.block_k);
    let scale = cfg.softmax_scale();
    let rows = batch.row_count();
    let mut tm = TaskMeter::new(cfg.bytes_per_elem);
    tm.load_query(rows * d_k);
    let mut m = vec![f64::NEG_INFINITY; rows];
    let mut l = vec![0.0; rows];
    let mut acc = vec![0.0; rows * d_v];
    for blk in sel.row_blocks(kh, t) {
        let start = blk * bk;
        if start > t {
            continue;
        }
        tm.load_kv(bk * (d_k + d_v));
        tm.iteration();
        tm.flops(2 * rows * bk * (d_k + d_v));
        let visible = (t + 1 - start).min(bk);
        for r in 0..rows {
            let qr = batch.row(r);
            let logits: Vec<f64> = (start..start + visible)
                .map(|s| scale * dot(qr, &k_mat[s * d_k..(s + 1) * d_k]))
                .collect();
            let blk_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let new_m = m[r].max(blk_max);
            let correction = (m[r] - new_m).exp();
            l[r] *= correction;
            let acc_r = &mut acc[r * d_v..(r + 1) * d_v];
            acc_r.iter_mut().for_each(|x| *x *= correction);
            for (off, z) in logits.iter().enumerate() {
                let p = (z - new_m).exp();
                l[r] += p;
                let s = start + off;
                axpy(p, &v_mat[s * d_v..(s + 1) * d_v], acc_r);
            }
            m[r] = new_m;
        }
    }
    let mut out = Vec::with_capacity(cfg.group_size() * d_v);
    let mut lse = Vec::with_capacity(cfg.group_size());
    for r in (0..rows).filter(|&r| batch.valid_mask[r]) {
        out.extend(acc[r * d_v..(r + 1) * d_v].iter().map(|x| x / l[r]));
        lse.push(m[r] + l[r].ln());
    }
    tm.store(cfg.group_size() * d_v);
    RowResult { out, lse, meter: tm }
}

fn check(q: &HeadedTensor, k: &HeadedTensor, v: &HeadedTensor, sel: &SelectionTensor, cfg: &AttentionConfig) -> Result<()> {
    cfg.ensure_validated()?;
    q.expect_shape("Q", cfg.n, cfg.d_k, cfg.h)?;
    k.expect_shape("K", cfg.n, cfg.d_k, cfg.h_kv)?;
    v.expect_shape("V", cfg.n, cfg.d_v, cfg.h_kv)?;
    sel.validate(cfg)
}

/// Query-major forward over the selected blocks.
pub fn nsa_selected_forward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    sel: &SelectionTensor,
    cfg: &AttentionConfig,
    opts: &NsaOptions,
) -> Result<NsaForward> {
    check(q, k, v, sel, cfg)?;
    let k_mats: Vec<_> = (0..cfg.h_kv).map(|kh| k.head_matrix(kh)).collect();
    let v_mats: Vec<_> = (0..cfg.h_kv).map(|kh| v.head_matrix(kh)).collect();
    let n = cfg.n;
    let results = run_tasks(cfg.h_kv * n, opts.task_order, |task| {
        let (kh, t) = (task / n, task % n);
        let batch = PaddedHeadBatch::gather(q, kh, t, cfg);
        Ok(row_forward(&batch, kh, t, &k_mats[kh], &v_mats[kh], sel, cfg))
    })?;

    let mut meter = TrafficMeter::new(cfg.bytes_per_elem);
    let mut out = HeadedTensor::zeros(n, cfg.d_v, cfg.h);
    let mut lse = vec![0.0; cfg.h * n];
    for (task, r) in results.iter().enumerate() {
        let (kh, t) = (task / n, task % n);
        meter.record(Phase::QueryMajor, &r.meter);
        for (gi, j) in cfg.heads_of(kh).enumerate() {
            for c in 0..cfg.d_v {
                out.set(t, c, j, r.out[gi * cfg.d_v + c]);
            }
            lse[j * n + t] = r.lse[gi];
        }
    }
    Ok(NsaForward {
        output: AttentionOutput { out, lse },
        meter,
    })
}

struct GradRow {
    /// `g` dQ rows.
    dq: Vec<f64>,
    /// (block, dK partial, dV partial) in selection order.
    partials: Vec<(usize, Vec<f64>, Vec<f64>)>,
    meter: TaskMeter,
}

/// Query-major backward. Each (KV head, token) task accumulates its `dQ`
/// rows locally and writes per-block `dK`/`dV` partials; a second phase sums
/// the partials of every (KV head, block) in ascending token order.
pub fn nsa_selected_backward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    sel: &SelectionTensor,
    d_out: &HeadedTensor,
    cfg: &AttentionConfig,
    opts: &NsaOptions,
) -> Result<NsaBackward> {
    check(q, k, v, sel, cfg)?;
    d_out.expect_shape("dOut", cfg.n, cfg.d_v, cfg.h)?;
    let fwd = nsa_selected_forward(q, k, v, sel, cfg, opts)?;
    let mut meter = fwd.meter.clone();
    let delta = grad_prep(&fwd.output, d_out, cfg, &mut meter);

    let mats = HeadMatrices::new(q, k, v);
    let (n, d_k, d_v, bk, g) = (cfg.n, cfg.d_k, cfg.d_v, cfg.block_k, cfg.group_size());
    let padded = g.max(cfg.min_tile);
    let scale = cfg.softmax_scale();
    let rows = run_tasks(cfg.h_kv * n, opts.task_order, |task| {
        let (kh, t) = (task / n, task % n);
        let mut tm = TaskMeter::new(cfg.bytes_per_elem);
        tm.load_query(padded * d_k);
        tm.load(padded * d_v + 2 * g);
        let heads: Vec<usize> = cfg.heads_of(kh).collect();
        let mut dq = vec![0.0; g * d_k];
        let mut partials = Vec::new();
        for blk in sel.row_blocks(kh, t) {
            let start = blk * bk;
            if start > t {
                continue;
            }
            tm.load_kv(bk * (d_k + d_v));
            tm.iteration();
            tm.flops(padded * bk * (6 * d_k + 4 * d_v));
            let mut dk = vec![0.0; bk * d_k];
            let mut dv = vec![0.0; bk * d_v];
            let visible = (t + 1 - start).min(bk);
            for (gi, &j) in heads.iter().enumerate() {
                let qt = &mats.q[j][t * d_k..(t + 1) * d_k];
                let dot_t = d_out.row(t, j);
                let lse = fwd.output.lse_at(j, t);
                let big_d = delta[j * n + t];
                for off in 0..visible {
                    let s = start + off;
                    let ks = &mats.k[kh][s * d_k..(s + 1) * d_k];
                    let vs = &mats.v[kh][s * d_v..(s + 1) * d_v];
                    let p = (scale * dot(qt, ks) - lse).exp();
                    let ds = p * (dot(&dot_t, vs) - big_d);
                    axpy(p, &dot_t, &mut dv[off * d_v..(off + 1) * d_v]);
                    axpy(scale * ds, qt, &mut dk[off * d_k..(off + 1) * d_k]);
                    axpy(scale * ds, ks, &mut dq[gi * d_k..(gi + 1) * d_k]);
                }
            }
            tm.store(bk * (d_k + d_v));
            partials.push((blk, dk, dv));
        }
        tm.store(g * d_k);
        Ok(GradRow { dq, partials, meter: tm })
    })?;

    let mut dq = HeadedTensor::zeros(n, d_k, cfg.h);
    for (task, r) in rows.iter().enumerate() {
        let (kh, t) = (task / n, task % n);
        meter.record(Phase::GradQueryMajor, &r.meter);
        for (gi, j) in cfg.heads_of(kh).enumerate() {
            for c in 0..d_k {
                dq.set(t, c, j, r.dq[gi * d_k + c]);
            }
        }
    }

    let mut dk_mats = vec![vec![0.0; n * d_k]; cfg.h_kv];
    let mut dv_mats = vec![vec![0.0; n * d_v]; cfg.h_kv];
    let mut partial_elems = 0usize;
    for kh in 0..cfg.h_kv {
        for i in 0..cfg.num_blocks() {
            let mut tm = TaskMeter::new(cfg.bytes_per_elem);
            let dk_blk = &mut dk_mats[kh][i * bk * d_k..(i + 1) * bk * d_k];
            let mut count = 0;
            for t in 0..n {
                if let Some((_, pk, pv)) = rows[kh * n + t].partials.iter().find(|p| p.0 == i) {
                    axpy(1.0, pk, dk_blk);
                    axpy(1.0, pv, &mut dv_mats[kh][i * bk * d_v..(i + 1) * bk * d_v]);
                    count += 1;
                }
            }
            if count == 0 {
                meter.record_empty_task(Phase::GradReduce);
                continue;
            }
            partial_elems += count * bk * (d_k + d_v);
            tm.load(count * bk * (d_k + d_v));
            tm.flops(count * bk * (d_k + d_v));
            tm.store(bk * (d_k + d_v));
            meter.record(Phase::GradReduce, &tm);
        }
    }
    meter.note_buffer(partial_elems);
    Ok(NsaBackward {
        grads: Gradients {
            dq,
            dk: HeadedTensor::from_head_matrices(&dk_mats, n, d_k),
            dv: HeadedTensor::from_head_matrices(&dv_mats, n, d_v),
        },
        meter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_backward, masked_attention_forward, BlockMask};
    use crate::scenario::{random_tensor, TensorStream};
    use crate::selection::{select_topk_blocks, self_block_selection, uniform_scores};

    struct Case {
        cfg: AttentionConfig,
        q: HeadedTensor,
        k: HeadedTensor,
        v: HeadedTensor,
        sel: SelectionTensor,
    }

    fn case(n: usize, d: usize, h: usize, h_kv: usize, bk: usize, t: usize, seed: u64) -> Case {
        let cfg = AttentionConfig::new(n, d, h, h_kv, bk, t).with_block_q(1).validate().unwrap();
        Case {
            q: random_tensor(seed, TensorStream::Query, n, d, h),
            k: random_tensor(seed, TensorStream::Key, n, d, h_kv),
            v: random_tensor(seed, TensorStream::Value, n, d, h_kv),
            sel: select_topk_blocks(&uniform_scores(&cfg, seed), &cfg),
            cfg,
        }
    }

    #[test]
    fn forward_matches_masked_oracle() {
        for (seed, (h, h_kv)) in [(4, 2), (8, 1), (16, 1), (1, 1)].into_iter().enumerate() {
            let c = case(64, 8, h, h_kv, 8, 3, seed as u64);
            let f = nsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &NsaOptions::default()).unwrap();
            let mask = BlockMask::from_selection(&c.sel, &c.cfg);
            let o = masked_attention_forward(&c.q, &c.k, &c.v, &mask, &c.cfg).unwrap();
            assert!(f.output.max_abs_diff(&o) <= 1e-10);
        }
    }

    #[test]
    fn padding_rows_follow_min_tile() {
        for (h, expect_rows) in [(8, 8), (1, 8), (2, 8), (12, 12)] {
            let c = case(16, 4, h, 1, 4, 2, 1);
            let b = PaddedHeadBatch::gather(&c.q, 0, 5, &c.cfg);
            assert_eq!(b.row_count(), expect_rows);
            assert_eq!(b.valid_mask.iter().filter(|&&x| x).count(), h);
            assert!(b.rows[h * 4..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn query_load_counts_padding() {
        for h in [1, 2, 4, 8] {
            let c = case(32, 4, h, 1, 8, 2, 2);
            let f = nsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &NsaOptions::default()).unwrap();
            let qm = f.meter.phase(Phase::QueryMajor);
            assert_eq!(qm.query_bytes_loaded, 32 * 8 * 4 * 2, "g = {h}");
            assert_eq!(qm.task_count, 32);
        }
    }

    #[test]
    fn padded_rows_never_reach_outputs() {
        let c = case(32, 4, 2, 1, 8, 2, 3);
        let (km, vm) = (c.k.head_matrix(0), c.v.head_matrix(0));
        let clean = PaddedHeadBatch::gather(&c.q, 0, 20, &c.cfg);
        let mut noisy = clean.clone();
        for x in &mut noisy.rows[2 * 4..] {
            *x = 37.5;
        }
        let a = row_forward(&clean, 0, 20, &km, &vm, &c.sel, &c.cfg);
        let b = row_forward(&noisy, 0, 20, &km, &vm, &c.sel, &c.cfg);
        assert_eq!(a.out, b.out);
        assert_eq!(a.lse, b.lse);
    }

    #[test]
    fn kv_loads_cover_whole_selected_blocks() {
        let c = case(64, 4, 2, 1, 16, 3, 4);
        let f = nsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &NsaOptions::default()).unwrap();
        let blocks_loaded: usize = c.sel.entry_count(0);
        assert_eq!(
            f.meter.phase(Phase::QueryMajor).kv_bytes_loaded,
            (blocks_loaded * 2 * 16 * 4 * 2) as u64
        );
        assert_eq!(f.meter.phase(Phase::QueryMajor).inner_iterations, blocks_loaded as u64);
    }

    #[test]
    fn backward_matches_dense() {
        for (seed, (h, h_kv)) in [(4, 2), (2, 1), (8, 1)].into_iter().enumerate() {
            let c = case(16, 4, h, h_kv, 4, 2, 10 + seed as u64);
            let d_out = random_tensor(seed as u64, TensorStream::OutputGrad, 16, 4, h);
            let b = nsa_selected_backward(&c.q, &c.k, &c.v, &c.sel, &d_out, &c.cfg, &NsaOptions::default()).unwrap();
            let mask = BlockMask::from_selection(&c.sel, &c.cfg);
            let dense = dense_backward(&c.q, &c.k, &c.v, &mask, &d_out, &c.cfg).unwrap();
            assert!(b.grads.max_abs_diff(&dense) <= 1e-9);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let c = case(16, 4, 2, 1, 4, 2, 20);
        let b = nsa_selected_backward(&c.q, &c.k, &c.v, &c.sel, &HeadedTensor::zeros(16, 4, 2), &c.cfg, &NsaOptions::default())
            .unwrap();
        let g = &b.grads;
        assert!(g.dq.as_slice().iter().chain(g.dk.as_slice()).chain(g.dv.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn self_block_unit_backward_passes_upstream_to_values() {
        let cfg = AttentionConfig::new(8, 3, 1, 1, 1, 1).with_block_q(1).validate().unwrap();
        let q = random_tensor(21, TensorStream::Query, 8, 3, 1);
        let k = random_tensor(21, TensorStream::Key, 8, 3, 1);
        let v = random_tensor(21, TensorStream::Value, 8, 3, 1);
        let d_out = random_tensor(21, TensorStream::OutputGrad, 8, 3, 1);
        let b = nsa_selected_backward(&q, &k, &v, &self_block_selection(&cfg), &d_out, &cfg, &NsaOptions::default())
            .unwrap();
        assert_eq!(b.grads.dv, d_out);
    }

    #[test]
    fn schedules_are_bit_identical() {
        let c = case(64, 4, 4, 2, 8, 3, 22);
        let run = |order| {
            nsa_selected_forward(&c.q, &c.k, &c.v, &c.sel, &c.cfg, &NsaOptions { task_order: order }).unwrap()
        };
        let base = run(TaskOrder::Ascending);
        for order in [TaskOrder::Descending, TaskOrder::Parallel] {
            let other = run(order);
            assert_eq!(base.output, other.output);
            assert_eq!(base.meter, other.meter);
        }
    }
}
