//! Dense O(N²) attention: the slow ground truth every engine is checked against.

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::selection::SelectionTensor;
use crate::tensor::{axpy, dot, HeadedTensor};

/// Attention result plus the per-(head, token) log-sum-exp of attended logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Shape `(N, d_V, h)`.
    pub out: HeadedTensor,
    /// Indexed `head * N + token`.
    pub lse: Vec<f64>,
}

impl AttentionOutput {
    pub fn lse_at(&self, head: usize, token: usize) -> f64 {
        self.lse[head * self.out.tokens() + token]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.out.max_abs_diff(&other.out)
    }
}

/// Dense boolean mask of shape `(h_K, N, N)`; `allow(kh, t, s)` is never true for `s > t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    allow: Vec<bool>,
    kv_heads: usize,
    n: usize,
}

impl BlockMask {
    /// Builds a mask from a predicate; positions after the query are always cleared.
    pub fn from_fn(kv_heads: usize, n: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut allow = vec![false; kv_heads * n * n];
        for kh in 0..kv_heads {
            for t in 0..n {
                for s in 0..=t {
                    allow[(kh * n + t) * n + s] = f(kh, t, s);
                }
            }
        }
        Self { allow, kv_heads, n }
    }

    pub fn causal(cfg: &AttentionConfig) -> Self {
        Self::from_fn(cfg.h_kv, cfg.n, |_, _, _| true)
    }

    pub fn self_only(cfg: &AttentionConfig) -> Self {
        Self::from_fn(cfg.h_kv, cfg.n, |_, t, s| s == t)
    }

    /// Causal band `s ∈ [t − W + 1, t]`.
    pub fn sliding_window(cfg: &AttentionConfig, window: usize) -> Self {
        Self::from_fn(cfg.h_kv, cfg.n, |_, t, s| s + window > t)
    }

    /// Dense realization of the selected branch: token `t` sees position `s ≤ t`
    /// iff the block of `s` is listed in row `(kh, t)`.
    pub fn from_selection(sel: &SelectionTensor, cfg: &AttentionConfig) -> Self {
        let n = cfg.n;
        let mut allow = vec![false; cfg.h_kv * n * n];
        for kh in 0..cfg.h_kv {
            for t in 0..n {
                for blk in sel.row_blocks(kh, t) {
                    let start = blk * cfg.block_k;
                    let end = ((blk + 1) * cfg.block_k).min(t + 1);
                    for s in start..end {
                        allow[(kh * n + t) * n + s] = true;
                    }
                }
            }
        }
        Self {
            allow,
            kv_heads: cfg.h_kv,
            n,
        }
    }

    #[inline]
    pub fn allows(&self, kv_head: usize, t: usize, s: usize) -> bool {
        self.allow[(kv_head * self.n + t) * self.n + s]
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn tokens(&self) -> usize {
        self.n
    }

    fn allowed(&self, kv_head: usize, t: usize) -> impl Iterator<Item = usize> + '_ {
        let base = (kv_head * self.n + t) * self.n;
        (0..=t).filter(move |&s| self.allow[base + s])
    }
}

/// Softmax weights of row `(head, t)` over the allowed positions, with the row's lse.
pub fn masked_softmax_weights(
    q: &HeadedTensor,
    k: &HeadedTensor,
    mask: &BlockMask,
    cfg: &AttentionConfig,
    head: usize,
    t: usize,
) -> Result<(Vec<(usize, f64)>, f64)> {
    let kh = cfg.kv_head_of(head);
    let qt = q.row(t, head);
    let scale = cfg.softmax_scale();
    let logits: Vec<(usize, f64)> = mask
        .allowed(kh, t)
        .map(|s| (s, scale * dot(&qt, &k.row(s, kh))))
        .collect();
    if logits.is_empty() {
        return Err(Error::EmptyAttentionRow { head, token: t });
    }
    let m = logits.iter().map(|&(_, z)| z).fold(f64::NEG_INFINITY, f64::max);
    let l: f64 = logits.iter().map(|&(_, z)| (z - m).exp()).sum();
    let weights = logits.iter().map(|&(s, z)| (s, (z - m).exp() / l)).collect();
    Ok((weights, m + l.ln()))
}

fn check_inputs(q: &HeadedTensor, k: &HeadedTensor, v: &HeadedTensor, cfg: &AttentionConfig) -> Result<()> {
    cfg.ensure_validated()?;
    q.expect_shape("Q", cfg.n, cfg.d_k, cfg.h)?;
    k.expect_shape("K", cfg.n, cfg.d_k, cfg.h_kv)?;
    v.expect_shape("V", cfg.n, cfg.d_v, cfg.h_kv)
}

fn check_mask(mask: &BlockMask, cfg: &AttentionConfig) -> Result<()> {
    if mask.kv_heads == cfg.h_kv && mask.n == cfg.n {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what: "mask",
            expected: vec![cfg.h_kv, cfg.n, cfg.n],
            actual: vec![mask.kv_heads, mask.n, mask.n],
        })
    }
}

/// Softmax-weighted sum over `positions`, per head matrices. Returns (row, lse).
fn attend(
    q_row: &[f64],
    k_mat: &[f64],
    v_mat: &[f64],
    d_k: usize,
    d_v: usize,
    scale: f64,
    positions: &[usize],
) -> (Vec<f64>, f64) {
    let logits: Vec<f64> = positions
        .iter()
        .map(|&s| scale * dot(q_row, &k_mat[s * d_k..(s + 1) * d_k]))
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut l = 0.0;
    let mut acc = vec![0.0; d_v];
    for (&s, &z) in positions.iter().zip(&logits) {
        let p = (z - m).exp();
        l += p;
        axpy(p, &v_mat[s * d_v..(s + 1) * d_v], &mut acc);
    }
    acc.iter_mut().for_each(|x| *x /= l);
    (acc, m + l.ln())
}

fn forward_with(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    cfg: &AttentionConfig,
    mut positions: impl FnMut(usize, usize) -> Vec<usize>,
) -> Result<AttentionOutput> {
    let (n, d_k, d_v) = (cfg.n, cfg.d_k, cfg.d_v);
    let scale = cfg.softmax_scale();
    let k_mats: Vec<_> = (0..cfg.h_kv).map(|kh| k.head_matrix(kh)).collect();
    let v_mats: Vec<_> = (0..cfg.h_kv).map(|kh| v.head_matrix(kh)).collect();
    let mut outs = Vec::with_capacity(cfg.h);
    let mut lse = vec![0.0; cfg.h * n];
    for j in 0..cfg.h {
        let kh = cfg.kv_head_of(j);
        let q_mat = q.head_matrix(j);
        let mut o = vec![0.0; n * d_v];
        for t in 0..n {
            let pos = positions(kh, t);
            if pos.is_empty() {
                return Err(Error::EmptyAttentionRow { head: j, token: t });
            }
            let (row, row_lse) = attend(
                &q_mat[t * d_k..(t + 1) * d_k],
                &k_mats[kh],
                &v_mats[kh],
                d_k,
                d_v,
                scale,
                &pos,
            );
            o[t * d_v..(t + 1) * d_v].copy_from_slice(&row);
            lse[j * n + t] = row_lse;
        }
        outs.push(o);
    }
    Ok(AttentionOutput {
        out: HeadedTensor::from_head_matrices(&outs, n, d_v),
        lse,
    })
}

/// Full causal attention: token `t` attends every `s ≤ t`.
pub fn full_attention_forward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    check_inputs(q, k, v, cfg)?;
    forward_with(q, k, v, cfg, |_, t| (0..=t).collect())
}

/// Attention restricted to the positions a mask allows.
pub fn masked_attention_forward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    mask: &BlockMask,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    check_inputs(q, k, v, cfg)?;
    check_mask(mask, cfg)?;
    forward_with(q, k, v, cfg, |kh, t| mask.allowed(kh, t).collect())
}

/// Gradients of `Σ dOut ∘ out` with respect to Q, K and V.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dq: HeadedTensor,
    pub dk: HeadedTensor,
    pub dv: HeadedTensor,
}

impl Gradients {
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.dq
            .max_abs_diff(&other.dq)
            .max(self.dk.max_abs_diff(&other.dk))
            .max(self.dv.max_abs_diff(&other.dv))
    }
}

/// Analytic backward of masked attention.
///
/// With `P` the row softmax, `dP_s = dO·V_s`, `D = Σ_s P_s dP_s`,
/// `dS_s = P_s (dP_s − D)`: `dQ_t = scale Σ dS_s K_s`, `dK_s += scale dS_s Q_t`,
/// `dV_s += P_s dO_t`. KV gradients accumulate over the query heads of a group.
pub fn dense_backward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    mask: &BlockMask,
    d_out: &HeadedTensor,
    cfg: &AttentionConfig,
) -> Result<Gradients> {
    check_inputs(q, k, v, cfg)?;
    check_mask(mask, cfg)?;
    d_out.expect_shape("dOut", cfg.n, cfg.d_v, cfg.h)?;
    let (n, d_k, d_v) = (cfg.n, cfg.d_k, cfg.d_v);
    let scale = cfg.softmax_scale();
    let k_mats: Vec<_> = (0..cfg.h_kv).map(|kh| k.head_matrix(kh)).collect();
    let v_mats: Vec<_> = (0..cfg.h_kv).map(|kh| v.head_matrix(kh)).collect();
    let mut dq_mats = vec![vec![0.0; n * d_k]; cfg.h];
    let mut dk_mats = vec![vec![0.0; n * d_k]; cfg.h_kv];
    let mut dv_mats = vec![vec![0.0; n * d_v]; cfg.h_kv];

    for (j, dq_mat) in dq_mats.iter_mut().enumerate() {
        let kh = cfg.kv_head_of(j);
        let q_mat = q.head_matrix(j);
        let do_mat = d_out.head_matrix(j);
        let (km, vm) = (&k_mats[kh], &v_mats[kh]);
        for t in 0..n {
            let pos: Vec<usize> = mask.allowed(kh, t).collect();
            if pos.is_empty() {
                return Err(Error::EmptyAttentionRow { head: j, token: t });
            }
            let qt = &q_mat[t * d_k..(t + 1) * d_k];
            let dot_t = &do_mat[t * d_v..(t + 1) * d_v];
            let logits: Vec<f64> = pos
                .iter()
                .map(|&s| scale * dot(qt, &km[s * d_k..(s + 1) * d_k]))
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l: f64 = logits.iter().map(|z| (z - m).exp()).sum();
            let p: Vec<f64> = logits.iter().map(|z| (z - m).exp() / l).collect();
            let dp: Vec<f64> = pos
                .iter()
                .map(|&s| dot(dot_t, &vm[s * d_v..(s + 1) * d_v]))
                .collect();
            let big_d: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (idx, &s) in pos.iter().enumerate() {
                let ds = p[idx] * (dp[idx] - big_d);
                axpy(scale * ds, &km[s * d_k..(s + 1) * d_k], &mut dq_mat[t * d_k..(t + 1) * d_k]);
                axpy(scale * ds, qt, &mut dk_mats[kh][s * d_k..(s + 1) * d_k]);
                axpy(p[idx], dot_t, &mut dv_mats[kh][s * d_v..(s + 1) * d_v]);
            }
        }
    }
    Ok(Gradients {
        dq: HeadedTensor::from_head_matrices(&dq_mats, n, d_k),
        dk: HeadedTensor::from_head_matrices(&dk_mats, n, d_k),
        dv: HeadedTensor::from_head_matrices(&dv_mats, n, d_v),
    })
}
