//! Compressed and sliding-window branches, and the per-token gated mix of the
//! compressed, selected and sliding outputs.

use rand::Rng;

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::nsa::{nsa_selected_forward, NsaOptions};
use crate::oracle::AttentionOutput;
use crate::scenario::{stream_rng, TensorStream};
use crate::selection::SelectionTensor;
use crate::tensor::{axpy, dot, HeadedTensor};

/// Per-token gates in `[0, 1]`, ordered (compressed, selected, sliding).
#[derive(Debug, Clone, PartialEq)]
pub struct GateTensor {
    tau: Vec<[f64; 3]>,
}

impl GateTensor {
    pub fn new(tau: Vec<[f64; 3]>) -> Result<Self> {
        for (t, row) in tau.iter().enumerate() {
            if row.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::InvalidConfig(vec![format!(
                    "gate row {t} = {row:?} has an entry outside [0, 1]"
                )]));
            }
        }
        Ok(Self { tau })
    }

    /// The same gates for every token.
    pub fn constant(n: usize, tau: [f64; 3]) -> Result<Self> {
        Self::new(vec![tau; n])
    }

    /// `U[0, 1)` gates from the scenario's gate stream.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, TensorStream::Gates);
        let tau = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        Self { tau }
    }

    pub fn tokens(&self) -> usize {
        self.tau.len()
    }

    pub fn get(&self, t: usize) -> [f64; 3] {
        self.tau[t]
    }
}

/// One mean-pooled K and V row per block, shape `(b, d, h_K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedKV {
    pub k: HeadedTensor,
    pub v: HeadedTensor,
}

fn mean_pool(x: &HeadedTensor, bk: usize) -> HeadedTensor {
    let (n, dim, heads) = x.shape();
    let blocks = n / bk;
    let mut out = HeadedTensor::zeros(blocks, dim, heads);
    let src = x.as_slice();
    let dst = out.as_mut_slice();
    let row = dim * heads;
    for i in 0..blocks {
        let acc = &mut dst[i * row..(i + 1) * row];
        for s in i * bk..(i + 1) * bk {
            axpy(1.0, &src[s * row..(s + 1) * row], acc);
        }
        acc.iter_mut().for_each(|a| *a /= bk as f64);
    }
    out
}

/// Non-overlapping mean pooling with size and stride `B_K`.
pub fn compress_kv(k: &HeadedTensor, v: &HeadedTensor, cfg: &AttentionConfig) -> Result<CompressedKV> {
    cfg.ensure_validated()?;
    k.expect_shape("K", cfg.n, cfg.d_k, cfg.h_kv)?;
    v.expect_shape("V", cfg.n, cfg.d_v, cfg.h_kv)?;
    Ok(CompressedKV {
        k: mean_pool(k, cfg.block_k),
        v: mean_pool(v, cfg.block_k),
    })
}

/// Softmax over explicit (key, value) rows for one query row.
fn attend_rows<'a>(q: &[f64], scale: f64, rows: impl Iterator<Item = (&'a [f64], &'a [f64])>, d_v: usize) -> (Vec<f64>, f64) {
    let pairs: Vec<(f64, &[f64])> = rows.map(|(k, v)| (scale * dot(q, k), v)).collect();
    let m = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut l = 0.0;
    let mut acc = vec![0.0; d_v];
    for (z, v) in &pairs {
        let p = (z - m).exp();
        l += p;
        axpy(p, v, &mut acc);
    }
    acc.iter_mut().for_each(|a| *a /= l);
    (acc, m + l.ln())
}

fn per_row_forward(
    q: &HeadedTensor,
    cfg: &AttentionConfig,
    mut row: impl FnMut(usize, usize, &[f64]) -> (Vec<f64>, f64),
) -> AttentionOutput {
    let n = cfg.n;
    let mut out = HeadedTensor::zeros(n, cfg.d_v, cfg.h);
    let mut lse = vec![0.0; cfg.h * n];
    for j in 0..cfg.h {
        let kh = cfg.kv_head_of(j);
        for t in 0..n {
            let (o, z) = row(kh, t, &q.row(t, j));
            for (c, x) in o.into_iter().enumerate() {
                out.set(t, c, j, x);
            }
            lse[j * n + t] = z;
        }
    }
    AttentionOutput { out, lse }
}

/// Token `t` attends every pooled block that ends at or before `t + 1`. A
/// token with no complete block yet attends one row: the mean of `K`/`V`
/// rows `0..=t`.
pub fn compressed_attention_forward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    cmp: &CompressedKV,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    cfg.ensure_validated()?;
    q.expect_shape("Q", cfg.n, cfg.d_k, cfg.h)?;
    k.expect_shape("K", cfg.n, cfg.d_k, cfg.h_kv)?;
    v.expect_shape("V", cfg.n, cfg.d_v, cfg.h_kv)?;
    cmp.k.expect_shape("K_cmp", cfg.num_blocks(), cfg.d_k, cfg.h_kv)?;
    cmp.v.expect_shape("V_cmp", cfg.num_blocks(), cfg.d_v, cfg.h_kv)?;
    let scale = cfg.softmax_scale();
    let k_cmp: Vec<_> = (0..cfg.h_kv).map(|kh| cmp.k.head_matrix(kh)).collect();
    let v_cmp: Vec<_> = (0..cfg.h_kv).map(|kh| cmp.v.head_matrix(kh)).collect();
    let (d_k, d_v, bk) = (cfg.d_k, cfg.d_v, cfg.block_k);
    Ok(per_row_forward(q, cfg, |kh, t, qt| {
        let formed = (t + 1) / bk;
        if formed == 0 {
            let mean = |x: &HeadedTensor, dim: usize| {
                let mut acc = vec![0.0; dim];
                for s in 0..=t {
                    axpy(1.0, &x.row(s, kh), &mut acc);
                }
                acc.iter_mut().for_each(|a| *a /= (t + 1) as f64);
                acc
            };
            let (kp, vp) = (mean(k, d_k), mean(v, d_v));
            return attend_rows(qt, scale, std::iter::once((&kp[..], &vp[..])), d_v);
        }
        let rows = (0..formed).map(|i| (&k_cmp[kh][i * d_k..(i + 1) * d_k], &v_cmp[kh][i * d_v..(i + 1) * d_v]));
        attend_rows(qt, scale, rows, d_v)
    }))
}

/// Causal attention over the last `cfg.window` tokens, `s ∈ [t − W + 1, t]`.
pub fn sliding_attention_forward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    cfg.ensure_validated()?;
    q.expect_shape("Q", cfg.n, cfg.d_k, cfg.h)?;
    k.expect_shape("K", cfg.n, cfg.d_k, cfg.h_kv)?;
    v.expect_shape("V", cfg.n, cfg.d_v, cfg.h_kv)?;
    let scale = cfg.softmax_scale();
    let k_mats: Vec<_> = (0..cfg.h_kv).map(|kh| k.head_matrix(kh)).collect();
    let v_mats: Vec<_> = (0..cfg.h_kv).map(|kh| v.head_matrix(kh)).collect();
    let (d_k, d_v, w) = (cfg.d_k, cfg.d_v, cfg.window);
    Ok(per_row_forward(q, cfg, |kh, t, qt| {
        let rows = (t.saturating_sub(w - 1)..=t)
            .map(|s| (&k_mats[kh][s * d_k..(s + 1) * d_k], &v_mats[kh][s * d_v..(s + 1) * d_v]));
        attend_rows(qt, scale, rows, d_v)
    }))
}

/// `out[t] = Σ_c tau[t][c] · outs[c][t]` with `outs` ordered (compressed,
/// selected, sliding). The mix has no single softmax normalizer, so the
/// returned `lse` is empty.
pub fn gated_combine(outs: [&AttentionOutput; 3], tau: &GateTensor) -> Result<AttentionOutput> {
    let shape = outs[0].out.shape();
    for o in &outs[1..] {
        if o.out.shape() != shape {
            let (a, b) = (shape, o.out.shape());
            return Err(Error::ShapeMismatch {
                what: "branch output",
                expected: vec![a.0, a.1, a.2],
                actual: vec![b.0, b.1, b.2],
            });
        }
    }
    if tau.tokens() != shape.0 {
        return Err(Error::ShapeMismatch {
            what: "gates",
            expected: vec![shape.0, 3],
            actual: vec![tau.tokens(), 3],
        });
    }
    let row = shape.1 * shape.2;
    let mut out = HeadedTensor::zeros(shape.0, shape.1, shape.2);
    let dst = out.as_mut_slice();
    for t in 0..shape.0 {
        let gates = tau.get(t);
        let acc = &mut dst[t * row..(t + 1) * row];
        for (o, g) in outs.iter().zip(gates) {
            axpy(g, &o.out.as_slice()[t * row..(t + 1) * row], acc);
        }
    }
    Ok(AttentionOutput { out, lse: Vec::new() })
}

/// All three branches and their gated mix. The selected branch runs on the
/// query-major engine.
#[derive(Debug, Clone)]
pub struct GatedForward {
    pub compressed: AttentionOutput,
    pub selected: AttentionOutput,
    pub sliding: AttentionOutput,
    pub combined: AttentionOutput,
}

pub fn gated_attention_forward(
    q: &HeadedTensor,
    k: &HeadedTensor,
    v: &HeadedTensor,
    sel: &SelectionTensor,
    tau: &GateTensor,
    cfg: &AttentionConfig,
) -> Result<GatedForward> {
    let cmp = compress_kv(k, v, cfg)?;
    let compressed = compressed_attention_forward(q, k, v, &cmp, cfg)?;
    let selected = nsa_selected_forward(q, k, v, sel, cfg, &NsaOptions::default())?.output;
    let sliding = sliding_attention_forward(q, k, v, cfg)?;
    let combined = gated_combine([&compressed, &selected, &sliding], tau)?;
    Ok(GatedForward {
        compressed,
        selected,
        sliding,
        combined,
    })
}
