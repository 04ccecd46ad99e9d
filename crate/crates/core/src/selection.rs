//! Block selection (which KV blocks each query token attends) and its inverse.
//!
//! A [`SelectionTensor`] is the query-major view: for every (KV head, token)
//! up to `T` block indices, ascending, padded with [`SENTINEL`]. The
//! [`InverseIndex`] is the block-major view used by the FSA schedule: for
//! every (KV head, block) the sorted list of attending tokens and the compact
//! output-buffer slot each one writes to.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::tensor::{dot, HeadedTensor};

/// Marks an unused slot in a selection row.
pub const SENTINEL: i32 = -1;

/// Selected block indices, shape `(h_K, N, T)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionTensor {
    idx: Vec<i32>,
    kv_heads: usize,
    n: usize,
    top_t: usize,
}

impl SelectionTensor {
    /// Wraps raw storage without checking row contents; see [`SelectionTensor::validate`].
    pub fn from_raw(idx: Vec<i32>, kv_heads: usize, n: usize, top_t: usize) -> Result<Self> {
        if idx.len() != kv_heads * n * top_t {
            return Err(Error::MalformedSelection(format!(
                "storage holds {} entries, header implies {}",
                idx.len(),
                kv_heads * n * top_t
            )));
        }
        Ok(Self {
            idx,
            kv_heads,
            n,
            top_t,
        })
    }

    /// Builds a tensor from per-row block lists; rows shorter than `top_t` are sentinel-padded.
    pub fn from_rows(
        kv_heads: usize,
        n: usize,
        top_t: usize,
        mut row: impl FnMut(usize, usize) -> Vec<usize>,
    ) -> Result<Self> {
        let mut idx = vec![SENTINEL; kv_heads * n * top_t];
        for kh in 0..kv_heads {
            for t in 0..n {
                let blocks = row(kh, t);
                if blocks.len() > top_t {
                    return Err(Error::MalformedSelection(format!(
                        "row ({kh}, {t}) has {} entries, T = {top_t}",
                        blocks.len()
                    )));
                }
                let base = (kh * n + t) * top_t;
                for (slot, &b) in blocks.iter().enumerate() {
                    idx[base + slot] = b as i32;
                }
            }
        }
        Ok(Self {
            idx,
            kv_heads,
            n,
            top_t,
        })
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn tokens(&self) -> usize {
        self.n
    }

    pub fn top_t(&self) -> usize {
        self.top_t
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.idx
    }

    pub fn row(&self, kv_head: usize, t: usize) -> &[i32] {
        let base = (kv_head * self.n + t) * self.top_t;
        &self.idx[base..base + self.top_t]
    }

    /// Non-sentinel block indices of one row, ascending.
    pub fn row_blocks(&self, kv_head: usize, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(kv_head, t)
            .iter()
            .take_while(|&&e| e != SENTINEL)
            .map(|&e| e as usize)
    }

    /// Number of non-sentinel entries for one KV head.
    pub fn entry_count(&self, kv_head: usize) -> usize {
        (0..self.n).map(|t| self.row_blocks(kv_head, t).count()).sum()
    }

    /// Structural checks: shape matches `cfg`; each row is a strictly increasing
    /// run of causal block indices (`0 ≤ e ≤ t / B_K`) followed only by
    /// sentinels; every row holds at least one block.
    ///
    /// Whether a row contains the query's own block is a property of the
    /// selection policy, checked separately by [`SelectionTensor::covers_own_block`].
    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        if (self.kv_heads, self.n, self.top_t) != (cfg.h_kv, cfg.n, cfg.top_t) {
            return Err(Error::MalformedSelection(format!(
                "shape ({}, {}, {}) does not match config ({}, {}, {})",
                self.kv_heads, self.n, self.top_t, cfg.h_kv, cfg.n, cfg.top_t
            )));
        }
        for kh in 0..self.kv_heads {
            for t in 0..self.n {
                let row = self.row(kh, t);
                let own = (t / cfg.block_k) as i32;
                let mut prev: Option<i32> = None;
                let mut ended = false;
                for &e in row {
                    if e == SENTINEL {
                        ended = true;
                        continue;
                    }
                    if ended {
                        return Err(Error::MalformedSelection(format!(
                            "row ({kh}, {t}): block {e} after a sentinel"
                        )));
                    }
                    if e < 0 || e > own {
                        return Err(Error::MalformedSelection(format!(
                            "row ({kh}, {t}): non-causal block {e} (own block {own})"
                        )));
                    }
                    if let Some(p) = prev {
                        if e == p {
                            return Err(Error::MalformedSelection(format!(
                                "row ({kh}, {t}): duplicate block {e}"
                            )));
                        }
                        if e < p {
                            return Err(Error::MalformedSelection(format!(
                                "row ({kh}, {t}): blocks not ascending ({p} then {e})"
                            )));
                        }
                    }
                    prev = Some(e);
                }
                if prev.is_none() {
                    return Err(Error::MalformedSelection(format!("row ({kh}, {t}) is empty")));
                }
            }
        }
        Ok(())
    }

    /// True if every row lists the block containing its token.
    pub fn covers_own_block(&self, cfg: &AttentionConfig) -> bool {
        (0..self.kv_heads).all(|kh| {
            (0..self.n).all(|t| self.row_blocks(kh, t).any(|b| b == t / cfg.block_k))
        })
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }

    /// Flat little-endian layout: `h_K, N, T` as `i32`, then the row-major body.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (3 + self.idx.len()));
        for v in [self.kv_heads, self.n, self.top_t] {
            out.extend_from_slice(&(v as i32).to_le_bytes());
        }
        for &e in &self.idx {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || !bytes.len().is_multiple_of(4) {
            return Err(Error::MalformedSelection(format!(
                "binary selection of {} bytes is not a whole i32 stream with header",
                bytes.len()
            )));
        }
        let words: Vec<i32> = bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let dims: Vec<usize> = words[..3]
            .iter()
            .map(|&w| usize::try_from(w))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::MalformedSelection("negative header dimension".into()))?;
        Self::from_raw(words[3..].to_vec(), dims[0], dims[1], dims[2])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Importance of every (KV head, token, block) triple, shape `(h_K, N, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScores {
    data: Vec<f64>,
    kv_heads: usize,
    n: usize,
    blocks: usize,
}

impl BlockScores {
    pub fn from_fn(
        kv_heads: usize,
        n: usize,
        blocks: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(kv_heads * n * blocks);
        for kh in 0..kv_heads {
            for t in 0..n {
                for i in 0..blocks {
                    data.push(f(kh, t, i));
                }
            }
        }
        Self {
            data,
            kv_heads,
            n,
            blocks,
        }
    }

    #[inline]
    pub fn get(&self, kv_head: usize, t: usize, block: usize) -> f64 {
        self.data[(kv_head * self.n + t) * self.blocks + block]
    }
}

/// Own block plus the `T − 1` highest-scoring earlier blocks, ascending.
///
/// Ties break toward the lower block index; blocks after the token's own block
/// are never considered. Rows with fewer than `T` causal blocks are padded.
pub fn select_topk_blocks(scores: &BlockScores, cfg: &AttentionConfig) -> SelectionTensor {
    let mut idx = vec![SENTINEL; cfg.h_kv * cfg.n * cfg.top_t];
    let mut candidates: Vec<usize> = Vec::with_capacity(cfg.num_blocks());
    for kh in 0..cfg.h_kv {
        for t in 0..cfg.n {
            let own = cfg.block_of(t);
            candidates.clear();
            candidates.extend(0..own);
            // Stable sort by descending score keeps lower indices first on ties.
            candidates.sort_by(|&a, &b| scores.get(kh, t, b).total_cmp(&scores.get(kh, t, a)));
            candidates.truncate(cfg.top_t - 1);
            candidates.push(own);
            candidates.sort_unstable();
            let base = (kh * cfg.n + t) * cfg.top_t;
            for (slot, &b) in candidates.iter().enumerate() {
                idx[base + slot] = b as i32;
            }
        }
    }
    SelectionTensor {
        idx,
        kv_heads: cfg.h_kv,
        n: cfg.n,
        top_t: cfg.top_t,
    }
}

/// Group-mean compressed logits: `mean_j Q[t, :, j] · K_cmp[i, :, kh] / √d_K`
/// over the query heads `j` of group `kh`. `k_cmp` has one row per block.
pub fn importance_scores_from_compressed(
    q: &HeadedTensor,
    k_cmp: &HeadedTensor,
    cfg: &AttentionConfig,
) -> Result<BlockScores> {
    cfg.ensure_validated()?;
    q.expect_shape("Q", cfg.n, cfg.d_k, cfg.h)?;
    k_cmp.expect_shape("K_cmp", cfg.num_blocks(), cfg.d_k, cfg.h_kv)?;
    let scale = cfg.softmax_scale() / cfg.group_size() as f64;
    let k_rows: Vec<Vec<Vec<f64>>> = (0..cfg.h_kv)
        .map(|kh| (0..cfg.num_blocks()).map(|i| k_cmp.row(i, kh)).collect())
        .collect();
    let mut data = Vec::with_capacity(cfg.h_kv * cfg.n * cfg.num_blocks());
    for (kh, rows) in k_rows.iter().enumerate() {
        for t in 0..cfg.n {
            let q_rows: Vec<Vec<f64>> = cfg.heads_of(kh).map(|j| q.row(t, j)).collect();
            for k_row in rows {
                let s: f64 = q_rows.iter().map(|qr| dot(qr, k_row)).sum();
                data.push(s * scale);
            }
        }
    }
    Ok(BlockScores {
        data,
        kv_heads: cfg.h_kv,
        n: cfg.n,
        blocks: cfg.num_blocks(),
    })
}

/// Uniform random scores; feeding them to [`select_topk_blocks`] gives the
/// own block plus `T − 1` earlier blocks drawn uniformly without replacement.
pub fn uniform_scores(cfg: &AttentionConfig, seed: u64) -> BlockScores {
    use rand::Rng;
    let mut rng = crate::scenario::stream_rng(seed, crate::scenario::TensorStream::Selection);
    BlockScores::from_fn(cfg.h_kv, cfg.n, cfg.num_blocks(), |_, _, _| rng.random::<f64>())
}

/// Every row holds only the token's own block.
pub fn self_block_selection(cfg: &AttentionConfig) -> SelectionTensor {
    SelectionTensor::from_rows(cfg.h_kv, cfg.n, cfg.top_t, |_, t| vec![cfg.block_of(t)])
        .expect("single-entry rows fit any T >= 1")
}

/// Every row holds all causal blocks; requires `T = b`.
pub fn full_selection(cfg: &AttentionConfig) -> Result<SelectionTensor> {
    if cfg.top_t != cfg.num_blocks() {
        return Err(Error::InvalidConfig(vec![format!(
            "full selection needs T = b = {}",
            cfg.num_blocks()
        )]));
    }
    SelectionTensor::from_rows(cfg.h_kv, cfg.n, cfg.top_t, |_, t| (0..=cfg.block_of(t)).collect())
}

/// Attending tokens of one (KV head, block) and their output-buffer slots.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockQueries {
    /// Sorted ascending (𝓘ᵢ).
    pub queries: Vec<usize>,
    /// `slots[k]` is the buffer row of `queries[k]` (𝓞ᵢ); prefix-compacted.
    pub slots: Vec<usize>,
}

impl BlockQueries {
    pub fn n_valid(&self) -> usize {
        self.queries.len()
    }

    pub fn slot_of(&self, token: usize) -> Option<usize> {
        self.queries.binary_search(&token).ok().map(|k| self.slots[k])
    }
}

/// Block-major inversion of a [`SelectionTensor`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InverseIndex {
    lists: Vec<BlockQueries>,
    kv_heads: usize,
    blocks: usize,
    n: usize,
    top_t: usize,
}

impl InverseIndex {
    pub fn get(&self, kv_head: usize, block: usize) -> &BlockQueries {
        &self.lists[kv_head * self.blocks + block]
    }

    pub fn n_valid(&self, kv_head: usize, block: usize) -> usize {
        self.get(kv_head, block).n_valid()
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Largest `n_valid` over the blocks of one KV head.
    pub fn max_n_valid(&self, kv_head: usize) -> usize {
        (0..self.blocks).map(|i| self.n_valid(kv_head, i)).max().unwrap_or(0)
    }

    /// `Σ_i n_valid(kh, i)`; equals the non-sentinel entry count of head `kh`.
    pub fn total_valid(&self, kv_head: usize) -> usize {
        (0..self.blocks).map(|i| self.n_valid(kv_head, i)).sum()
    }

    /// Rebuilds the query-major selection this index was built from.
    pub fn to_selection(&self) -> SelectionTensor {
        let mut rows = vec![Vec::new(); self.kv_heads * self.n];
        for kh in 0..self.kv_heads {
            for i in 0..self.blocks {
                for &t in &self.get(kh, i).queries {
                    rows[kh * self.n + t].push(i);
                }
            }
        }
        SelectionTensor::from_rows(self.kv_heads, self.n, self.top_t, |kh, t| {
            std::mem::take(&mut rows[kh * self.n + t])
        })
        .expect("rows come from a valid selection")
    }
}

/// Inverts a validated selection: token `t` is in 𝓘ᵢ of head `kh` iff block
/// `i` appears in row `(kh, t)`. Slots follow ascending token order.
pub fn build_inverse_index(sel: &SelectionTensor, cfg: &AttentionConfig) -> Result<InverseIndex> {
    build_inverse_index_in_order(sel, cfg, 0..cfg.n)
}

pub(crate) fn build_inverse_index_in_order(
    sel: &SelectionTensor,
    cfg: &AttentionConfig,
    token_order: impl Iterator<Item = usize> + Clone,
) -> Result<InverseIndex> {
    cfg.ensure_validated()?;
    sel.validate(cfg)?;
    let blocks = cfg.num_blocks();
    let mut lists = vec![BlockQueries::default(); cfg.h_kv * blocks];
    for kh in 0..cfg.h_kv {
        for t in token_order.clone() {
            for b in sel.row_blocks(kh, t) {
                lists[kh * blocks + b].queries.push(t);
            }
        }
    }
    for list in &mut lists {
        list.queries.sort_unstable();
        list.slots = (0..list.queries.len()).collect();
    }
    Ok(InverseIndex {
        lists,
        kv_heads: cfg.h_kv,
        blocks,
        n: cfg.n,
        top_t: cfg.top_t,
    })
}

/// Memoizes inverse indices by selection content, so a backward pass reuses
/// the index its forward pass built.
#[derive(Debug, Default)]
pub struct IndexCache {
    entries: Mutex<Vec<(u64, SelectionTensor, Arc<InverseIndex>)>>,
    hits: AtomicUsize,
    builds: AtomicUsize,
}

impl IndexCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(&self, sel: &SelectionTensor, cfg: &AttentionConfig) -> Result<Arc<InverseIndex>> {
        let key = sel.fingerprint();
        let mut entries = self.entries.lock().expect("index cache poisoned");
        if let Some((_, _, inv)) = entries.iter().find(|(k, s, _)| *k == key && s == sel) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(inv));
        }
        let inv = Arc::new(build_inverse_index(sel, cfg)?);
        self.builds.fetch_add(1, Ordering::Relaxed);
        entries.push((key, sel.clone(), Arc::clone(&inv)));
        Ok(inv)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn builds(&self) -> usize {
        self.builds.load(Ordering::Relaxed)
    }
}
