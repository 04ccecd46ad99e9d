//! Shape and sparsity parameters shared by every engine, plus metering knobs.
//!
//! Query head `j` reads KV head `j / g` where `g = h / h_K` is the GQA group
//! size. All arithmetic runs in `f64`; `bytes_per_elem` only scales the
//! traffic counters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_Q: usize = 16;
pub const DEFAULT_MIN_TILE: usize = 8;
pub const DEFAULT_WINDOW: usize = 512;
pub const DEFAULT_BYTES_PER_ELEM: usize = 2;

/// All shape/sparsity/hardware parameters of one attention problem.
///
/// Construct with [`AttentionConfig::new`] (or parse a file) and call
/// [`AttentionConfig::validate`] before handing it to an engine; validation
/// populates the derived group size `g` and block count `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttentionConfig {
    /// Sequence length in tokens.
    pub n: usize,
    /// Query/key head dimension.
    pub d_k: usize,
    /// Value head dimension.
    pub d_v: usize,
    /// Query heads.
    pub h: usize,
    /// KV heads.
    pub h_kv: usize,
    /// KV block size in tokens.
    pub block_k: usize,
    /// Selected blocks per query token.
    pub top_t: usize,
    /// FSA query-batch size in tokens.
    pub block_q: usize,
    /// Sliding-window width in tokens.
    pub window: usize,
    pub bytes_per_elem: usize,
    /// Smallest matrix-tile dimension accepted by the modeled MMA unit.
    pub min_tile: usize,
    #[serde(skip)]
    g: usize,
    #[serde(skip)]
    b: usize,
}

impl AttentionConfig {
    /// Uniform head dim `d`, defaults for `B_Q`, `W`, `min_tile`, `bytes_per_elem`.
    /// `B_Q` and `W` defaults are clamped to `n`.
    pub fn new(n: usize, d: usize, h: usize, h_kv: usize, block_k: usize, top_t: usize) -> Self {
        Self {
            n,
            d_k: d,
            d_v: d,
            h,
            h_kv,
            block_k,
            top_t,
            block_q: DEFAULT_BLOCK_Q.min(n.max(1)),
            window: DEFAULT_WINDOW.min(n.max(1)),
            bytes_per_elem: DEFAULT_BYTES_PER_ELEM,
            min_tile: DEFAULT_MIN_TILE,
            g: 0,
            b: 0,
        }
    }

    pub fn with_block_q(mut self, block_q: usize) -> Self {
        self.block_q = block_q;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_min_tile(mut self, min_tile: usize) -> Self {
        self.min_tile = min_tile;
        self
    }

    pub fn with_bytes_per_elem(mut self, bytes: usize) -> Self {
        self.bytes_per_elem = bytes;
        self
    }

    pub fn with_value_dim(mut self, d_v: usize) -> Self {
        self.d_v = d_v;
        self
    }

    /// Checks every invariant and returns the config with `g` and `b` filled in.
    /// All violations are reported together.
    pub fn validate(mut self) -> Result<Self> {
        let mut violations = Vec::new();
        let mut require = |ok: bool, msg: String| {
            if !ok {
                violations.push(msg);
            }
        };

        require(self.n >= 1, "N must be at least 1".into());
        require(self.d_k >= 1, "d_K must be at least 1".into());
        require(self.d_v >= 1, "d_V must be at least 1".into());
        require(self.h >= 1, "h must be at least 1".into());
        require(self.h_kv >= 1, "h_K must be at least 1".into());
        require(self.block_k >= 1, "B_K must be at least 1".into());
        if self.h_kv >= 1 {
            require(self.h.is_multiple_of(self.h_kv), "h not divisible by h_K".into());
        }
        let divisible = self.block_k >= 1 && self.n.is_multiple_of(self.block_k);
        if self.block_k >= 1 {
            require(divisible, "N not divisible by B_K".into());
        }
        let b = if divisible { self.n / self.block_k } else { 0 };
        require(self.top_t >= 1, "T must be at least 1".into());
        if b >= 1 {
            require(self.top_t <= b, format!("T exceeds b={b}"));
        }
        require(
            self.block_q >= 1 && self.block_q <= self.n,
            "B_Q must lie in 1..=N".into(),
        );
        require(
            self.window >= 1 && self.window <= self.n,
            "W must lie in 1..=N".into(),
        );
        require(self.min_tile >= 1, "min_tile must be at least 1".into());
        require(
            matches!(self.bytes_per_elem, 2 | 4 | 8),
            "bytes_per_elem must be 2, 4 or 8".into(),
        );

        if !violations.is_empty() {
            return Err(Error::InvalidConfig(violations));
        }
        self.g = self.h / self.h_kv;
        self.b = b;
        Ok(self)
    }

    pub fn is_validated(&self) -> bool {
        self.g >= 1 && self.b >= 1
    }

    pub(crate) fn ensure_validated(&self) -> Result<()> {
        if self.is_validated() {
            Ok(())
        } else {
            Err(Error::NotValidated)
        }
    }

    /// GQA group size `g = h / h_K` (0 before validation).
    pub fn group_size(&self) -> usize {
        self.g
    }

    /// Number of KV blocks `b = N / B_K` (0 before validation).
    pub fn num_blocks(&self) -> usize {
        self.b
    }

    /// KV head read by query head `head`.
    #[inline]
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.g
    }

    /// Query heads sharing KV head `kv_head`.
    pub fn heads_of(&self, kv_head: usize) -> std::ops::Range<usize> {
        kv_head * self.g..(kv_head + 1) * self.g
    }

    #[inline]
    pub fn block_of(&self, token: usize) -> usize {
        token / self.block_k
    }

    pub fn softmax_scale(&self) -> f64 {
        1.0 / (self.d_k as f64).sqrt()
    }

    /// Uniform head dim `d`, required by the closed-form cost model.
    pub fn uniform_head_dim(&self) -> Result<usize> {
        if self.d_k == self.d_v {
            Ok(self.d_k)
        } else {
            Err(Error::NonUniformHeadDim {
                d_k: self.d_k,
                d_v: self.d_v,
            })
        }
    }

    /// Parses a flat `key = value` file (TOML syntax). Keys use the notation
    /// names: `N`, `d_K`, `d_V` (or `d` for both), `h`, `h_K`, `B_K`, `T`,
    /// `B_Q`, `W`, `bytes_per_elem`, `min_tile`. Unknown keys are rejected;
    /// keys listed in `extra` are returned untouched for the caller.
    pub fn parse_file_str(text: &str) -> Result<(Self, ConfigExtras)> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::ConfigFile(e.to_string()))?;
        raw.into_config()
    }

    pub fn load(path: &Path) -> Result<(Self, ConfigExtras)> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_file_str(&text)
    }
}

/// Non-shape keys allowed in a config file (scenario settings).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigExtras {
    pub seed: Option<u64>,
    pub selection_mode: Option<String>,
    pub repeat: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(rename = "N")]
    n: usize,
    d: Option<usize>,
    #[serde(rename = "d_K")]
    d_k: Option<usize>,
    #[serde(rename = "d_V")]
    d_v: Option<usize>,
    h: usize,
    #[serde(rename = "h_K")]
    h_kv: usize,
    #[serde(rename = "B_K")]
    block_k: usize,
    #[serde(rename = "T")]
    top_t: usize,
    #[serde(rename = "B_Q")]
    block_q: Option<usize>,
    #[serde(rename = "W")]
    window: Option<usize>,
    bytes_per_elem: Option<usize>,
    min_tile: Option<usize>,
    seed: Option<u64>,
    selection_mode: Option<String>,
    repeat: Option<usize>,
}

impl RawConfig {
    fn into_config(self) -> Result<(AttentionConfig, ConfigExtras)> {
        let d_k = self
            .d_k
            .or(self.d)
            .ok_or_else(|| Error::ConfigFile("missing head dim (d or d_K)".into()))?;
        let d_v = self.d_v.or(self.d).unwrap_or(d_k);
        let mut cfg = AttentionConfig::new(self.n, d_k, self.h, self.h_kv, self.block_k, self.top_t)
            .with_value_dim(d_v);
        if let Some(v) = self.block_q {
            cfg.block_q = v;
        }
        if let Some(v) = self.window {
            cfg.window = v;
        }
        if let Some(v) = self.bytes_per_elem {
            cfg.bytes_per_elem = v;
        }
        if let Some(v) = self.min_tile {
            cfg.min_tile = v;
        }
        let extras = ConfigExtras {
            seed: self.seed,
            selection_mode: self.selection_mode,
            repeat: self.repeat,
        };
        Ok((cfg, extras))
    }
}
