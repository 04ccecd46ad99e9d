//! Seeded problem generation.
//!
//! Every tensor is drawn from its own ChaCha8 stream: the generator is seeded
//! with the scenario seed and `set_stream` picks the tensor, so adding a new
//! tensor never perturbs the others. Normal samples use `rand_distr`'s
//! `StandardNormal`; selection scores use `U[0, 1)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::branches::GateTensor;
use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::selection::{
    full_selection, importance_scores_from_compressed, select_topk_blocks, self_block_selection,
    uniform_scores, SelectionTensor,
};
use crate::tensor::HeadedTensor;

/// Stream ids; the discriminant is the ChaCha stream number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorStream {
    Query = 1,
    Key = 2,
    Value = 3,
    OutputGrad = 4,
    Gates = 5,
    Selection = 6,
}

pub fn stream_rng(seed: u64, stream: TensorStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Standard-normal tensor in storage order.
pub fn random_tensor(seed: u64, stream: TensorStream, tokens: usize, dim: usize, heads: usize) -> HeadedTensor {
    let mut rng = stream_rng(seed, stream);
    let data = (0..tokens * dim * heads)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    HeadedTensor::from_vec(data, tokens, dim, heads).expect("normal samples are finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    RandomUniform,
    FromScores,
    SelfBlockOnly,
    /// Every causal block; forces `T = b`.
    Full,
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_uniform" => Ok(Self::RandomUniform),
            "from_scores" => Ok(Self::FromScores),
            "self_block_only" => Ok(Self::SelfBlockOnly),
            "full" => Ok(Self::Full),
            other => Err(Error::InvalidConfig(vec![format!("unknown selection mode {other:?}")])),
        }
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RandomUniform => "random_uniform",
            Self::FromScores => "from_scores",
            Self::SelfBlockOnly => "self_block_only",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub cfg: AttentionConfig,
    pub seed: u64,
    pub selection_mode: SelectionMode,
    pub repeat: usize,
}

/// Concrete inputs produced from a [`Scenario`].
#[derive(Debug, Clone)]
pub struct Problem {
    /// Validated; `T` is raised to `b` for [`SelectionMode::Full`].
    pub cfg: AttentionConfig,
    pub q: HeadedTensor,
    pub k: HeadedTensor,
    pub v: HeadedTensor,
    pub d_out: HeadedTensor,
    pub gates: GateTensor,
    pub selection: SelectionTensor,
}

impl Scenario {
    pub fn new(cfg: AttentionConfig, seed: u64, selection_mode: SelectionMode) -> Self {
        Self {
            cfg,
            seed,
            selection_mode,
            repeat: 1,
        }
    }

    pub fn materialize(&self) -> Result<Problem> {
        let mut cfg = self.cfg.clone();
        if self.selection_mode == SelectionMode::Full && cfg.block_k >= 1 && cfg.n.is_multiple_of(cfg.block_k) {
            cfg.top_t = cfg.n / cfg.block_k;
        }
        let cfg = cfg.validate()?;
        let seed = self.seed;
        let q = random_tensor(seed, TensorStream::Query, cfg.n, cfg.d_k, cfg.h);
        let k = random_tensor(seed, TensorStream::Key, cfg.n, cfg.d_k, cfg.h_kv);
        let v = random_tensor(seed, TensorStream::Value, cfg.n, cfg.d_v, cfg.h_kv);
        let d_out = random_tensor(seed, TensorStream::OutputGrad, cfg.n, cfg.d_v, cfg.h);
        let gates = GateTensor::random(cfg.n, seed);
        let selection = match self.selection_mode {
            SelectionMode::RandomUniform => select_topk_blocks(&uniform_scores(&cfg, seed), &cfg),
            SelectionMode::FromScores => {
                let cmp = crate::branches::compress_kv(&k, &v, &cfg)?;
                let scores = importance_scores_from_compressed(&q, &cmp.k, &cfg)?;
                select_topk_blocks(&scores, &cfg)
            }
            SelectionMode::SelfBlockOnly => self_block_selection(&cfg),
            SelectionMode::Full => full_selection(&cfg)?,
        };
        Ok(Problem {
            cfg,
            q,
            k,
            v,
            d_out,
            gates,
            selection,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a = random_tensor(3, TensorStream::Query, 4, 2, 1);
        let b = random_tensor(3, TensorStream::Query, 4, 2, 1);
        let c = random_tensor(3, TensorStream::Key, 4, 2, 1);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn equal_scenarios_give_equal_problems() {
        let cfg = AttentionConfig::new(32, 4, 2, 1, 8, 2);
        let s = Scenario::new(cfg, 11, SelectionMode::FromScores);
        let (p1, p2) = (s.materialize().unwrap(), s.materialize().unwrap());
        assert_eq!(p1.q, p2.q);
        assert_eq!(p1.selection, p2.selection);
        assert_eq!(p1.gates, p2.gates);
    }

    #[test]
    fn full_mode_raises_top_t() {
        let cfg = AttentionConfig::new(32, 4, 2, 1, 8, 2);
        let p = Scenario::new(cfg, 1, SelectionMode::Full).materialize().unwrap();
        assert_eq!(p.cfg.top_t, 4);
        assert_eq!(p.selection.row(0, 31), &[0, 1, 2, 3]);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            SelectionMode::RandomUniform,
            SelectionMode::FromScores,
            SelectionMode::SelfBlockOnly,
            SelectionMode::Full,
        ] {
            assert_eq!(m.to_string().parse::<SelectionMode>().unwrap(), m);
        }
        assert!("dense".parse::<SelectionMode>().is_err());
    }
}
