#![allow(dead_code)]

use fsa_core::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A materialized random problem with its mask.
pub struct Case {
    pub cfg: AttentionConfig,
    pub p: Problem,
    pub mask: BlockMask,
}

pub use fsa_core::scenario::Problem;

impl Case {
    pub fn new(cfg: AttentionConfig, seed: u64, mode: SelectionMode) -> Self {
        let p = Scenario::new(cfg, seed, mode).materialize().expect("valid scenario");
        let mask = BlockMask::from_selection(&p.selection, &p.cfg);
        Self { cfg: p.cfg.clone(), p, mask }
    }
}

/// Draws a config with `N ≤ max_n`, `d ≤ 64`, `g ∈ {1, 2, 4, 8}` and a dense
/// oracle cost (`h·N²·d`) under `budget`.
pub fn random_config(rng: &mut ChaCha8Rng, max_n: usize, budget: usize) -> AttentionConfig {
    loop {
        let n = [16, 32, 64, 128, 256, 512, 1024][rng.random_range(0..7)];
        if n > max_n {
            continue;
        }
        let d = [4, 8, 16, 32, 64][rng.random_range(0..5)];
        let g = [1, 2, 4, 8][rng.random_range(0..4)];
        let h_kv = rng.random_range(1..=2);
        let bk = [1, 2, 4, 8, 16, 32, 64][rng.random_range(0..7)];
        if bk > n || h_kv * g * n * n * d > budget {
            continue;
        }
        let b = n / bk;
        let t = rng.random_range(1..=b.min(8));
        let bq = [1, 3, 16][rng.random_range(0..3)].min(n);
        let tile = [1, 8, 16][rng.random_range(0..3)];
        return AttentionConfig::new(n, d, h_kv * g, h_kv, bk, t)
            .with_block_q(bq)
            .with_min_tile(tile)
            .validate()
            .expect("drawn config is valid");
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ dOut ∘ out` of the masked dense forward.
fn loss(q: &HeadedTensor, k: &HeadedTensor, v: &HeadedTensor, c: &Case) -> f64 {
    let o = masked_attention_forward(q, k, v, &c.mask, &c.cfg).expect("forward");
    o.out.as_slice().iter().zip(c.p.d_out.as_slice()).map(|(a, b)| a * b).sum()
}

/// Largest per-entry relative error of `dense_backward` against central
/// differences with step `h`, over every `stride`-th entry of Q, K and V.
/// Relative error is `|fd − an| / max(|an|, floor)`.
pub fn finite_difference_error(c: &Case, h: f64, stride: usize, floor: f64) -> f64 {
    let an = dense_backward(&c.p.q, &c.p.k, &c.p.v, &c.mask, &c.p.d_out, &c.cfg).expect("backward");
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let grad = [&an.dq, &an.dk, &an.dv][which];
        let len = grad.as_slice().len();
        for idx in (0..len).step_by(stride) {
            let eval = |delta: f64| {
                let (mut q, mut k, mut v) = (c.p.q.clone(), c.p.k.clone(), c.p.v.clone());
                let target = match which {
                    0 => &mut q,
                    1 => &mut k,
                    _ => &mut v,
                };
                target.as_mut_slice()[idx] += delta;
                loss(&q, &k, &v, c)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grad.as_slice()[idx];
            worst = worst.max((fd - a).abs() / a.abs().max(floor));
        }
    }
    worst
}
