//! CPU reference engines for block-selected sparse attention.
//!
//! Every query token attends to `T` blocks of `B_K` keys chosen per KV head.
//! Two schedules compute the same result:
//!
//! * [`nsa`]: query-major. One task per (KV head, token) gathers the query
//!   heads of a GQA group, padding them to the hardware tile height.
//! * [`fsa`]: KV-block-major. One task per (query head, KV block) gathers
//!   the tokens that selected the block, with a statistics pre-pass and a
//!   reduction pass in place of atomics.
//!
//! Both are checked against the dense [`oracle`] and instrumented with a
//! [`meter::TrafficMeter`] that counts bytes and FLOPs per simulated kernel;
//! [`cost`] holds the closed-form estimates those counts are compared to.
//!
//! ```
//! use fsa_core::prelude::*;
//!
//! let cfg = AttentionConfig::new(128, 16, 4, 2, 16, 3).validate()?;
//! let p = Scenario::new(cfg.clone(), 7, SelectionMode::RandomUniform).materialize()?;
//! let fsa = fsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, &cfg, &FsaOptions::default())?;
//! let nsa = nsa_selected_forward(&p.q, &p.k, &p.v, &p.selection, &cfg, &NsaOptions::default())?;
//! assert!(fsa.output.max_abs_diff(&nsa.output) < 1e-12);
//! # Ok::<(), fsa_core::Error>(())
//! ```

pub mod branches;
pub mod config;
pub mod cost;
pub mod error;
pub mod fsa;
pub mod meter;
pub mod nsa;
pub mod oracle;
pub mod scenario;
pub mod schedule;
pub mod selection;
pub mod tensor;

pub use error::{Error, Result};

/// Book chapters, compiled so that their Rust listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/nsa.md")]
    mod nsa {}
    #[doc = include_str!("../../../book/src/fsa.md")]
    mod fsa {}
    #[doc = include_str!("../../../book/src/backward.md")]
    mod backward {}
    #[doc = include_str!("../../../book/src/cost.md")]
    mod cost {}
    #[doc = include_str!("../../../book/src/branches.md")]
    mod branches {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
}

/// The types and entry points most callers need.
pub mod prelude {
    pub use crate::branches::{
        compress_kv, compressed_attention_forward, gated_attention_forward, gated_combine,
        sliding_attention_forward, CompressedKV, GateTensor,
    };
    pub use crate::config::AttentionConfig;
    pub use crate::cost::{analytic_cost, cost_ratio, measured_cost, CostBreakdown, CostRow, MeasuredCost};
    pub use crate::error::{Error, Result};
    pub use crate::fsa::{fsa_selected_backward, fsa_selected_forward, FsaEngine, FsaOptions, StatsMode};
    pub use crate::meter::{Phase, PhaseCounters, TrafficMeter};
    pub use crate::nsa::{nsa_selected_backward, nsa_selected_forward, NsaOptions};
    pub use crate::oracle::{
        dense_backward, full_attention_forward, masked_attention_forward, AttentionOutput, BlockMask, Gradients,
    };
    pub use crate::scenario::{random_tensor, Scenario, SelectionMode, TensorStream};
    pub use crate::schedule::TaskOrder;
    pub use crate::selection::{
        build_inverse_index, select_topk_blocks, uniform_scores, InverseIndex, SelectionTensor, SENTINEL,
    };
    pub use crate::tensor::HeadedTensor;
}
