//! Overlap-aware code retrieval.
//!
//! Given a natural-language query and candidate code snippets, the model scores
//! each candidate from character-overlap features refined by an attention and
//! gating encoder. The crate covers the whole pipeline: corpus ingestion
//! ([`corpus`]), overlap features ([`overlap`]), a small autodiff engine
//! ([`numerics`]), the network ([`model`]), training ([`training`]) and
//! ranking metrics ([`eval`]).

pub mod config;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod overlap;
pub mod training;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/overlap.md")]
    mod overlap {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
