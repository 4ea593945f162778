pub mod chain;
pub mod error;
pub mod json;
pub mod linalg;

pub use chain::{Chain, Segment, Tail, TimeMode};
pub use error::{Error, Result};
pub mod transition;
pub mod rank;
pub mod coalition;
pub mod geometry;
pub mod graph;
mod hull;
pub mod decomposition;
pub mod fixtures;
pub mod cli;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/chains.md")]
    mod chains {}
    #[doc = include_str!("../../../book/src/transitions.md")]
    mod transitions {}
    #[doc = include_str!("../../../book/src/rank.md")]
    mod rank {}
    #[doc = include_str!("../../../book/src/coalitions.md")]
    mod coalitions {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/jets.md")]
    mod jets {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
