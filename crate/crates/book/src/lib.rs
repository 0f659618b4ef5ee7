//! Compiles the code listings of the guide in `book/src` as doc-tests.

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/retriever.md")]
pub mod retriever {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/ranking.md")]
pub mod ranking {}

#[doc = include_str!("../../../book/src/reranking.md")]
pub mod reranking {}

#[doc = include_str!("../../../book/src/finetune.md")]
pub mod finetune {}

#[doc = include_str!("../../../book/src/robustness.md")]
pub mod robustness {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
