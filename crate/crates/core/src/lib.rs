//! Explaining black-box code clone detectors with knowledge-based local
//! neighborhoods and an LLM.

pub mod corpus;
pub mod detector;
pub mod experiment;
pub mod kln;
pub mod llm;
pub mod prompt;
pub mod review;
pub mod validate;

/// Guide chapters, compiled here so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/neighborhoods.md")]
    mod neighborhoods {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/llm.md")]
    mod llm {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/review.md")]
    mod review {}
}
