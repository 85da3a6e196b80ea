pub mod cli;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod motion;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Book chapters, compiled here so their code blocks run as doc-tests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/motion.md")]
    pub mod motion {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    pub mod diffusion {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    pub mod adapters {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    pub mod formats {}
}
