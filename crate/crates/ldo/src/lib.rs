pub mod bayes;
pub mod energy;
pub mod error;
pub mod features;
pub mod grid;
pub mod linalg;
pub mod regression;
pub mod rom;
pub mod rsw;
pub mod snapshot;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/operators.md")]
    mod operators {}
    #[doc = include_str!("../../../book/src/regression.md")]
    mod regression {}
    #[doc = include_str!("../../../book/src/energy.md")]
    mod energy {}
    #[doc = include_str!("../../../book/src/rom.md")]
    mod rom {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
