pub mod bootstrap;
pub mod cli;
pub mod decomp;
pub mod designs;
pub mod error;
pub mod likelihood;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod simharness;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/parameter-space.md")]
    pub struct ParameterSpace;
    #[doc = include_str!("../../../book/src/likelihood.md")]
    pub struct Likelihood;
    #[doc = include_str!("../../../book/src/newton.md")]
    pub struct Newton;
    #[doc = include_str!("../../../book/src/starting-values.md")]
    pub struct StartingValues;
    #[doc = include_str!("../../../book/src/bootstrap.md")]
    pub struct Bootstrap;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
