//! Optimal stopping of one-dimensional diffusions with state-dependent
//! discounting.

pub mod calculus;
pub mod cli;
pub mod config;
pub mod excessive;
pub mod expr;
pub mod grid;
pub mod io;
pub mod model;
pub mod montecarlo;
pub mod ode;
pub mod run;
pub mod solver;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/expressions.md")]
    mod expressions {}
    #[doc = include_str!("../../../book/src/fundamental-solutions.md")]
    mod fundamental_solutions {}
    #[doc = include_str!("../../../book/src/value-function.md")]
    mod value_function {}
    #[doc = include_str!("../../../book/src/excessive.md")]
    mod excessive {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
