pub mod cli;
pub mod coproduct;
pub mod error;
pub mod expr;
pub mod functionals;
pub mod graphs;
pub mod propagator;
pub mod quadrature;
pub mod renorm;
pub mod series;
pub mod special;
pub mod test_function;
pub mod tordered;

pub use error::{EgError, ParseError, Result};
