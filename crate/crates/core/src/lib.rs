pub mod backward_solver;
pub mod cli;
pub mod coefficients;
pub mod error;
pub mod forward_sim;
pub mod lq_benchmark;
pub mod measure;
pub mod mf_solver;
pub mod random_measure;
pub mod rng;
pub mod smart_grid;

pub use error::{Error, Result};
