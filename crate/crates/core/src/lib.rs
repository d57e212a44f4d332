pub mod autodiff;
pub mod bayes;
pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod multiscale;
pub mod pipeline;
pub mod simulate;
pub mod training;
pub mod unroll;

pub use error::{Error, Result};
