pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontdoor;
pub mod heatmap;
pub mod imfr;
pub mod imse;
pub mod metric;
pub mod model;
pub mod params;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use fsfg_autograd::{Execution, Tensor};
