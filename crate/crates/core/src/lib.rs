pub mod autodiff;
pub mod error;
pub mod graph;
pub mod gnn;
pub mod grid;
pub mod metrics;
pub mod nifti;
pub mod supervoxel;
pub mod phantom;
pub mod pipeline;
pub mod refine;
pub mod volume;

pub use error::{Error, Result};
pub use grid::Dims;
