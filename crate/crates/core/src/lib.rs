pub mod error;
pub mod evalbench;
pub mod formats;
pub mod kde;
pub mod lrcn;
pub mod pca;
pub mod phantom;
pub mod pipeline;
pub mod real;
pub mod sigproc;
pub mod train;

pub use error::{Error, Result};
