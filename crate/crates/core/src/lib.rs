pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod io;
pub mod model;
pub mod nn;
pub mod seg_head;
pub mod sp_graph;
pub mod superpixel;
pub mod train;

pub use error::{Error, Result};
