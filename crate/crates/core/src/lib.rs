pub mod error;
pub mod tensor;

pub use error::{Error, Result};

pub mod attention;
pub mod backbone;
pub mod fgf;
pub mod nn;
pub mod cra;
pub mod lls;
pub mod data;
pub mod config;
pub mod model;
pub mod train;
pub mod checkpoint;
pub mod viz;
pub mod run_dir;
pub mod ablation;
