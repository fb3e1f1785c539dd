pub mod config;
pub mod dataset;
pub mod dit;
pub mod eval;
mod error;
pub mod flow;
pub mod latent_seg;
pub mod model_io;
pub mod part_dit;
pub mod pipeline;
pub mod procgen;
pub mod train;
pub mod vae;
pub mod vae_train;
pub mod whole_dit;

pub use error::{Error, Result};
