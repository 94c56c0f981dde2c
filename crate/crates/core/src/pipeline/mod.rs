//! Data handling, training, checkpoints and inference.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod enhance;
pub mod eval;
pub mod imageio;
pub mod optim;
pub mod pgm;
pub mod score;
pub mod train;
