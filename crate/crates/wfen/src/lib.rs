//! File formats, data loading and the `wfen` command line around [`wfen_core`].
//!
//! * [`ppm`]: binary P6 images
//! * [`checkpoint`]: the `WFEN1` tensor container
//! * [`config`]: JSON run configuration
//! * [`bands`]: `dwt` / `idwt` on image files
//! * [`session`]: training, inference and evaluation from a config
//! * [`ablation`]: the downsampling comparison

pub mod ablation;
pub mod bands;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod ppm;
pub mod session;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use wfen_core;
