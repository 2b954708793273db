//! Motion-aware dynamic Gaussian splatting.

pub mod ad;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod correspondence;
pub mod deform;
pub mod densify;
pub mod error;
pub mod gradsuite;
pub mod gaussian;
pub mod image;
pub mod io;
pub mod knn;
pub mod layout;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
