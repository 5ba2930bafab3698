//! Multi-layer cloud motion and wind velocity field estimation from ground-based
//! thermal sky images.

pub mod error;
pub mod eval;
pub mod flowfield;
pub mod bemm;
pub mod imaging;
pub mod io;
pub mod layers;
pub mod motionpool;
pub mod optflow;
pub mod pipeline;
pub mod subsample;
pub mod wsvr;

pub use error::{Error, Result};
