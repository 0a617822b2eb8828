pub mod asymptotics;
pub mod el;
pub mod error;
pub mod estimator;
pub mod io;
pub mod model;
pub mod optim;
pub mod simulation;
pub mod special;

pub use error::{Error, Result};
