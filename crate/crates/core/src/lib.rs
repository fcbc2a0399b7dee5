pub mod cooccurrence;
pub mod decomposition;
pub mod error;
pub mod experiments;
pub mod generation;
pub mod objectives;
pub mod spectral;
pub mod toy;
pub mod twostream;

pub use error::{LabError, Result};
