//! Coarse-to-fine feature adaptation for cross-domain object detection.

pub mod art;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod domains;
pub mod error;
pub mod eval;
pub mod params;
pub mod psa;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Which side of the domain pair an image or statistic belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}
