pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod rangeview;
pub mod netcore;
pub mod raydrop;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
