pub mod astgru;
pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod head;
pub mod params;
pub mod pmpnet;
pub mod pointcloud;
pub mod tensor;

pub use error::{Error, Result};
