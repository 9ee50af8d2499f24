pub mod error;
pub mod gradcheck;
pub mod manips;
pub mod net;
pub mod objectives;
pub mod pixel;
pub mod probe;
pub mod pretext;
pub mod trainer;

pub use error::{Error, Result};
