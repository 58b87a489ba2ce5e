pub mod basis;
pub mod curve;
pub mod error;
pub mod glm;
pub mod inference;
pub mod link;
pub mod par;
pub mod select;
pub mod sim;
pub mod smooth;
pub mod spqr;

pub use error::{GflmError, Result};
