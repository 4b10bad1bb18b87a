pub mod backbone;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod kbase;
pub mod numeric;
pub mod utilize;

mod binio;

pub use error::{D2kError, Result};
