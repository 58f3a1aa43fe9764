//! Few-shot charge prediction across writing styles by disentangling
//! content and style representations.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod text;
pub mod training;

pub use error::{Error, Result};
