//! UniNet-style multi-task dense prediction at desk scale: synthetic scene
//! generation, three single-task specialists over a shared backbone
//! architecture, backbone weight averaging into one multi-task model, joint
//! fine-tuning, and a four-metric evaluation suite.

pub mod error;
pub mod nets;
pub mod resize;
pub mod scenegen;
pub mod tensor;

pub use error::{Error, Result};
