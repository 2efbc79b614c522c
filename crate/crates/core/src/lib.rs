//! Audio MCQ dataset construction, audio-contribution filtering, curriculum
//! splits and GRPO objective math.

pub mod acf;
pub mod backends;
pub mod curriculum;
pub mod error;
pub mod genstage;
pub mod grpo;
pub mod hash;
pub mod ingest;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
