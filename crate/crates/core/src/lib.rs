pub mod backbone;
pub mod error;
pub mod guidance;
pub mod hybridres;
pub mod merge;
pub mod numerics;
pub mod patch_embed;
pub mod profiler;
pub mod synth;
pub mod trainer;
pub mod videotok;

pub use error::{Error, Result};
