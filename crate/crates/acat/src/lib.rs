//! File formats, checkpoints and the stage-based experiment pipeline
//! around the core library.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod maps;
pub mod pipeline;
pub mod report;
pub mod stages;
pub mod tensors;
