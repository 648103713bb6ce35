pub mod agent;
pub mod compressor;
pub mod config;
pub mod error;
pub mod harness;
pub mod memory;
pub mod numeric;
pub mod orchestration;
pub mod par;
pub mod seed;
pub mod topology;

pub use error::Error;
