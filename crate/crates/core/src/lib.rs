pub mod cli;
pub mod decoding;
pub mod memory;
pub mod metrics;
pub mod similarity;
