pub mod bench;
pub mod buffer;
pub mod build;
pub mod distill;
pub mod eval;
pub mod report;
