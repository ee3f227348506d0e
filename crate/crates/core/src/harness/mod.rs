//! Configuration, persistence, image I/O and evaluation plumbing.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod image_io;
pub mod manifest;
