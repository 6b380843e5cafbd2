pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nlbp;
pub mod nn;
pub mod par;
pub mod spnn;
pub mod verify;
