pub mod ablate;
pub mod diff;
pub mod geometry;
pub mod repro;
pub mod steer;
pub mod synth;
pub mod train;
