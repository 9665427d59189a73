//! Axial needle-insertion force rendering on voxel patient volumes, with the
//! trajectory planner and the reference-versus-test evaluation harness.

pub mod distance;
pub mod engine;
pub mod evaluation;
pub mod morphology;
pub mod phantom;
pub mod planner;
pub mod report;
pub mod serde_inf;
pub mod study;
pub mod tissue;
pub mod volume;
