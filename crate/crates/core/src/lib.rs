pub mod datapipe;
pub mod experiments;
pub mod kinematics;
pub mod models;
pub mod nn;
pub mod synthgen;
