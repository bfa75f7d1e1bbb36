//! Articulated neural body fields.
//!
//! A skeleton-graph encoder predicts one factorized feature volume per bone;
//! query points retrieve windowed per-bone features in bone-local frames,
//! a small network aggregates them, and a neural field plus differentiable
//! volume rendering turns them into images. Training, synthetic data
//! generation, evaluation metrics, and isosurface extraction live here too.

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod field;
pub mod gnn;
pub mod grad_check;
pub mod image_io;
pub mod kinematics;
pub mod linalg;
pub mod losses;
pub mod mc_tables;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod params;
pub mod renderer;
pub mod scene;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volume;
