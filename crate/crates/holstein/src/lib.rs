//! Workbench for the one-dimensional semiclassical Holstein model: exact
//! Ehrenfest dynamics, interaction-quench dataset generation, and
//! differentiable CNN surrogates trained to reproduce both trajectories and
//! long-run statistics.

pub mod analysis;
pub mod container;
pub mod datagen;
pub mod dynamics;
pub mod model;
pub mod tensor;
pub mod trainer;
