//! Experiment runner for the `cholvi` variational inference library: spec
//! files, presets, trace and summary output, and a verification suite.

pub mod experiment;
pub mod output;
pub mod presets;
pub mod spec;
pub mod verify;
