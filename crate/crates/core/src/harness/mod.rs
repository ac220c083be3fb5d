//! File formats, synthetic scenes and the ablation experiment.

pub mod boxes;
pub mod config;
pub mod ctf;
pub mod experiment;
pub mod pgm;
pub mod synth;
