pub mod autodiff;
pub mod baseline;
pub mod cli;
pub mod dataset;
pub mod dyngraph;
pub mod model;
pub mod structural;
pub mod synth;
pub mod temporal;
