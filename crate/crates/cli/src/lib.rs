//! Command-line front end for GLKS: data preparation, training, evaluation,
//! generation, selection traces and the window-size sweep.

pub mod app;
pub mod commands;
pub mod config;

pub use app::run;
pub use config::RunConfig;
