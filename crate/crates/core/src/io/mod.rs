//! Persistence: run configs, checkpoints, CSV tables and SVG figures.

pub mod checkpoint;
pub mod config;
pub mod svg;
pub mod tables;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointMeta};
pub use config::{load_config, parse_config, parse_config_with, ModeName, Overrides, RunConfig};
pub use svg::{emit_scatter_svg, Layout, Panel};
