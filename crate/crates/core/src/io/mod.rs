//! Configuration loading and on-disk formats.

mod config;
mod persist;

pub use config::{default_hyperparameters, default_search_grid, Config, ConfigError, GridConfig, InlineModel, ModelSpec, CONFIG_SCHEMA_VERSION};
pub use persist::*;
