//! Training, evaluation, checkpointing, experiment orchestration, reports.

pub mod adam;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod models;
pub mod pipeline;
pub mod report;
pub mod train;
