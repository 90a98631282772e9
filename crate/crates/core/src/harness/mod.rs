//! Experiment grid, results tables and the command-line front end.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod strategy;
pub mod table;

pub use cli::{cli_main, cli_main_with_env};
pub use config::ExperimentConfig;
pub use experiment::{
    run_cell, run_experiment, run_experiment_with_logs, AdaptInputs, CellRun, SeedContext,
};
pub use strategy::{Strategy, StrategyKind};
pub use table::{emit_table, parse_tsv, Aggregate, ResultRow, ResultsTable, Summary, TableFormat};
