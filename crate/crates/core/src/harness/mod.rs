//! Configuration, experiment recipes, trace emission and the command line.

pub mod cli;
pub mod config;
pub mod emit;
pub mod experiment;
pub mod recipes;
