//! File formats, oracles and the experiment harness around `prefrl-core`.

#![forbid(unsafe_code)]

pub mod cache;
pub mod cli;
pub mod config;
pub mod formats;
pub mod harness;
pub mod human;
pub mod llm;
pub mod report;
pub mod runner;

pub use prefrl_core as core;
