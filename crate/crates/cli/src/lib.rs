//! Subcommands behind the `xcdiff` binary. Every command reads one
//! [`config::RunConfig`], writes its outputs under `--out`, and stamps each
//! JSON report with the config digest.

pub mod commands;
pub mod config;
pub mod run;
