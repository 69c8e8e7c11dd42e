//! Command-line front end for the `ternary-llm` library.

pub mod ablation;
pub mod cli;
pub mod commands;
pub mod config;

use ternary_llm::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        Error::Input(_) | Error::Io(_) | Error::Format(_) | Error::Corruption(_) | Error::Index(_) => EXIT_INPUT,
        _ => EXIT_FAILURE,
    }
}
