//! Command-line front end: configuration parsing and command execution.

pub mod commands;
pub mod config;

use mbcel::{Error, ErrorCategory};

/// Process exit code for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

/// The single-line error report written to stderr.
pub fn error_line(err: &Error) -> String {
    let kind = match err.category() {
        ErrorCategory::Config => "config",
        ErrorCategory::Data => "data",
        ErrorCategory::Numerical => "numerical",
    };
    let msg = err.to_string().replace(['\n', '\r'], " ");
    format!("error[{kind}]: {msg}")
}
