//! `cascade` command-line front end.
//!
//! Exit codes: 0 success, 1 user error (bad flags, config or input files),
//! 2 internal invariant violation (failed gradient check, non-finite
//! training loss, shape bugs).

pub mod commands;
pub mod config;
pub mod experiment;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use commands::Cli;

/// A problem with what the user asked for; exits with status 1.
#[derive(Debug)]
pub struct UserError(pub String);

impl UserError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

/// A violated internal invariant; exits with status 2.
#[derive(Debug)]
pub struct InvariantViolation(pub String);

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantViolation {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    use cascade_core::Error as E;
    if err.downcast_ref::<InvariantViolation>().is_some() {
        return 2;
    }
    if err.downcast_ref::<UserError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(E::Dimension { .. } | E::Index { .. } | E::NonFinite { .. }) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
