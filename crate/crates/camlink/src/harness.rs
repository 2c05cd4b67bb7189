//! Command-line entry points (generate, train, sample, eval).

/// Runs the CLI; returns the process exit code.
pub fn run() -> i32 {
    0
}
