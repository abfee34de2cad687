//! Command-line interface and HTTP service over the CG-CT pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod service;

use std::ffi::OsString;
use std::io::Write;

use cgct::CgctError;
use clap::Parser;

/// Parses `argv`, runs the subcommand and returns the process exit code:
/// 0 on success, 2 on a usage error, 1 on a runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(cli.log_level.as_str()))
        .target(env_logger::Target::Stderr)
        .try_init();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match commands::dispatch(&cli, &mut out) {
        Ok(()) => {
            let _ = out.flush();
            0
        }
        Err(e) if is_broken_pipe(&e) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error [{}]: {}", error_stage(&e, cli.command.stage()), error_message(&e));
            1
        }
    }
}

/// Stage label of a failure: the core error's stage when it carries one.
pub fn error_stage(err: &anyhow::Error, fallback: &'static str) -> &'static str {
    err.chain()
        .find_map(|c| c.downcast_ref::<CgctError>().and_then(CgctError::stage))
        .map_or(fallback, |s| s.as_str())
}

/// A closed stdout (e.g. piping into `head`) is not a failure.
fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
            || matches!(c.downcast_ref::<CgctError>().map(CgctError::root),
                Some(CgctError::Io { source, .. }) if source.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn error_message(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = match cause.downcast_ref::<CgctError>() {
            Some(e) => e.root().to_string(),
            None => cause.to_string(),
        };
        if !parts.iter().any(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}
