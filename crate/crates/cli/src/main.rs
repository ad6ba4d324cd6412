mod cli;
mod commands;
mod config;

use std::io::ErrorKind;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use crate::cli::Cli;
use crate::commands::Ctx;

/// Bad flags or inputs; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use abdnet::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == ErrorKind::NotFound { 2 } else { 1 };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(io) if io.kind() == ErrorKind::NotFound => 2,
                E::InvalidArgument(_)
                | E::Parse { .. }
                | E::Validation(_)
                | E::DegenerateMesh(_)
                | E::InfeasibleMix(_)
                | E::Checkpoint(_)
                | E::CheckpointVersion { .. }
                | E::Json(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn threads(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("ABDNET_THREADS") {
            Ok(v) => v.trim().parse().map_err(|_| Usage(format!("ABDNET_THREADS={v} is not a thread count")))?,
            Err(_) => return Ok(None),
        },
    };
    if n == 0 {
        return Err(Usage("thread count must be positive".into()).into());
    }
    Ok(Some(n))
}

fn run() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args_os()
        .map(|a| a.into_string().map_err(|a| Usage(format!("argument {a:?} is not valid UTF-8"))))
        .collect::<Result<_, _>>()?;
    let args = config::merge_config(args).map_err(|e| Usage(format!("{e:#}")))?;
    let cli = Cli::try_parse_from(&args).unwrap_or_else(|e| e.exit());
    let n_threads = threads(cli.global.threads)?;
    if let Some(n) = n_threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }

    eprintln!("# abdnet {} resolved config", cli.command.name());
    let mut resolved = config::resolved_lines(&serde_json::to_value(&cli.command)?);
    resolved.push(format!("seed={}", cli.global.seed));
    resolved.push(format!("threads={}", n_threads.unwrap_or_else(rayon::current_num_threads)));
    resolved.push(format!("verbose={}", cli.global.verbose));
    for line in resolved {
        eprintln!("{line}");
    }

    let ctx = Ctx { seed: cli.global.seed, verbose: cli.global.verbose, started: Instant::now() };
    commands::run(&cli.command, &ctx)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
