mod args;
mod commands;
mod rundir;
mod settings;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;
use crate::rundir::{exit_code, init_logging, RunDir};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let mut cfg = settings::resolve(g)?;
    let dir = RunDir::create(cli.command.name(), g.output_root.as_deref(), g.out.as_deref())?;
    init_logging(&dir, g.verbose)?;
    tracing::info!(command = cli.command.name(), dir = %dir.path.display(), "run started");
    let result = (|| {
        dir.write("config.toml", settings::to_toml(&cfg)?)?;
        commands::run(&cli.command, &mut cfg, &dir)?;
        // flags such as --epochs change the config; keep the file in sync
        dir.write("config.toml", settings::to_toml(&cfg)?)?;
        Ok(())
    })();
    if let Err(e) = &result {
        tracing::error!("{e:#}");
        dir.mark_failed(e);
    }
    result
}
