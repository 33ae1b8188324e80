use std::process::ExitCode;

use clap::Parser;
use stlm::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(stlm::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            let err = anyhow::Error::new(e).context(format!("{} failed", cli.command.name()));
            let cause = err.chain().nth(1).map(ToString::to_string).unwrap_or_default();
            eprintln!("error[{kind}]: {err}: {cause}");
            ExitCode::FAILURE
        }
    }
}
