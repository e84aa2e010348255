use std::process::ExitCode;

use clap::Parser;

use edptune::tuner::TunerError;
use edptune_cli::{execute, output, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = execute(&cli).and_then(|report| {
        output::write_output(cli.output.as_deref(), &report.render(cli.format))?;
        Ok(report.nothing_feasible)
    });
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("edptune: {}", TunerError::NothingFeasible);
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("edptune: {e:#}");
            if matches!(e.downcast_ref::<TunerError>(), Some(TunerError::NothingFeasible)) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
