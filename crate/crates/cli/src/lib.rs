#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod io;

use args::{Cli, Command};
use io::CliResult;

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        // A second call in the same process finds the pool already built.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Fit(a) => commands::cmd_fit(a),
        Command::Simulate(a) => commands::cmd_simulate(a),
        Command::ImputeLod(a) => commands::cmd_impute_lod(a),
        Command::Analyze(a) => commands::cmd_analyze(a),
    }
}
