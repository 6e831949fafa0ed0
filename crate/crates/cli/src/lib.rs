//! Harness for the `trunc-mc` command-line tool: configuration, experiment
//! drivers and result files.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::Path;

use config::{Cli, Command};
use error::CliResult;

pub use error::CliError;

/// Runs a parsed command and returns the text printed on stdout.
pub fn run(cli: &Cli) -> CliResult<String> {
    let name = cli.command.name();
    match &cli.command {
        Command::Schedule(args) => {
            let cfg: config::ScheduleConfig = config::resolve(name, &args.common, args)?;
            let out = commands::schedule(&cfg, args.common.out.as_deref())?;
            Ok(serde_json::to_string_pretty(&out.summary).expect("summary serialises") + "\n")
        }
        Command::Evaluate(args) => {
            let cfg: config::EvaluateConfig = config::resolve(name, &args.common, args)?;
            let out = commands::evaluate(&cfg, args.common.out.as_deref())?;
            let mut text = format!(
                "exact return {}\nbudget,dcs,mean_mse,mse_ci_low,mse_ci_high,coverage\n",
                out.exact
            );
            for s in &out.summary {
                text += &format!(
                    "{},{},{},{},{},{}\n",
                    s.budget, s.dcs, s.mean_mse, s.mse_ci_low, s.mse_ci_high, s.coverage
                );
            }
            Ok(text)
        }
        Command::Optimize(args) => {
            let cfg: config::OptimizeConfig = config::resolve(name, &args.common, args)?;
            let out = commands::optimize(&cfg, args.common.out.as_deref(), true)?;
            let mut text = String::from("algo,iteration,disc_mean,disc_se,undisc_mean,undisc_se\n");
            for (algo, points) in &out.curves {
                if let Some(p) = points.last() {
                    text += &format!(
                        "{algo},{},{},{},{},{}\n",
                        p.iteration, p.disc_mean, p.disc_se, p.undisc_mean, p.undisc_se
                    );
                }
            }
            Ok(text)
        }
        Command::Pac(args) => {
            let cfg: config::PacConfig = config::resolve(name, &args.common, args)?;
            let report = commands::pac(&cfg, args.common.out.as_deref())?;
            Ok(commands::format_pac(&report))
        }
    }
}

/// Output directory of a command, if any.
pub fn out_dir(cli: &Cli) -> Option<&Path> {
    match &cli.command {
        Command::Schedule(a) => a.common.out.as_deref(),
        Command::Evaluate(a) => a.common.out.as_deref(),
        Command::Optimize(a) => a.common.out.as_deref(),
        Command::Pac(a) => a.common.out.as_deref(),
    }
}
