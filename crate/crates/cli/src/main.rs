//! `difftrack`: generate data, train the association network and the DOA
//! localizer, evaluate, infer and tabulate results.
//!
//! Each subcommand takes `--out DIR` plus its own settings, given as flags
//! (`--batch-size 64`) or in a `key = value` file passed with `--config`.
//! Every output directory receives a `manifest.txt` that can be fed back
//! through `--config` to reproduce the run.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands::{CommandSpec, COMMANDS};
use crate::config::Settings;
use crate::error::{CliError, CliResult};
use crate::manifest::OutputDir;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn build_cli() -> Command {
    let mut cli = Command::new("difftrack")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Multi-source DOA tracking trained through differentiable tracking metrics")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        let mut sub = Command::new(spec.name)
            .about(spec.about)
            .arg(Arg::new("out").long("out").required(true).value_name("DIR").help("output directory"))
            .arg(Arg::new("config").long("config").value_name("FILE").help("key = value settings file"));
        for &(key, default, help) in spec.keys {
            let help = if default.is_empty() { help.to_string() } else { format!("{help} [default: {default}]") };
            let mut arg = Arg::new(key).long(flag_name(key)).help(help).action(ArgAction::Set);
            if spec.switches.contains(&key) {
                arg = arg.num_args(0..=1).default_missing_value("true").value_name("BOOL");
            }
            sub = sub.arg(arg);
        }
        cli = cli.subcommand(sub);
    }
    cli
}

fn run(spec: &CommandSpec, matches: &ArgMatches) -> CliResult<()> {
    let defaults: Vec<(&str, &str)> = spec.keys.iter().map(|&(k, d, _)| (k, d)).collect();
    let overrides = spec.keys.iter().map(|&(k, _, _)| (k, matches.get_one::<String>(k).cloned())).collect();
    let config = matches.get_one::<String>("config").map(PathBuf::from);
    let settings = Settings::resolve(&defaults, config.as_deref(), overrides)?;
    let root = PathBuf::from(matches.get_one::<String>("out").expect("required"));
    let out = OutputDir::open(&root, spec.name, &settings)?;
    let result = (spec.run)(&settings, &out);
    match &result {
        Ok(()) | Err(CliError::Check(_)) | Err(CliError::Divergence(_)) => out.finish(&settings)?,
        Err(_) => {}
    }
    result
}

fn main() -> ExitCode {
    let matches = build_cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let spec = COMMANDS.iter().find(|c| c.name == name).expect("registered subcommand");
    match run(spec, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
