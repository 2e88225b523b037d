//! `lode`: synthesize data, train, complete scenes and evaluate.

mod commands;
mod config;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use lode::LodeError;

use crate::config::{Settings, KEYS, LIST_KEYS};
use crate::run::Run;

#[derive(Debug)]
pub struct CliError(String);

impl CliError {
    pub fn msg(m: impl Into<String>) -> Self {
        Self(m.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<LodeError> for CliError {
    fn from(e: LodeError) -> Self {
        Self(e.to_string())
    }
}

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("synth", "write a seeded synthetic dataset"),
    ("train", "train a model on a dataset"),
    ("complete", "complete one scene with a trained model"),
    ("eval", "score the input, a trained model, or an ablation"),
];

fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

fn subcommand(name: &'static str, about: &'static str) -> Command {
    let mut cmd = Command::new(name)
        .args_override_self(true)
        .about(about)
        .arg(Arg::new("config").long("config").value_name("FILE").value_parser(clap::value_parser!(PathBuf)).help("key = value settings file"))
        .arg(Arg::new("out").long("out").value_name("DIR").value_parser(clap::value_parser!(PathBuf)).help("output root"));
    for k in KEYS {
        let mut arg = Arg::new(k.name).long(k.name).value_name("VALUE").help(k.help);
        if k.name.contains('_') {
            arg = arg.visible_alias(leak(k.name.replace('_', "-")));
        }
        if LIST_KEYS.contains(&k.name) {
            arg = arg.action(ArgAction::Append).value_delimiter(',');
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn cli() -> Command {
    let mut cmd = Command::new("lode").about("Implicit scene completion from sparse point clouds").subcommand_required(true);
    for &(name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(subcommand(name, about));
    }
    cmd
}

/// Defaults, then the config file, then flags.
fn settings(m: &ArgMatches) -> Result<Settings, CliError> {
    let mut s = Settings::default();
    if let Some(p) = m.get_one::<PathBuf>("config") {
        s.apply_file(p)?;
    }
    for k in KEYS {
        if let Some(vals) = m.get_many::<String>(k.name) {
            let joined = vals.map(String::as_str).collect::<Vec<_>>().join(",");
            s.set(k.name, &joined)?;
        }
    }
    Ok(s)
}

fn execute(name: &str, m: &ArgMatches) -> Result<PathBuf, CliError> {
    let s = settings(m)?;
    let threads: usize = s.parse("threads")?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| CliError::msg(e.to_string()))?;
    }
    let mut run = Run::create(name, m.get_one::<PathBuf>("out").map(PathBuf::as_path), m.get_one::<PathBuf>("config").map(PathBuf::as_path), &s)?;
    match name {
        "synth" => commands::synth(&s, &mut run)?,
        "train" => commands::train(&s, &mut run)?,
        "complete" => commands::complete(&s, &mut run)?,
        "eval" => commands::eval(&s, &mut run)?,
        _ => unreachable!("clap rejects unknown subcommands"),
    }
    run.finish()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match execute(name, sub) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
