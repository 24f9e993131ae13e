//! Command-line pipeline: trajectory generation, model training, simulation,
//! evaluation and the cubic regression demo.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod commands;
pub mod io;

use args::{Cli, Command, ConfigFile};
use commands::{
    cmd_evaluate, cmd_generate, cmd_regress_demo, cmd_simulate, cmd_train, EvaluateSettings, GenerateSettings, RegressDemoSettings,
    SimulateSettings, TrainSettings,
};
use odekernel::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) | Error::Convergence { .. } | Error::Stiffness { .. } | Error::Divergence { .. } => {
                CliError::Numeric(e.to_string())
            }
            Error::Serialization(_) => CliError::Io(e.to_string()),
            Error::Dimension { .. } | Error::InvalidInput(_) | Error::UnsupportedOp(_) | Error::InvalidLoss(_) | Error::Scheme(_) => {
                CliError::Usage(e.to_string())
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let seed = config.seed;
    match cli.command {
        Command::Generate(a) => cmd_generate(&GenerateSettings::resolve(a.overlay(config.generate), seed)?),
        Command::Train(a) => cmd_train(&TrainSettings::resolve(a.overlay(config.train), seed)?),
        Command::Simulate(a) => cmd_simulate(&SimulateSettings::resolve(a.overlay(config.simulate), seed)?),
        Command::Evaluate(a) => cmd_evaluate(&EvaluateSettings::resolve(a.overlay(config.evaluate))?),
        Command::RegressDemo(a) => cmd_regress_demo(&RegressDemoSettings::resolve(a.overlay(config.regress_demo), seed)?),
    }
}
