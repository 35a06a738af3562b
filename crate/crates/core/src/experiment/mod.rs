//! Declarative experiments: a TOML file names a command and its settings;
//! [`run`] executes it into a run directory.

mod config;
mod run;

pub use config::{
    Command, ExperimentConfig, GeneratorSource, GimlSection, ModelSection, MultigradSection, RgapSection,
    SimulationSection, SweepSection,
};
pub use run::{compare, run, write_error_report, ErrorReport, Fingerprint, RunOutcome, Table};
