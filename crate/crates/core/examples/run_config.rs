//! Runs an experiment file the way the command-line tool does.
//!
//! cargo run --release --example run_config -- crates/core/examples/configs/invert.toml /tmp/run

use std::path::PathBuf;

use gialab::experiment::{run, ExperimentConfig};

fn main() -> gialab::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/invert.toml"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gialab-run-config"));
    let cfg = ExperimentConfig::load(&config)?;
    let outcome = run(&cfg, &out, None)?;
    println!("{} run {} in {}", outcome.fingerprint.method, outcome.fingerprint.config, outcome.dir.display());
    print!("{}", outcome.summary.to_csv());
    Ok(())
}
