// SPDX-License-Identifier: MIT OR Apache-2.0

mod args;
mod commands;
mod error;
mod output;

use clap::Parser;

use crate::args::{Cli, Command};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROTATELAB_LOG", "warn")).init();
    let cli = Cli::parse();
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
        .max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
        log::warn!("could not size the worker pool: {e}");
    }
    let result = match cli.command {
        Command::Decompose(a) => commands::decompose::run(a, jobs),
        Command::Survey(a) => commands::survey::run(a),
        Command::Reconstruct(a) => commands::reconstruct::run(a),
        Command::Ablate(a) => commands::ablate::run(a),
        Command::Match(a) => commands::matching::run(a),
        Command::Bench(a) => commands::bench::run(a),
        Command::Sweep(a) => commands::sweep::run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {}", error::render(&e));
        std::process::exit(error::exit_code(&e));
    }
}
