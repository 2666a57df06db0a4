mod args;
mod commands;
mod config;
mod logging;

use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Value};

use args::{Cli, Command};
use config::PipelineConfig;

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<Value> {
    if let Command::Embed(a) = &cli.command {
        return commands::embed(a);
    }
    let cfg = PipelineConfig::load(&cli.common)?;
    log::debug!("config digest {}", cfg.scoring().digest());
    match &cli.command {
        Command::Calibrate(a) => commands::calibrate(&cfg, a),
        Command::Score(a) => commands::score(&cfg, a),
        Command::Detect(a) => commands::detect_cmd(&cfg, a),
        Command::Select(a) => commands::select(&cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
        Command::SimulateStream(a) => commands::simulate_stream(&cfg, a),
        Command::Embed(_) => unreachable!(),
    }
}

fn error_json(err: &anyhow::Error) -> Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<gradnormir_core::Error>())
        .map_or("error", gradnormir_core::Error::kind);
    let causes: Vec<String> = err.chain().skip(1).map(ToString::to_string).collect();
    json!({ "error": { "kind": kind, "message": err.to_string(), "causes": causes } })
}
