use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use glyrl_agents::Algorithm;
use glyrl_pipeline::commands::{self, RunDir};
use glyrl_pipeline::RunConfig;

#[derive(Parser)]
#[command(name = "glyrl", about = "Offline RL for glycemia control: data, training, evaluation, personalization, reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply to omitted keys (and to everything without a file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    scenario: Option<Scenario>,
    /// Roll out raw agent actions: no meal boluses and no hypoglycemia cut-off.
    #[arg(long, global = true)]
    no_safety: bool,
    #[arg(long, global = true, default_value = "td3bc", value_parser = parse_algorithm)]
    algorithm: Algorithm,
    /// Run directory, overriding the config's output_dir.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the cohorts under the behavior policy and build datasets.
    GenData,
    /// Train the population model.
    Train,
    /// In-silico evaluation against the behavior policy.
    Eval,
    /// FQE estimates on the held-out segment.
    Fqe,
    /// Patient-wise fine-tuning with FQE checkpoint selection.
    Personalize,
    /// Reward/metric correlations and the basal-vs-future comparison.
    Analyze,
    /// Consolidated report of everything in the run directory.
    Report,
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Announced,
    Unannounced,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: glyrl_agents::AgentError| e.to_string())
}

fn run(cli: Cli) -> glyrl_pipeline::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.scenario {
        cfg.scenario.announce_meals = matches!(s, Scenario::Announced);
    }
    if cli.no_safety {
        cfg.scenario.safety_on = false;
    }
    if let Some(o) = cli.output {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let run = RunDir::new(&cfg.output_dir);
    let algo = cli.algorithm;
    match cli.command {
        Command::GenData => {
            let out = commands::gen_data(&cfg, &run)?;
            println!("training cohort\n{}\npersonalization cohort\n{}", out.summary, out.personal_summary);
        }
        Command::Train => {
            let out = commands::train_population(&cfg, &run, algo)?;
            println!("{} trained for {} steps; artifact {}", algo, out.artifact.steps, out.artifact.hash()?);
        }
        Command::Eval => {
            let s = commands::eval_insilico(&cfg, &run, algo)?.summary;
            println!(
                "{}: behavior TIR {:.2} mean {:.1} | {} TIR {:.2} mean {:.1} | ΔTIR {:+.2} Δmean {:+.1} mg/dL | {}/{} patients at least behavior",
                s.scenario,
                s.behavior.tir,
                s.behavior.mean_glycemia,
                algo,
                s.policy.tir,
                s.policy.mean_glycemia,
                s.delta_tir,
                s.delta_mean_glycemia,
                s.patients_at_least_behavior,
                s.n_patients
            );
        }
        Command::Fqe => {
            for r in commands::fqe_cmd(&cfg, &run, algo)?.rows {
                println!("{:10} {:14} {:.4}", r.candidate, r.record.metric, r.record.estimate);
            }
        }
        Command::Personalize => {
            let r = commands::personalize_cmd(&cfg, &run, algo)?.report;
            let (m, u) = r.improved();
            println!("improved reward estimate: {m}/{n} (patient FQE), {u}/{n} (union FQE)", n = r.evaluated().count());
        }
        Command::Analyze => {
            let s = commands::analyze_cmd(&cfg, &run, algo)?.summary;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Report => {
            let r = commands::report_cmd(&run)?;
            println!("report: {} sections, missing {:?}", r.sections.len(), r.missing);
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
