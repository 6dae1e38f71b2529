use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stackelberg_peg::controllers::ControllerKind;
use stackelberg_peg::error::Error;
use stackelberg_peg::harness::{self, EpisodeConfig, StudyConfig};
use stackelberg_peg::market::{ScenarioConfig, ScenarioKind};

#[derive(Parser)]
#[command(version, about = "Redemption-price controllers for a collateralized stablecoin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its trace.
    Run(RunArgs),
    /// Run the Monte Carlo comparison of all controllers.
    Mc(McArgs),
    /// Run the vault-crisis scenario for every controller.
    Crisis(CrisisArgs),
}

#[derive(Args)]
struct Common {
    /// TOML overlay applied to the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Leader planning horizon.
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    /// Proportional gain for the proportional controller and the fallback.
    #[arg(long)]
    kp: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "utai")]
    controller: String,
    #[arg(long, default_value = "default")]
    scenario: String,
    /// Arbitrage gain.
    #[arg(long)]
    arb: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct McArgs {
    /// Seeds per cell.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CrisisArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

fn read_overlay(path: &Option<PathBuf>) -> Result<Option<String>, Error> {
    path.as_ref().map(std::fs::read_to_string).transpose().map_err(Error::from)
}

fn apply_common(config: &mut EpisodeConfig, common: &Common) {
    config.controller.protocol.horizon = common.horizon;
    if let Some(kp) = common.kp {
        config.controller.kp = kp;
        config.controller.fallback_kp = kp;
    }
}

fn run(args: RunArgs) -> Result<(), Error> {
    let kind = ControllerKind::parse(&args.controller)?;
    let scenario = ScenarioKind::parse(&args.scenario)?;
    let mut config = EpisodeConfig::new(scenario, kind);
    config.scenario = config.scenario.with_steps(args.common.steps);
    apply_common(&mut config, &args.common);
    if let Some(arb) = args.arb {
        config.agents = config.agents.with_arbitrage(arb);
    }
    if let Some(text) = read_overlay(&args.common.config)? {
        config = harness::overlay_config(&config, &text)?;
    }
    let trace = harness::run_episode(&config, args.seed)?;
    let metrics = harness::run_metrics(&trace)?;
    let stem = format!("{}_{}_seed{}", kind.label(), scenario.label(), args.seed);
    harness::save_trace(&trace, &args.common.out, &stem)?;
    println!("{}", serde_json::to_string_pretty(&metrics).map_err(|e| Error::Parse(e.to_string()))?);
    eprintln!("trace written to {}", args.common.out.join(format!("{stem}.csv")).display());
    Ok(())
}

fn study(common: &Common, trials: usize, seed: u64, scenarios: Vec<ScenarioConfig>, arb_levels: Vec<f64>) -> Result<StudyConfig, Error> {
    let mut study = StudyConfig {
        scenarios,
        arb_levels,
        seeds: trials,
        master_seed: seed,
        steps: common.steps,
        ..StudyConfig::default()
    };
    apply_common(&mut study.template, common);
    if let Some(text) = read_overlay(&common.config)? {
        study = harness::overlay_config(&study, &text)?;
    }
    Ok(study)
}

fn progress(done: usize, total: usize) {
    if done % 10 == 0 || done == total {
        eprintln!("{done}/{total} episodes");
    }
}

fn write_report(report: &harness::StudyReport, out: &PathBuf, name: &str) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Parse(e.to_string()))?;
    let path = out.join(name);
    std::fs::write(&path, json)?;
    eprintln!("report written to {}", path.display());
    Ok(())
}

fn mc(args: McArgs) -> Result<(), Error> {
    let s = study(&args.common, args.trials, args.seed, ScenarioKind::STUDY.iter().map(|&k| ScenarioConfig::preset(k)).collect(), vec![0.0, 50.0])?;
    let report = harness::monte_carlo(&s, &progress)?;
    println!("P-MAD\n{}", report.table("p_mad"));
    println!("R-MAD\n{}", report.table("r_mad"));
    write_report(&report, &args.common.out, "monte_carlo.json")
}

fn crisis(args: CrisisArgs) -> Result<(), Error> {
    let s = study(&args.common, args.trials, args.seed, vec![ScenarioConfig::preset(ScenarioKind::VaultCrisis)], vec![50.0])?;
    let report = harness::monte_carlo(&s, &progress)?;
    let cell = &report.cells[0];
    println!(
        "{:<8}{:>12}{:>12}{:>12}{:>12}{:>14}{:>10}",
        "ctrl", "p_mad", "r_mad", "min_gamma", "below_beta", "repeg_median", "failed"
    );
    for (label, m) in &cell.controllers {
        let repeg = m.time_to_repeg_median.map_or("never".to_string(), |t| format!("{t:.1}"));
        println!(
            "{label:<8}{:>12.6}{:>12.6}{:>12.4}{:>12}{repeg:>14}{:>10}",
            m.p_mad, m.r_mad, m.min_gamma, m.below_min_ratio, m.failed_episodes
        );
    }
    write_report(&report, &args.common.out, "crisis.json")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Mc(a) => mc(a),
        Command::Crisis(a) => crisis(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::Parse(_) | Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
