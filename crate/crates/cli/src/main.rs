use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentopt::harness::{
    self, day_dir, identify_linear, render_report, run_noise_sweep, run_scaling, run_suite, train_latent,
    write_json, write_model_key, write_result, ExperimentConfig, Models, Scenario, LATENT_MODEL_FILE,
    LINEAR_MODEL_FILE,
};
use latentopt::optim::Method;
use latentopt::Result;

#[derive(Parser, Debug)]
#[command(name = "latentopt", version, about = "Latent-variable HVAC scheduling experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment configuration (TOML). Defaults apply to anything unset.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set days.test=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; takes precedence over LATENTOPT_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent solver runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the building's operating history and write it as CSV.
    Generate,
    /// Train the latent autoencoders and dynamics.
    Train,
    /// Fit the original-space linear model.
    IdentifyLinear,
    /// Solve one test day with one method.
    Optimize {
        #[arg(long)]
        method: Method,
        /// Test-day index, from 0.
        #[arg(long)]
        day: usize,
    },
    /// Every configured method on every test day.
    Suite,
    /// The suite under multiplicative disturbance-forecast noise.
    NoiseSweep {
        /// Comma-separated noise levels; the configured grid by default.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
    /// Dimensions, accuracy and solver timing as the zone count grows.
    Scaling {
        /// Comma-separated zone counts; the configured list by default.
        #[arg(long, value_delimiter = ',')]
        zones: Option<Vec<usize>>,
    },
    /// Print tables from the results under the output directory.
    Report,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path, &g.overrides)?,
        None => ExperimentConfig::from_toml_with("", &g.overrides)?,
    }
    .with_env_output();
    if let Some(out) = &g.out {
        cfg.output = out.clone();
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn models_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join("models")
}

fn print_accuracy(label: &str, rmse: f64, r2: f64) {
    println!("{label:<8} test one-step RMSE {rmse:.4} °C, mean R² {r2:.4}");
}

/// Returns whether every requested run completed.
fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.global)?;
    std::fs::create_dir_all(&cfg.output)?;
    std::fs::write(cfg.output.join("config.toml"), cfg.to_toml()?)?;
    let out = cfg.output.clone();

    match cli.command {
        Command::Generate => {
            let scenario = Scenario::prepare(&cfg)?;
            let path = out.join("dataset.csv");
            scenario.data.write_csv(&path)?;
            println!(
                "{} days × {} steps, {} zones, {} actuators → {}",
                cfg.days.train + cfg.days.test,
                latentopt::thermal::STEPS_PER_DAY,
                scenario.building.zones(),
                scenario.building.conditioned(),
                path.display()
            );
            Ok(true)
        }
        Command::Train => {
            let scenario = Scenario::prepare(&cfg)?;
            let (set, report) = train_latent(&scenario)?;
            let dir = models_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            set.save(&dir.join(LATENT_MODEL_FILE))?;
            write_json(&report, &dir.join("train_report.json"))?;
            write_model_key(&scenario, &dir)?;
            let acc = latentopt::latent::evaluate_model(&set, &scenario.test_split()?)?;
            write_json(&acc, &dir.join("latent_accuracy.json"))?;
            println!(
                "trained {} parameters on {} samples; final loss {:.5}",
                report.parameters,
                report.samples,
                report.loss_history.last().copied().unwrap_or(f64::NAN)
            );
            print_accuracy("latent", acc.rmse_summary.mean, acc.r2_summary.mean);
            Ok(true)
        }
        Command::IdentifyLinear => {
            let scenario = Scenario::prepare(&cfg)?;
            let model = identify_linear(&scenario)?;
            let dir = models_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            write_json(&model, &dir.join(LINEAR_MODEL_FILE))?;
            write_model_key(&scenario, &dir)?;
            let acc = latentopt::latent::evaluate_model(&model, &scenario.test_split()?)?;
            write_json(&acc, &dir.join("linear_accuracy.json"))?;
            print_accuracy("linear", acc.rmse_summary.mean, acc.r2_summary.mean);
            Ok(true)
        }
        Command::Optimize { method, day } => {
            let scenario = Scenario::prepare(&cfg)?;
            let models = Models::load_or_fit(&scenario, &models_dir(&cfg))?;
            let problem = scenario.problem(day, None)?;
            let result = harness::solve(method, &problem, &models, &scenario.building, cfg.solvers.get(method))?;
            let path = write_result(&result, &day_dir(&out.join("optimize"), day))?;
            let c = result.costs;
            println!(
                "{method} day {day} ({}): Sum_dec {:.3} Sum_act {:.3} (Pow {:.3} Tem {:.3}), {} iterations, {:?} → {}",
                scenario.test_date(day),
                c.sum_dec,
                c.sum_act,
                c.pow_act,
                c.tem_act,
                result.iterations,
                result.stop,
                path.display()
            );
            Ok(true)
        }
        Command::Suite => {
            let scenario = Scenario::prepare(&cfg)?;
            let models = Models::load_or_fit(&scenario, &models_dir(&cfg))?;
            let outcome = run_suite(&scenario, &models, &out.join("suite"))?;
            print!("{}", render_report(&out)?);
            Ok(outcome.all_completed())
        }
        Command::NoiseSweep { sigmas } => {
            let scenario = Scenario::prepare(&cfg)?;
            let models = Models::load_or_fit(&scenario, &models_dir(&cfg))?;
            let sigmas = sigmas.unwrap_or_else(|| cfg.noise.sigmas.clone());
            let report = run_noise_sweep(&scenario, &models, &sigmas, &out.join("noise"))?;
            print!("{}", render_report(&out)?);
            Ok(report.all_completed())
        }
        Command::Scaling { zones } => {
            let zones = zones.unwrap_or_else(|| cfg.scaling.zones.clone());
            let report = run_scaling(&cfg, &zones, &out.join("scaling"))?;
            print!("{}", render_report(&out)?);
            Ok(report
                .rows
                .iter()
                .all(|r| r.gt_per_iteration_seconds.is_some() && r.optiden_per_iteration_seconds.is_some()))
        }
        Command::Report => {
            print!("{}", render_report(Path::new(&out))?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some runs did not complete; see the reports for details");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
