use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Map, Value};

use ssl_lab::data::{sample_dataset, DistributionConfig};
use ssl_lab::experiments::{
    run_experiment, run_landscape_cert, run_sl_experiment, run_ssl_experiment, write_sl_artifacts,
    write_ssl_artifacts, ExperimentConfig, ExperimentName,
};
use ssl_lab::landscape::{solve_tilde_minimum_with, SolverOptions};
use ssl_lab::verify::run_verify;
use ssl_lab::Result;

#[derive(Parser)]
#[command(name = "ssl-lab", version, about = "Train, certify and measure a one-layer self-supervised model")]
struct Cli {
    /// JSON config file; command-line flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset and write it as CSV
    GenData(Overrides),
    /// Multi-seed gradient descent on the self-supervised objective
    TrainSsl(Overrides),
    /// Multi-seed gradient descent on the supervised cross-entropy
    TrainSl(Overrides),
    /// Solve for the minimum of the noise-free loss
    SolveTilde(Overrides),
    /// Full landscape certification report
    LandscapeCert(Overrides),
    /// Run one of the named experiments
    Reproduce {
        experiment: ExperimentName,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the property suite; exits with status 2 on any failure
    Verify,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// sigmoid or tanh
    #[arg(long)]
    activation: Option<String>,
    /// wide or narrow
    #[arg(long)]
    tanh_bounds: Option<String>,
    /// region or sign_only
    #[arg(long)]
    init_mode: Option<String>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    record_every: Option<usize>,
}

impl Overrides {
    fn to_json(&self, cli: &Cli) -> Value {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("d", self.d.map(Value::from));
        put("tau", self.tau.map(Value::from));
        put("rho", self.rho.map(Value::from));
        put("alpha", self.alpha.map(Value::from));
        put("beta", self.beta.map(Value::from));
        put("gamma", self.gamma.map(Value::from));
        put("eta", self.eta.map(Value::from));
        put("iters", self.iters.map(Value::from));
        put("n", self.n.map(Value::from));
        put("seeds", self.seeds.map(Value::from));
        put("mc_samples", self.mc_samples.map(Value::from));
        put("activation", self.activation.clone().map(Value::from));
        put("tanh_bounds", self.tanh_bounds.clone().map(Value::from));
        put("init_mode", self.init_mode.clone().map(Value::from));
        put("init_scale", self.init_scale.map(Value::from));
        put("record_every", self.record_every.map(Value::from));
        put("master_seed", cli.seed.map(Value::from));
        put("out_dir", cli.out.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned())));
        Value::Object(m)
    }
}

/// Defaults for `name`, then the config file, then the flags.
fn resolve(cli: &Cli, name: ExperimentName, ov: &Overrides) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path, name)?,
        None => ExperimentConfig::defaults_for(name),
    };
    let cfg = base.merge_json(&ov.to_json(cli))?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenData(ov) => {
            let cfg = resolve(cli, ExperimentName::Fig3, ov)?;
            let dc = DistributionConfig {
                d: cfg.d,
                tau: cfg.tau,
                rho: cfg.rho(),
                n: cfg.n(),
                seed: cfg.master_seed,
            };
            let data = sample_dataset(&dc)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("dataset.csv");
            data.save_csv(&path)?;
            print_json(&json!({ "file": path, "counts": data.counts, "distribution": dc }))?;
        }
        Command::TrainSsl(ov) => {
            let cfg = resolve(cli, ExperimentName::Fig3, ov)?;
            let run = run_ssl_experiment(&cfg)?;
            let a = write_ssl_artifacts(&run, &cfg.out_dir)?;
            info!("wrote {} files to {}", a.files.len(), cfg.out_dir.display());
            print_json(&run.summary)?;
        }
        Command::TrainSl(ov) => {
            let cfg = resolve(cli, ExperimentName::Fig6Sl, ov)?;
            let run = run_sl_experiment(&cfg)?;
            let a = write_sl_artifacts(&run, &cfg.out_dir)?;
            info!("wrote {} files to {}", a.files.len(), cfg.out_dir.display());
            print_json(&run.summary)?;
        }
        Command::SolveTilde(ov) => {
            let cfg = resolve(cli, ExperimentName::LandscapeCert, ov)?;
            let opts = SolverOptions::for_activation(cfg.activation, cfg.tanh_bounds);
            let m = solve_tilde_minimum_with(cfg.tau, cfg.alpha, cfg.activation, 1e-10, &opts)?;
            let doc = json!({
                "minimum": m,
                "w1_star": m.w1(cfg.d).as_slice(),
                "w2_star": m.w2(cfg.d).as_slice(),
            });
            if cli.out.is_some() {
                fs::create_dir_all(&cfg.out_dir)?;
                fs::write(cfg.out_dir.join("tilde_minimum.json"), serde_json::to_string_pretty(&doc)?)?;
            }
            print_json(&doc)?;
        }
        Command::LandscapeCert(ov) => {
            let cfg = resolve(cli, ExperimentName::LandscapeCert, ov)?;
            let (report, _) = run_landscape_cert(&cfg)?;
            print_json(&report)?;
            if !report.certified {
                eprintln!("certificate not established");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Reproduce { experiment, overrides } => {
            let cfg = resolve(cli, *experiment, overrides)?;
            let (summary, a) = run_experiment(&cfg)?;
            for f in &a.files {
                info!("wrote {}", f.display());
            }
            print_json(&summary)?;
        }
        Command::Verify => {
            let checks = run_verify();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
