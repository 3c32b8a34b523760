use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msr_cli::config::ExperimentConfig;
use msr_cli::error::{CliError, Result};
use msr_cli::experiment::{self, all_jobs, load_data, run_jobs};
use msr_cli::selftest;
use msr_core::corrupt::Variant;

#[derive(Parser, Debug)]
#[command(name = "msr", version, about = "Sparse autoencoder anomaly detection on phantom vessel cohorts")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "msr.json")]
    config: PathBuf,
    /// Variant to act on; all configured variants when omitted.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Fold to act on; all folds when omitted.
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Unscaled training schedule (with init-config: the full-size preset).
    #[arg(long, global = true)]
    full: bool,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Override the master and cohort seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent jobs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the default config.
    InitConfig,
    /// Generate the phantom cohort.
    GenData,
    /// Train one model per (variant, fold).
    Train,
    /// Calibrate and score validation and test patches.
    Score,
    /// Evaluate all scores and write the report.
    Report,
    /// Rank a hyper-parameter grid by validation AUC.
    Gridsearch,
    /// Run the oracle suites.
    Selftest,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if cli.full {
        cfg.train.scale = 1.0;
    }
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
        cfg.cohort.seed = seed;
    }
    Ok(cfg)
}

fn selected(cli: &Cli, cfg: &ExperimentConfig) -> Result<Vec<(Variant, usize)>> {
    if let Some(v) = cli.variant {
        if !cfg.variants.contains(&v) {
            return Err(CliError::config(format!("variant {v} is not in the config")));
        }
    }
    if let Some(f) = cli.fold {
        if f >= cfg.cohort.k_folds {
            return Err(CliError::config(format!("fold {f} outside 0..{}", cfg.cohort.k_folds)));
        }
    }
    Ok(all_jobs(cfg)
        .into_iter()
        .filter(|&(v, f)| cli.variant.is_none_or(|x| x == v) && cli.fold.is_none_or(|x| x == f))
        .collect())
}

fn run(cli: &Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig => {
            if cli.config.exists() && !cli.force {
                return Err(CliError::config(format!("{} exists; pass --force to overwrite", cli.config.display())));
            }
            let mut cfg = if cli.full { ExperimentConfig::full() } else { ExperimentConfig::default() };
            if let Some(seed) = cli.seed {
                cfg.master_seed = seed;
                cfg.cohort.seed = seed;
            }
            fs::write(&cli.config, cfg.to_json()?).map_err(|e| CliError::config(format!("{}: {e}", cli.config.display())))?;
            println!("wrote {}", cli.config.display());
        }
        Command::GenData => {
            let cfg = load(cli)?;
            let table = experiment::gen_data(&cfg, cli.force)?;
            println!("cohort written to {}", cfg.data_dir().display());
            print!("{table}");
        }
        Command::Train => {
            let cfg = load(cli)?;
            let data = load_data(&cfg)?;
            let jobs = selected(cli, &cfg)?;
            let done = run_jobs(cli.jobs, &jobs, |&(v, f)| {
                let s = experiment::train_job(&cfg, &data, v, f)?;
                log::info!("{v} fold {f}: {} steps, final loss {:.6}", s.steps, s.final_loss);
                Ok(s)
            })?;
            for s in done {
                println!("{} fold {}: seed {} trained on {} patches, final loss {:.6}", s.variant, s.fold, s.seed, s.n_train, s.final_loss);
            }
        }
        Command::Score => {
            let cfg = load(cli)?;
            let data = load_data(&cfg)?;
            let jobs = selected(cli, &cfg)?;
            let stats = run_jobs(cli.jobs, &jobs, |&(v, f)| experiment::score_job(&cfg, &data, v, f))?;
            for ((v, f), s) in jobs.iter().zip(stats) {
                println!("{v} fold {f}: mu {:.6} sigma {:.6} threshold {:.6}", s.mu, s.sigma, s.threshold());
            }
        }
        Command::Report => {
            let cfg = load(cli)?;
            let report = experiment::report(&cfg)?;
            print!("{}", experiment::report_table(&report));
            println!("report written to {}", cfg.report_dir().display());
        }
        Command::Gridsearch => {
            let cfg = load(cli)?;
            let data = load_data(&cfg)?;
            let rows = experiment::gridsearch(&cfg, &data, cli.jobs)?;
            let path = cfg.gridsearch_dir().join("results.csv");
            experiment::write_grid(&path, &rows)?;
            println!("{:>5}{:>10}{:>10}{:>8}{:>8}{:>10}{:>10}", "rank", "lambda", "gamma", "alpha", "sigma", "auc", "ap");
            for r in &rows {
                println!(
                    "{:>5}{:>10}{:>10}{:>8}{:>8}{:>10.4}{:>10.4}",
                    r.rank, r.lambda, r.gamma, r.alpha, r.sigma, r.validation_auc, r.validation_ap
                );
            }
            println!("results written to {}", path.display());
        }
        Command::Selftest => {
            let checks = selftest::run_all(cli.seed.unwrap_or(0))?;
            for c in &checks {
                println!("{c}");
            }
            let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
            if !failed.is_empty() {
                return Err(CliError::SelfTest(failed));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
