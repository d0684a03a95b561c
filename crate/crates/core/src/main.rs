use std::path::PathBuf;
use std::process::ExitCode;

use adt_rec::experiment::{run_experiment, summary_table, ExperimentConfig, ExtraStrategy, StrategyName, Template};
use adt_rec::model::ModelKind;
use clap::Parser;

/// Run denoising-recommender experiments on synthetic or file-based data.
#[derive(Debug, Parser)]
#[command(name = "adt-rec", version)]
struct Cli {
    /// TOML experiment config; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    template: Option<Template>,
    /// Run seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyName>,
    #[arg(long, value_enum)]
    extra: Option<ExtraStrategy>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epsilon_max: Option<f64>,
    #[arg(long)]
    epsilon_n: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    ratio_threshold: Option<f64>,
    /// Interaction file (tab-separated); replaces the synthetic dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    noise_rate: Option<f64>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: adt_rec::Error| e.to_string())
}

impl Cli {
    fn apply(self, mut c: ExperimentConfig) -> ExperimentConfig {
        if let Some(v) = self.template {
            c.template = Some(v);
        }
        if let Some(n) = self.seeds {
            c.seeds = (0..n).collect();
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.strategy {
            c.strategy = v;
        }
        if let Some(v) = self.extra {
            c.extra = v;
        }
        if let Some(v) = self.model {
            c.model.kind = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.epsilon_max {
            c.epsilon_max = v;
        }
        if let Some(v) = self.epsilon_n {
            c.epsilon_n = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.neighbors {
            c.neighbors = v;
        }
        if let Some(v) = self.ratio_threshold {
            c.ratio_threshold = v;
        }
        if let Some(v) = self.data {
            c.data.path = Some(v);
        }
        if let Some(v) = self.noise_rate {
            c.data.noise_rate = Some(v);
        }
        c
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let base = match &cli.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: stage `config` failed: {e}");
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    let config = cli.apply(base);
    match run_experiment(&config) {
        Ok(summary) => {
            print!("{}", summary_table(&summary));
            println!("wrote {}", config.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
