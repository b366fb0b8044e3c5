use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use visitflow::pipeline::{run, IndustryClass, Run, SynthConfig};

#[derive(Parser)]
#[command(name = "visitflow", version, about = "Visitor-flow forecasting, spatial statistics and attribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run directory holding inputs, outputs and manifest.txt.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    /// RunConfig file (`key = value` lines). Defaults to the run directory's saved config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Min–max normalize raw socioeconomic composites.
    #[arg(long)]
    normalize: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate the flow CSV, aggregate the configured industry.
    Ingest(Common),
    /// Train the forecaster and write model/checkpoint.txt.
    Train(Common),
    /// Held-out and next-week forecasts from the checkpoint.
    Predict(Common),
    /// Accuracy metrics against the historical-average baseline and rates of change.
    Evaluate(Common),
    /// Six-level binning and k-means clusters of the next-week forecast.
    Cluster(Common),
    /// Global and local bivariate Moran's I.
    Moran(Common),
    /// Ridge surrogate plus GeoShapley attribution over socioeconomic composites.
    Attribute(Common),
    /// Collate the five result tables into report/.
    Report(Common),
    /// Write a synthetic flow panel and socioeconomic table into the run directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        units: usize,
        #[arg(long, default_value_t = 60)]
        weeks: usize,
        /// Log-normal noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
        /// Comma-separated sectors (automotive, cybersecurity, transport).
        #[arg(long)]
        industries: Option<String>,
    },
}

fn execute(command: Command) -> visitflow::Result<String> {
    let open = |c: &Common| {
        let mut overrides = c.overrides.clone();
        if c.normalize {
            overrides.push("normalize_socio=true".into());
        }
        Run::open(&c.run_dir, c.config.as_deref(), &overrides)
    };
    match command {
        Command::Ingest(c) => run::ingest_cmd(&open(&c)?),
        Command::Train(c) => run::train_cmd(&open(&c)?),
        Command::Predict(c) => run::predict_cmd(&open(&c)?),
        Command::Evaluate(c) => run::evaluate_cmd(&open(&c)?),
        Command::Cluster(c) => run::cluster_cmd(&open(&c)?),
        Command::Moran(c) => run::moran_cmd(&open(&c)?),
        Command::Attribute(c) => run::attribute_cmd(&open(&c)?),
        Command::Report(c) => run::report_cmd(&open(&c)?),
        Command::Synth {
            common,
            seed,
            units,
            weeks,
            noise,
            industries,
        } => {
            let mut config = SynthConfig {
                seed,
                units,
                weeks,
                ..SynthConfig::default()
            };
            if let Some(n) = noise {
                config.noise = n;
            }
            if let Some(list) = industries {
                config.industries = list
                    .split(',')
                    .map(str::parse::<IndustryClass>)
                    .collect::<visitflow::Result<_>>()?;
            }
            run::synth(&mut open(&common)?, &config)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
