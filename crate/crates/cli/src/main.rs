use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Approximate aggregate queries answered by a trained generative model.
#[derive(Debug, Parser)]
#[command(name = "aqp", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// CSV table (overrides data.table).
    #[arg(long, global = true)]
    pub table: Option<PathBuf>,
    /// Schema override file (overrides data.schema).
    #[arg(long, global = true)]
    pub schema: Option<PathBuf>,
    /// Output directory (overrides output).
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a CSV, print a column profile and write the schema.
    Ingest,
    /// Train a model bundle on the configured table.
    Train(TrainArgs),
    /// Answer one SQL query.
    Query(QueryArgs),
    /// Read queries from stdin, one per line.
    Repl(ModelArgs),
    /// Run the synthetic workload and write a report.
    Eval(EvalArgs),
    /// Write a synthetic CSV from a spec file or a preset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model file (default: <output>/model.elct).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Generated rows per subquery (overrides engine.n_samples).
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Where to write the model (default: <output>/model.elct).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Masking policy: stratified, random or none.
    #[arg(long)]
    pub mask_kind: Option<aqp_core::masking::MaskKind>,
    #[arg(long)]
    pub mask_factor: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Print the query plan instead of executing it.
    #[arg(long)]
    pub plan: bool,
    /// Print the result as JSON.
    #[arg(long)]
    pub json: bool,
    pub sql: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Evaluate at several sample counts (default: eval.samples).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub samples_sweep: Option<Vec<usize>>,
    /// Train one bundle per masking policy and compare them.
    #[arg(long)]
    pub masking_ablation: bool,
    /// Attribute combinations per predicate count (overrides eval.count).
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator spec (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_parser = ["rare-group"])]
    pub preset: Option<String>,
    /// Row count (overrides the spec).
    #[arg(long)]
    pub rows: Option<usize>,
    /// CSV destination (default: <output>/synth.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
