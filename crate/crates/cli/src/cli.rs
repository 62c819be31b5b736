use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pvscan_core::finetune::ExportProfile;
use pvscan_core::inference::BackendKind;

use crate::commands;
use crate::config::Config;
use crate::errors::categorize;
use crate::workspace::DataDir;

#[derive(Debug, Parser)]
#[command(
    name = "pvscan",
    version,
    about = "Rooftop solar panel assessment pipeline"
)]
pub struct Cli {
    /// Data directory holding manifests, imagery, journals and reports.
    #[arg(
        long,
        global = true,
        env = "PVSCAN_DATA",
        default_value = "pvscan-data"
    )]
    pub data_dir: PathBuf,

    /// Config file (TOML). Defaults to <data-dir>/pvscan.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Query installation sites for each region and sample them.
    Ingest(IngestArgs),
    /// Download one satellite scene per sampled site.
    Fetch(FetchArgs),
    /// Cut every scene into a 4x4 grid of tiles.
    Slice,
    /// Ground-truth label management.
    Labels {
        #[command(subcommand)]
        command: LabelsCommand,
    },
    /// Assess tiles with a model backend and journal the results.
    Predict(PredictArgs),
    /// Score the latest predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Split predictions into auto labels and a review queue.
    Triage(TriageArgs),
    /// Write fine-tuning JSONL files from labeled tiles.
    ExportFinetune(ExportArgs),
    /// Generate synthetic scenes, tiles and exact labels.
    Synth(SynthArgs),
    /// Run the review HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Region definitions (JSON lines); the six built-in regions when omitted.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Overpass API endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Read saved responses (<dir>/<region-slug>.json) instead of querying.
    #[arg(long)]
    pub from_responses: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[arg(long)]
    pub zoom: Option<u8>,
    /// Scene side in pixels; must be divisible by 4.
    #[arg(long)]
    pub size: Option<u32>,
    /// Map API base URL.
    #[arg(long)]
    pub base_url: Option<String>,
    /// Only fetch sites of this region.
    #[arg(long)]
    pub region: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum LabelsCommand {
    /// Append labels from a JSON-lines file to the ground-truth manifest.
    Import {
        file: PathBuf,
        /// Annotator recorded for lines that do not name one.
        #[arg(long, default_value = "import")]
        annotator: String,
    },
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    /// Number of few-shot examples.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Recorded responses for the replay backend.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Attach example images to the request.
    #[arg(long)]
    pub example_images: bool,
    /// Only tiles of this region.
    #[arg(long)]
    pub region: Option<String>,
    /// Re-run tiles that already have a journal record for the same prompt.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Also report each region separately.
    #[arg(long)]
    pub by_region: bool,
    /// Score rejected responses as "no solar" instead of excluding them.
    #[arg(long)]
    pub reject_as_negative: bool,
}

#[derive(Debug, Args)]
pub struct TriageArgs {
    #[arg(long)]
    pub confidence_threshold: Option<f64>,
    #[arg(long)]
    pub likelihood_margin: Option<f64>,
    /// Skip tiles that already have a ground-truth label.
    #[arg(long)]
    pub unlabeled_only: bool,
    /// Also append auto labels to the ground-truth manifest.
    #[arg(long)]
    pub merge_auto: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Share of labeled tiles used for training.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_profile)]
    pub profile: Option<ExportProfile>,
    /// Split without preserving the class mix.
    #[arg(long)]
    pub no_stratify: bool,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub bind: Option<String>,
    /// Built review UI to serve at /.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse()
}

fn parse_profile(s: &str) -> Result<ExportProfile, String> {
    s.parse()
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 2 for usage errors, 1 for operational errors.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", categorize(&e));
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let data = DataDir::new(&cli.data_dir);
    let mut config = Config::load(cli.config.as_deref(), &cli.data_dir)?;
    if let Some(path) = &cli.config {
        config.resolve_paths(path.parent().unwrap_or(std::path::Path::new(".")));
    } else {
        config.resolve_paths(&cli.data_dir);
    }
    match cli.command {
        Command::Ingest(a) => commands::acquire::ingest(&data, config, a),
        Command::Fetch(a) => commands::acquire::fetch(&data, config, a),
        Command::Slice => commands::acquire::slice(&data, config),
        Command::Labels {
            command: LabelsCommand::Import { file, annotator },
        } => commands::labels::import(&data, config, &file, &annotator),
        Command::Predict(a) => commands::predict::predict(&data, config, a),
        Command::Evaluate(a) => commands::evaluate::evaluate(&data, config, a),
        Command::Triage(a) => commands::triage::triage(&data, config, a),
        Command::ExportFinetune(a) => commands::export::export(&data, config, a),
        Command::Synth(a) => commands::synth::synth(&data, config, a),
        Command::Serve(a) => commands::serve(&data, config, a),
    }
}
