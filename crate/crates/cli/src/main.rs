use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use introspect_core::error::Error;
use introspect_core::pipeline::analysis::{
    alpha_grid, cross_steering_matrix, drift_summary, entropy_decomposition, introspection_family, scaling_summary,
    Channel, ScalingRun,
};
use introspect_core::pipeline::config::{BackendConfig, ConceptEntry, DecodeConfig, DirectionSource, RunConfig};
use introspect_core::pipeline::grid::GridOutcome;
use introspect_core::pipeline::query::DEFAULT_ASSISTANT_SYSTEM_PROMPT;
use introspect_core::pipeline::report::{
    cross_table, drift_table, entropy_table, introspection_table, load_run_observations, scaling_table, write_report,
    Table,
};
use introspect_core::pipeline::run_config;
use introspect_core::pipeline::synth::{default_topics, synthetic_conversations};
use introspect_core::pipeline::train::{sweep_probe, sweep_probe_from_dumps, train_probe, train_probe_from_dumps};
use introspect_core::probes::{ConceptSpec, TrainedDirections};
use introspect_core::stats::DEFAULT_REPLICATES;
use introspect_core::steering::DEFAULT_ALPHAS;
use introspect_core::tensorio::write_conversations;
use introspect_core::toybackend::{build_introspective_toy, ReadoutOptions, ToyModel, ToyModelConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "introspect", version, about = "Probe, steer and self-report measurements on chat transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train or re-sweep concept probes.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Measure concepts over conversations at the given steering strengths.
    Measure(MeasureArgs),
    /// Run a full steering grid from a TOML config.
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one analysis over a run's observations.
    Analyze(AnalyzeArgs),
    /// Write every table and plot series of a run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_REPLICATES)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate synthetic inputs.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Toy,
    Dump,
}

#[derive(Args, Clone)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "toy")]
    backend: BackendKind,
    /// Dump tree for `--backend dump`.
    #[arg(long)]
    dumps: Option<PathBuf>,
    /// Weight seed of the toy model.
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
    /// Give the toy a linear digit readout with this gain.
    #[arg(long)]
    readout_gain: Option<f64>,
    /// Flip the toy readout sign.
    #[arg(long)]
    negated: bool,
}

impl BackendArgs {
    fn readout(&self) -> Option<ReadoutOptions> {
        self.readout_gain.map(|gain| ReadoutOptions { gain, negated: self.negated })
    }

    fn toy(&self) -> anyhow::Result<ToyModel<f64>> {
        let config = ToyModelConfig { seed: self.toy_seed, ..Default::default() };
        Ok(match self.readout() {
            Some(r) => build_introspective_toy(config, r)?.0,
            None => ToyModel::new(config)?,
        })
    }

    fn dumps(&self) -> anyhow::Result<&Path> {
        self.dumps.as_deref().ok_or_else(|| Error::InvalidConfig("--backend dump needs --dumps".into()).into())
    }

    fn config(&self) -> anyhow::Result<BackendConfig> {
        Ok(match self.backend {
            BackendKind::Toy => BackendConfig::Toy {
                model: ToyModelConfig { seed: self.toy_seed, ..Default::default() },
                readout: self.readout(),
            },
            BackendKind::Dump => BackendConfig::Dump { dir: self.dumps()?.to_path_buf() },
        })
    }
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Train a concept's directions and select its layer.
    Train {
        /// Concept definition (TOML).
        concept: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        /// Output directory for directions, sweep and vectors.
        #[arg(long)]
        out: PathBuf,
    },
    /// Redo the layer sweep with previously trained directions.
    Sweep {
        concept: PathBuf,
        /// `directions.json` written by `probe train`.
        #[arg(long)]
        directions: PathBuf,
        /// Dump tree holding `eval_pos/` and `eval_neg/`; without it the
        /// concept's evaluation texts run on the toy backend.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct MeasureArgs {
    #[arg(long)]
    conversations: PathBuf,
    /// Concept definitions, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    concepts: Vec<PathBuf>,
    /// Trained vector sets, one per concept in the same order.
    #[arg(long, value_delimiter = ',')]
    vectors: Vec<PathBuf>,
    /// Direction source for concepts without vectors.
    #[arg(long, value_enum, default_value = "train")]
    direction: DirectionArg,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = DEFAULT_ALPHAS.to_vec())]
    alphas: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    /// Also measure a random-direction control per concept.
    #[arg(long)]
    random_controls: bool,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Train,
    ToyReadout,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Drift,
    Introspection,
    Cross,
    Entropy,
    Scaling,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(value_enum)]
    analysis: Analysis,
    /// Run directory or observations file; repeat for `scaling`.
    #[arg(long = "in", required = true)]
    input: Vec<PathBuf>,
    /// Model sizes for `scaling`, one per `--in`.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Template conversations over the shipped topic list.
    Conversations {
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        turns: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn probe(cmd: ProbeCommand) -> anyhow::Result<()> {
    match cmd {
        ProbeCommand::Train { concept, backend, out } => {
            let spec = ConceptSpec::load(&concept)?;
            let trained = match backend.backend {
                BackendKind::Toy => train_probe(&backend.toy()?, &spec)?,
                BackendKind::Dump => train_probe_from_dumps(backend.dumps()?, &spec)?,
            };
            fs::create_dir_all(&out)?;
            write_json(&out.join("directions.json"), &trained.directions)?;
            write_json(&out.join("sweep.json"), &trained.sweep)?;
            trained.vectors.save(&out.join("vectors.json"))?;
            println!("{}: best layer {} window {:?}", spec.name, trained.vectors.best_layer, trained.vectors.window);
        }
        ProbeCommand::Sweep { concept, directions, eval, backend, out } => {
            let spec = ConceptSpec::load(&concept)?;
            let directions: TrainedDirections<f64> = serde_json::from_slice(&fs::read(&directions)?)?;
            let (sweep, vectors) = match &eval {
                Some(dir) => sweep_probe_from_dumps(dir, &spec, &directions)?,
                None => sweep_probe(&backend.toy()?, &spec, &directions)?,
            };
            fs::create_dir_all(&out)?;
            write_json(&out.join("sweep.json"), &sweep)?;
            vectors.save(&out.join("vectors.json"))?;
            println!("{}: best layer {} window {:?}", spec.name, vectors.best_layer, vectors.window);
        }
    }
    Ok(())
}

fn measure(args: MeasureArgs) -> anyhow::Result<GridOutcome> {
    if !args.vectors.is_empty() && args.vectors.len() != args.concepts.len() {
        return Err(Error::InvalidConfig("--vectors needs one file per concept".into()).into());
    }
    let direction = match args.direction {
        DirectionArg::Train => DirectionSource::Train,
        DirectionArg::ToyReadout => DirectionSource::ToyReadout,
        DirectionArg::Random => DirectionSource::Random,
    };
    let concepts = args
        .concepts
        .iter()
        .enumerate()
        .map(|(i, spec)| ConceptEntry { spec: spec.clone(), vectors: args.vectors.get(i).cloned(), direction })
        .collect();
    let cfg = RunConfig {
        backend: args.backend.config()?,
        concepts,
        alphas: args.alphas,
        conversations: args.conversations,
        bootstrap_replicates: args.replicates,
        seed: args.seed,
        decode: DecodeConfig::default(),
        output_dir: args.out,
        system_prompt: DEFAULT_ASSISTANT_SYSTEM_PROMPT.to_string(),
        random_controls: args.random_controls,
    };
    Ok(run_config(&cfg)?)
}

fn emit(args: &AnalyzeArgs, table: Table, json: serde_json::Value) -> anyhow::Result<()> {
    let text = match args.format {
        Format::Csv => table.to_csv_string()?,
        Format::Json => serde_json::to_string_pretty(&json)? + "\n",
    };
    match &args.out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let (b, seed) = (args.replicates, args.seed);
    if let Analysis::Scaling = args.analysis {
        if args.sizes.len() != args.input.len() {
            return Err(Error::InvalidConfig("scaling needs one --sizes entry per --in".into()).into());
        }
        let runs = args
            .input
            .iter()
            .zip(&args.sizes)
            .map(|(p, &size)| {
                let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into());
                Ok(ScalingRun { label, size, observations: load_run_observations(p)? })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let s = scaling_summary(&runs, b, seed)?;
        return emit(&args, scaling_table(&s), serde_json::to_value(&s)?);
    }
    if args.input.len() != 1 {
        bail!("exactly one --in is expected for this analysis");
    }
    let obs = load_run_observations(&args.input[0])?;
    match args.analysis {
        Analysis::Drift => {
            let mut rows = Vec::new();
            for ch in [Channel::Probe, Channel::LogitReport, Channel::Greedy, Channel::Sampled] {
                rows.extend(drift_summary(&obs, ch)?);
            }
            emit(&args, drift_table(&rows), serde_json::to_value(&rows)?)
        }
        Analysis::Introspection => {
            let rows = introspection_family(&obs, b, seed)?;
            emit(&args, introspection_table(&rows), serde_json::to_value(&rows)?)
        }
        Analysis::Cross => {
            let rows = cross_steering_matrix(&obs, &alpha_grid(&obs), b, seed)?;
            emit(&args, cross_table(&rows), serde_json::to_value(&rows)?)
        }
        Analysis::Entropy => {
            let e = entropy_decomposition(&obs, &alpha_grid(&obs))?;
            emit(&args, entropy_table(&e), serde_json::to_value(&e)?)
        }
        Analysis::Scaling => unreachable!(),
    }
}

fn partial_or_ok(outcome: &GridOutcome) -> ExitCode {
    let done = outcome.cells.len();
    let total = outcome.manifest.cells.len();
    eprintln!("{done}/{total} cells complete ({} computed now)", outcome.computed);
    if outcome.is_partial() {
        eprintln!("run is partial; rerun the same command to resume");
        ExitCode::from(EXIT_PARTIAL)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Probe(cmd) => probe(cmd)?,
        Command::Measure(args) => return Ok(partial_or_ok(&measure(args)?)),
        Command::Grid { config } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            return Ok(partial_or_ok(&run_config(&cfg)?));
        }
        Command::Analyze(args) => analyze(args)?,
        Command::Report { input, out, replicates, seed } => {
            let r = write_report(&input, &out, replicates, seed)?;
            for n in &r.notes {
                eprintln!("note: {n}");
            }
        }
        Command::Synth(SynthCommand::Conversations { n, turns, seed, out }) => {
            let convs = synthetic_conversations(n, turns, seed, &default_topics())?;
            write_conversations(&convs, &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::InvalidConfig(_) | Error::Toml(_) | Error::UnknownConcept(_) | Error::DuplicateId(_)) => {
            EXIT_CONFIG
        }
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            // wrapped errors often repeat their source's text
            let mut msg = String::new();
            for c in e.chain() {
                let part = c.to_string();
                if !msg.contains(&part) {
                    msg = if msg.is_empty() { part } else { format!("{msg}: {part}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
