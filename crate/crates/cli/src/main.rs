//! `guidegraph`: turns a page manifest into a merged decision graph, stage
//! by stage or in one go, and scores graphs against a reference.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guidegraph::config::BackendKind;
use guidegraph::dot::to_dot;
use guidegraph::eval::{reports_to_json, reports_to_table, score, MatchPolicy, Matcher};
use guidegraph::manifest::ingest;
use guidegraph::oracle::Oracle;
use guidegraph::pipeline::{load_graph, write_file, Session};
use guidegraph::retrieval::EmbeddingStore;
use guidegraph::{Error, PipelineConfig, Result};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "guidegraph", version, about)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Settings layered over the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    header_pages: Option<usize>,
    #[arg(long, global = true)]
    chunk_budget: Option<usize>,
    #[arg(long, global = true)]
    candidate_count: Option<usize>,
    #[arg(long, global = true)]
    expansion_cap: Option<usize>,
    #[arg(long, global = true)]
    retry_limit: Option<usize>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// `live` or `scripted`.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Recorded oracle fixtures for the scripted backend.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Chat-completions base URL for the live backend.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    chat_model: Option<String>,
    #[arg(long, global = true)]
    embedding_model: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract the document profile from the leading pages.
    Profile(StageArgs),
    /// Classify pages and split the core runs into chunks.
    Chunk(StageArgs),
    /// Expand every chunk into its decision graph.
    Build {
        #[arg(short, long)]
        out: PathBuf,
        /// Keep chunk graphs that already exist.
        #[arg(long)]
        resume: bool,
    },
    /// Merge the chunk graphs into one graph.
    Aggregate {
        #[arg(short, long)]
        out: PathBuf,
    },
    /// All stages.
    Run {
        #[command(flatten)]
        stage: StageArgs,
        /// Skip stages whose outputs already exist.
        #[arg(long)]
        resume: bool,
    },
    /// Score predicted graphs against a reference graph.
    Eval {
        #[arg(short, long)]
        reference: PathBuf,
        /// Predicted graphs; each is reported under its file stem.
        #[arg(required = true)]
        predicted: Vec<PathBuf>,
        /// `exact`, `threshold` or `oracle`; defaults to the configured policy.
        #[arg(long)]
        policy: Option<String>,
        /// Similarity threshold for `--policy threshold`.
        #[arg(long)]
        theta: Option<f64>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a graph as DOT or canonical JSON.
    Export {
        graph: PathBuf,
        /// `dot` or `canonical`.
        #[arg(short, long, default_value = "dot")]
        format: String,
        /// Output file; stdout when absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Page manifest.
    #[arg(short, long)]
    manifest: PathBuf,
    /// Run directory.
    #[arg(short, long)]
    out: PathBuf,
}

fn load_config(o: &Overrides) -> Result<PipelineConfig> {
    let mut config = match &o.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let counts = [
        (&mut config.header_pages, o.header_pages),
        (&mut config.chunk_budget, o.chunk_budget),
        (&mut config.candidate_count, o.candidate_count),
        (&mut config.expansion_cap, o.expansion_cap),
        (&mut config.retry_limit, o.retry_limit),
        (&mut config.parallelism, o.parallelism),
    ];
    for (slot, value) in counts {
        if let Some(v) = value {
            *slot = v;
        }
    }
    if let Some(kind) = &o.backend {
        config.backend.kind = match kind.as_str() {
            "live" => BackendKind::Live,
            "scripted" => BackendKind::Scripted,
            other => return Err(Error::Usage(format!("unknown backend {other:?}, expected live or scripted"))),
        };
    }
    if let Some(dir) = &o.fixtures {
        config.backend.fixtures = Some(absolute(dir)?);
    }
    if o.endpoint.is_some() {
        config.backend.endpoint = o.endpoint.clone();
    }
    if o.chat_model.is_some() {
        config.backend.chat_model = o.chat_model.clone();
    }
    if o.embedding_model.is_some() {
        config.backend.embedding_model = o.embedding_model.clone();
    }
    config.validate()?;
    Ok(config)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

fn policy_from_args(configured: MatchPolicy, name: Option<&str>, theta: Option<f64>) -> Result<MatchPolicy> {
    let policy = match (name, theta) {
        (None, None) => configured,
        (None | Some("threshold"), Some(theta)) => MatchPolicy::EmbeddingThreshold { theta },
        (Some("threshold"), None) => return Err(Error::Usage("--policy threshold needs --theta".into())),
        (Some("exact"), None) => MatchPolicy::ExactNormalized,
        (Some("oracle"), None) => MatchPolicy::OracleVerified,
        (Some(other), None) => {
            return Err(Error::Usage(format!("unknown policy {other:?}, expected exact, threshold or oracle")))
        }
        (Some(_), Some(_)) => return Err(Error::Usage("--theta only applies to --policy threshold".into())),
    };
    policy.validate().map_err(Error::Usage)?;
    Ok(policy)
}

fn evaluate(
    config: &PipelineConfig,
    reference: &Path,
    predicted: &[PathBuf],
    policy: MatchPolicy,
    json: Option<&Path>,
) -> Result<()> {
    let reference = load_graph(reference)?;
    let services = match policy {
        MatchPolicy::ExactNormalized => None,
        _ => {
            let backend = config.backend.open()?;
            Some((
                EmbeddingStore::new(backend.clone()),
                Oracle::new(backend).with_retry_limit(config.retry_limit),
            ))
        }
    };
    let mut matcher = Matcher::new(policy, services.as_ref().map(|s| &s.0), services.as_ref().map(|s| &s.1));
    matcher.candidate_count = config.candidate_count;
    let mut reports = Vec::new();
    for path in predicted {
        let unit = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        reports.push(score(&unit, &load_graph(path)?, &reference, &matcher)?);
    }
    print!("{}", reports_to_table(&reports));
    if let Some(path) = json {
        write_file(path, &reports_to_json(policy, &reports))?;
    }
    Ok(())
}

fn export(graph: &Path, format: &str, output: Option<&Path>) -> Result<()> {
    let render = match format {
        "dot" => to_dot,
        "canonical" => |g: &guidegraph::DecisionGraph| g.to_canonical_json(),
        other => return Err(Error::Usage(format!("unknown export format {other:?}, expected dot or canonical"))),
    };
    let text = render(&load_graph(graph)?);
    match output {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let config = load_config(&cli.overrides)?;
    match cli.command {
        Command::Profile(args) => {
            let pages = ingest(&args.manifest)?;
            let profile = Session::open(config, &args.out)?.profile(&pages)?;
            info!("profile has {} metadata fields", profile.metadata.len());
        }
        Command::Chunk(args) => {
            let pages = ingest(&args.manifest)?;
            let chunks = Session::open(config, &args.out)?.chunk(&pages)?;
            info!("{} chunks", chunks.len());
        }
        Command::Build { out, resume } => {
            let graphs = Session::open(config, &out)?.build(resume)?;
            info!("{} chunk graphs", graphs.len());
        }
        Command::Aggregate { out } => {
            let merged = Session::open(config, &out)?.aggregate()?;
            info!("merged graph has {} nodes", merged.graph.node_count());
        }
        Command::Run { stage, resume } => {
            let pages = ingest(&stage.manifest)?;
            let merged = Session::open(config, &stage.out)?.run(&pages, resume)?;
            println!(
                "{}: {} nodes, {} edges",
                stage.out.join("merged.json").display(),
                merged.graph.node_count(),
                merged.graph.edge_count()
            );
        }
        Command::Eval {
            reference,
            predicted,
            policy,
            theta,
            json,
        } => {
            let policy = policy_from_args(config.match_policy, policy.as_deref(), theta)?;
            evaluate(&config, &reference, &predicted, policy, json.as_deref())?;
        }
        Command::Export { graph, format, output } => export(&graph, &format, output.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
