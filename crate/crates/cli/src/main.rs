use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use klnx::corpus::{load_corpus, pair_counts, sample_test_pairs, Corpus, PairKey};
use klnx::detector::{load_predictions, DetectorAdapter, RemoteDetector, StubDetector};
use klnx::experiment::{load_experiment, report, revalidate, run_matrix, write_report, ExperimentConfig, PairSpec};
use klnx::kln::{sample_neighborhood, KlnSize};
use klnx::llm::{ChatBackend, LlmConfig, MockBackend, MockScript, OpenAiBackend, TemperatureMode, DEFAULT_CREDENTIAL_ENV};
use klnx::prompt::{build_prompt, render, PromptTemplate};
use klnx::review::SessionStore;
use klnx::validate::{CellKey, MatchMode, DEFAULT_BUCKET_WIDTH};
use klnx_review_server::AppState;

/// Explain black-box clone detector predictions with knowledge-based local
/// neighborhoods and an LLM.
#[derive(Debug, Parser)]
#[command(name = "klnx", version)]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus inspection.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Test-pair selection.
    #[command(subcommand)]
    Pairs(PairsCmd),
    /// Neighborhood sampling.
    #[command(subcommand)]
    Kln(KlnCmd),
    /// Prompt construction.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Run the experiment matrix, resuming from records already on disk.
    Run(RunArgs),
    /// Re-validate every stored record of an experiment.
    Validate(ValidateArgs),
    /// Accuracy table and code-line location histogram of an experiment.
    Report(ReportArgs),
    /// Manual review.
    #[command(subcommand)]
    Review(ReviewCmd),
}

#[derive(Debug, Subcommand)]
enum CorpusCmd {
    /// Snippet, question, and pair counts.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
enum PairsCmd {
    /// Draw clone pairs from distinct questions, then non-clone pairs.
    Sample {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        clone: usize,
        #[arg(long, default_value_t = 5)]
        nonclone: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum KlnCmd {
    /// Print the neighborhood of one target pair as JSON.
    Sample(TargetArgs),
}

#[derive(Debug, Subcommand)]
enum PromptCmd {
    /// Print the rendered prompt for one target pair.
    Build {
        #[command(flatten)]
        target: TargetArgs,
        /// Prompt template (TOML); the built-in one when absent.
        #[arg(long)]
        template: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ReviewCmd {
    /// Serve the review HTTP API.
    Serve {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory holding session snapshots and event logs.
        #[arg(long)]
        store: PathBuf,
        /// Relative experiment directories in create requests resolve here.
        #[arg(long, default_value = ".")]
        experiments_root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

/// Exactly one detector source.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct DetectorSource {
    /// CSV/TSV/JSON file of `pair_key,label,confidence` predictions.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Detector endpoint answering `POST {code_a, code_b}`.
    #[arg(long)]
    detector_url: Option<String>,
    /// Stub detector that echoes the ground truth.
    #[arg(long)]
    stub: bool,
}

#[derive(Debug, Args)]
#[group(skip)]
struct DetectorArgs {
    #[command(flatten)]
    source: DetectorSource,
    /// Pair key the stub gets wrong (repeatable).
    #[arg(long, requires = "stub")]
    stub_flip: Vec<PairKey>,
    /// Seconds before a detector request times out.
    #[arg(long, default_value_t = 30)]
    detector_timeout: u64,
}

impl DetectorArgs {
    fn adapter(&self) -> Result<DetectorAdapter> {
        if let Some(path) = &self.source.predictions {
            return Ok(DetectorAdapter::FileBacked(load_predictions(path)?));
        }
        if let Some(url) = &self.source.detector_url {
            let remote = RemoteDetector::new(url.clone(), Duration::from_secs(self.detector_timeout), 4)?;
            return Ok(DetectorAdapter::Remote(remote));
        }
        Ok(DetectorAdapter::Stub(StubDetector::echo().with_flips(self.stub_flip.iter().cloned())))
    }

    fn describe(&self) -> String {
        match (&self.source.predictions, &self.source.detector_url) {
            (Some(p), _) => format!("predictions:{}", p.display()),
            (_, Some(u)) => format!("remote:{u}"),
            _ => "stub".into(),
        }
    }
}

#[derive(Debug, Args)]
struct TargetArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Target pair as `<snippet id>|<snippet id>`.
    #[arg(long)]
    pair: PairKey,
    #[arg(long, default_value = "4")]
    size: KlnSize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
    /// `<clone>,<non-clone>` counts to sample, or a file of pair keys.
    #[arg(long, default_value = "5,5")]
    pairs: String,
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    sizes: Vec<KlnSize>,
    #[arg(long, value_delimiter = ',', default_value = "default,zero")]
    temps: Vec<TemperatureMode>,
    #[arg(long, default_value_t = 5)]
    runs: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Experiment directory name under `--out`.
    #[arg(long, default_value = "experiment")]
    name: String,
    /// Answer from a mock script (JSON) instead of a live endpoint.
    #[arg(long)]
    mock_llm: Option<PathBuf>,
    #[arg(long, default_value = "gpt-4")]
    model: String,
    #[arg(long, default_value = klnx::llm::DEFAULT_ENDPOINT)]
    endpoint: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = DEFAULT_CREDENTIAL_ENV)]
    credential_env: String,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long)]
    template: Option<PathBuf>,
    /// Compare cited lines after trimming only.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding the experiment's `manifest.json`.
    #[arg(long)]
    experiment: PathBuf,
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    experiment: PathBuf,
    /// Histogram cell as `<size>-<mode>`, e.g. `4-zero`; all cells when absent.
    #[arg(long, value_parser = parse_cell)]
    cell: Option<CellKey>,
    #[arg(long, default_value_t = DEFAULT_BUCKET_WIDTH)]
    bucket_width: f64,
    /// Where report files go; the experiment directory when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_cell(s: &str) -> Result<CellKey, String> {
    let (size, mode) = s.split_once('-').ok_or_else(|| format!("expected <size>-<mode>, got `{s}`"))?;
    Ok(CellKey {
        size: size.parse()?,
        temperature_mode: mode.parse()?,
    })
}

fn parse_pairs(value: &str) -> Result<PairSpec> {
    if let Some((c, n)) = value.split_once(',') {
        if let (Ok(n_clone), Ok(n_nonclone)) = (c.trim().parse(), n.trim().parse()) {
            return Ok(PairSpec::Sample { n_clone, n_nonclone });
        }
    }
    let text = std::fs::read_to_string(value)
        .with_context(|| format!("--pairs `{value}` is neither `<clone>,<non-clone>` nor a readable file"))?;
    let keys = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse::<PairKey>())
        .collect::<Result<Vec<_>, _>>()?;
    if keys.is_empty() {
        bail!("{value} lists no pairs");
    }
    Ok(PairSpec::Explicit(keys))
}

fn corpus(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn match_mode(strict: bool) -> MatchMode {
    if strict {
        MatchMode::Strict
    } else {
        MatchMode::Normalized
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing_subscriber::filter::LevelFilter::WARN,
        1 => tracing_subscriber::filter::LevelFilter::INFO,
        _ => tracing_subscriber::filter::LevelFilter::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Corpus(CorpusCmd::Stats { corpus: path, json }) => corpus_stats(&corpus(&path)?, json),
        Command::Pairs(PairsCmd::Sample {
            corpus: path,
            clone,
            nonclone,
            seed,
        }) => {
            for pair in sample_test_pairs(&corpus(&path)?, clone, nonclone, seed)? {
                println!("{}\t{}", pair.key(), pair.ground_truth());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Kln(KlnCmd::Sample(t)) => {
            let corpus = corpus(&t.corpus)?;
            let detector = t.detector.adapter()?;
            let target = corpus.pair(&t.pair)?;
            let set = sample_neighborhood(&corpus, &target, t.size, t.seed, &detector)?;
            println!("{}", serde_json::to_string_pretty(&set)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Prompt(PromptCmd::Build { target: t, template }) => {
            let corpus = corpus(&t.corpus)?;
            let detector = t.detector.adapter()?;
            let template = load_template(template.as_deref())?;
            let target = corpus.pair(&t.pair)?;
            let set = sample_neighborhood(&corpus, &target, t.size, t.seed, &detector)?;
            let prediction = detector.predict(&target, &corpus)?;
            print!("{}", render(&build_prompt(&set, &prediction, &template, &corpus)?));
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(args) => run(args),
        Command::Validate(args) => {
            let corpus = corpus(&args.corpus)?;
            let results = revalidate(&args.experiment, &corpus, match_mode(args.strict))?;
            let verdicts = results.iter().filter(|v| v.verdict_correct).count();
            let lines = results.iter().filter(|v| v.all_lines_correct).count();
            println!("records: {}", results.len());
            println!("verdict correct: {verdicts}");
            println!("all cited lines found: {lines}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Report(args) => {
            let stored = load_experiment(&args.experiment)?;
            let bundle = report(&stored.validations, args.cell, args.bucket_width)?;
            let out = args.out.unwrap_or_else(|| args.experiment.clone());
            std::fs::create_dir_all(&out)?;
            write_report(&bundle, &out)?;
            print!("{}", bundle.accuracy.to_markdown());
            println!("\nlocations: {} matched lines, written to {}", bundle.locations.total(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Review(ReviewCmd::Serve {
            corpus: path,
            store,
            experiments_root,
            addr,
        }) => {
            let state = AppState {
                store: SessionStore::open(&store)?,
                corpus: corpus(&path)?,
                experiments_root,
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(klnx_review_server::serve(addr, Arc::new(state)))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_template(path: Option<&Path>) -> Result<PromptTemplate> {
    Ok(match path {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::default(),
    })
}

fn corpus_stats(corpus: &Corpus, json: bool) -> Result<ExitCode> {
    let (clone, nonclone) = pair_counts(corpus);
    let sizes: BTreeMap<&str, usize> = corpus.questions().iter().map(|(q, s)| (q.as_str(), s.len())).collect();
    if json {
        let value = serde_json::json!({
            "snippets": corpus.total_snippets(),
            "questions": sizes,
            "clone_pairs": clone,
            "non_clone_pairs": nonclone,
            "total_pairs": clone + nonclone,
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        println!("snippets: {}", corpus.total_snippets());
        println!("questions: {}", sizes.len());
        println!("clone pairs: {clone}");
        println!("non-clone pairs: {nonclone}");
        println!("total pairs: {}", clone + nonclone);
        for (q, s) in corpus.questions() {
            println!("  {q}: {}", s.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let corpus = corpus(&args.corpus)?;
    let detector = args.detector.adapter()?;
    let template = load_template(args.template.as_deref())?;
    let llm = LlmConfig {
        model_name: args.model.clone(),
        endpoint: args.endpoint.clone(),
        credential_env: args.credential_env.clone(),
        max_retries: args.max_retries,
        ..LlmConfig::default()
    };
    let config = ExperimentConfig {
        name: args.name.clone(),
        detector: args.detector.describe(),
        pairs: parse_pairs(&args.pairs)?,
        sizes: args.sizes.clone(),
        temperature_modes: args.temps.clone(),
        runs_per_cell: args.runs,
        llm: llm.clone(),
        concurrency: args.concurrency,
        match_mode: match_mode(args.strict),
        ..ExperimentConfig::paper_matrix(&args.corpus, &args.out, args.seed)
    };
    let backend: Box<dyn ChatBackend> = match &args.mock_llm {
        Some(script) => Box::new(MockBackend::new(MockScript::load(script)?)),
        None => Box::new(OpenAiBackend::from_env(&llm)?),
    };
    let set = run_matrix(&config, &corpus, &detector, backend.as_ref(), &template)?;
    println!("experiment: {}", config.experiment_dir().display());
    println!("records: {}", set.records.len());
    println!("resumed: {}", set.resumed);
    println!("llm requests: {}", set.llm_requests);
    println!("failures: {}", set.failures.len());
    for f in &set.failures {
        eprintln!("  {}: {}", f.record_id, f.error);
    }
    Ok(if set.complete { ExitCode::SUCCESS } else { ExitCode::from(3) })
}
