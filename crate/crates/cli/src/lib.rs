//! The `flawfic` command line.
//!
//! Exit status is 0 on success, 1 when the work itself fails and 2 when the
//! invocation is malformed.

pub mod server;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use flawfic_core::config::load_file;
use flawfic_core::dataset::{
    apply_resolutions, build_dataset, dataset_stats, export_annotation_tasks, export_jsonl, import_jsonl, ingest_votes,
    read_tasks, resolve_annotations, write_tasks, BuildOptions, Resolution, Resolver,
};
use flawfic_core::eval::{
    bundled_exemplars, run_eval, write_report_csv, ContradictionScorer, Detector, DetectorConfig, HttpScorer, Method,
    SubprocessScorer, VerifierConfig, DEFAULT_ENTAILMENT_THRESHOLD,
};
use flawfic_core::gateway::{FixtureStore, Gateway, GatewayConfig, GatewaySettings, ProviderConfig};
use flawfic_core::model::{load_stories, CandidateStatus, NegativeStrategy};
use flawfic_core::pipeline::{read_candidates, write_jsonl, write_run_dir, Pipeline, PipelineConfig, DEFAULT_MODEL};
use flawfic_core::prompt::TemplateSet;
use flawfic_core::study::{run_study, write_study, GenerationTask, StudyConfig};

/// `println!` that stops quietly when the reader has gone away (`| head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout().lock(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

/// A malformed invocation; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "flawfic", version, about = "Continuity-error injection, benchmark building and detector evaluation")]
pub struct Cli {
    /// Configuration file (falls back to $FLAWFIC_CONFIG, then ./flawfic.toml).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Answer model calls from a fixture store instead of the network.
    #[arg(long, global = true, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Save every live model exchange into a fixture store.
    #[arg(long, global = true, num_args = 0..=1)]
    record: Option<Option<PathBuf>>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory of prompt template overrides.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the error-injection pipeline over a story corpus.
    Make(MakeArgs),
    /// Pair accepted candidates with negatives into a balanced dataset.
    BuildDataset(BuildArgs),
    /// Score a detector or baseline on a dataset.
    Eval(EvalArgs),
    /// Compare detection rates on stories and on generated derivatives.
    Genstudy(StudyArgs),
    /// Word-count statistics of a dataset.
    Stats(StatsArgs),
    /// Export review tasks or ingest votes.
    #[command(subcommand)]
    Annotate(AnnotateCommand),
    /// Serve the review API and page.
    AnnotateServe(ServeArgs),
}

#[derive(Args, Debug)]
struct MakeArgs {
    #[arg(long)]
    stories: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Original,
    Counterfactual,
    Resolved,
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// candidates.jsonl from `make`.
    #[arg(long)]
    candidates: PathBuf,
    /// Source stories; required by the `original` strategy.
    #[arg(long)]
    stories: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "original")]
    strategy: StrategyArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "flawfic")]
    name: String,
    /// Treat filter-accepted candidates as human-accepted.
    #[arg(long, conflicts_with_all = ["tasks", "votes"])]
    accept_pending: bool,
    #[arg(long, requires = "votes")]
    tasks: Option<PathBuf>,
    #[arg(long, requires = "tasks")]
    votes: Option<PathBuf>,
    /// Model that writes resolved negatives.
    #[arg(long, default_value = DEFAULT_MODEL)]
    resolver_model: String,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineArg {
    NoError,
    Random,
    Entailment,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Detector config (TOML or JSON).
    #[arg(long, conflicts_with = "baseline")]
    detector: Option<PathBuf>,
    /// Verifier config; enables the generate-then-verify loop.
    #[arg(long, requires = "detector")]
    verifier: Option<PathBuf>,
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    /// Per-example record log; an existing log resumes the run.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Report CSV path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Contradiction threshold of the entailment baseline.
    #[arg(long, default_value_t = DEFAULT_ENTAILMENT_THRESHOLD)]
    threshold: f64,
    /// NLI service URL for the entailment baseline.
    #[arg(long, conflicts_with = "scorer_cmd")]
    scorer_url: Option<String>,
    /// NLI command (JSON lines on stdin/stdout) for the entailment baseline.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    scorer_cmd: Option<Vec<String>>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Summarize,
    Adapt,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    stories: PathBuf,
    /// Generator config: `model_name` and optional `word_budget`.
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum AnnotateCommand {
    /// Write one review task per filter-accepted candidate.
    Export {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold a vote file into tasks and report resolutions.
    Ingest {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        votes: PathBuf,
        /// Write the merged tasks here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    tasks: PathBuf,
    /// Append-only vote log; replayed on start.
    #[arg(long)]
    votes: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Require `?token=` on API calls.
    #[arg(long)]
    token: Option<String>,
    /// Serve the built review UI from here instead of the bundled page.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

/// `flawfic.toml`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub gateway: GatewaySettings,
    #[serde(default)]
    pub providers: Vec<ProviderConfig>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Template override directory, relative to the config file.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorConfig {
    model_name: String,
    #[serde(default)]
    word_budget: Option<usize>,
}

/// Explicit path, then `$FLAWFIC_CONFIG`, then `./flawfic.toml` if present.
pub fn discover_config(flag: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = flag {
        return Some(p.to_path_buf());
    }
    if let Some(p) = std::env::var_os("FLAWFIC_CONFIG").filter(|p| !p.is_empty()) {
        return Some(PathBuf::from(p));
    }
    let local = PathBuf::from("flawfic.toml");
    local.exists().then_some(local)
}

struct RunContext {
    config: FileConfig,
    config_dir: PathBuf,
    replay: Option<PathBuf>,
    record: Option<Option<PathBuf>>,
    seed: u64,
    templates_flag: Option<PathBuf>,
}

impl RunContext {
    fn templates(&self) -> Result<TemplateSet> {
        let dir =
            self.templates_flag.clone().or_else(|| self.config.templates.as_ref().map(|t| self.config_dir.join(t)));
        match dir {
            Some(d) => TemplateSet::load_dir(&d).with_context(|| format!("loading templates from {}", d.display())),
            None => Ok(TemplateSet::bundled()),
        }
    }

    fn gateway(&self, default_record: Option<PathBuf>) -> Result<Gateway> {
        let in_flight = self.config.gateway.max_in_flight;
        if let Some(dir) = &self.replay {
            if !dir.is_dir() {
                bail!("fixture store {} does not exist", dir.display());
            }
            return Ok(Gateway::replay(FixtureStore::new(dir)).with_max_in_flight(in_flight));
        }
        let config = GatewayConfig { gateway: self.config.gateway, providers: self.config.providers.clone() };
        if config.providers.is_empty() {
            bail!("no providers configured; pass --config or --replay");
        }
        let mut gateway = config.build()?;
        match &self.record {
            None => {}
            Some(dir) => {
                let dir = match (dir.clone(), default_record) {
                    (Some(d), _) | (None, Some(d)) => d,
                    (None, None) => return usage("--record needs a directory for this command"),
                };
                gateway = gateway.with_recorder(FixtureStore::create(dir)?);
            }
        }
        Ok(gateway)
    }

    /// Creation time for manifests: `SOURCE_DATE_EPOCH`, else 0 under replay.
    fn created(&self) -> u64 {
        if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
            return t;
        }
        if self.replay.is_some() {
            return 0;
        }
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    }
}

/// Parse `args` (including the program name), run, and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let config_path = discover_config(cli.config.as_deref());
    let config: FileConfig = match &config_path {
        Some(p) => load_file(p).map_err(anyhow::Error::msg)?,
        None => FileConfig::default(),
    };
    config.pipeline.validate()?;
    let ctx = RunContext {
        config,
        config_dir: config_path.as_deref().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default(),
        replay: cli.replay,
        record: cli.record,
        seed: cli.seed.unwrap_or(0),
        templates_flag: cli.templates,
    };
    match cli.command {
        Command::Make(a) => make(&ctx, a),
        Command::BuildDataset(a) => build(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Genstudy(a) => genstudy(&ctx, a),
        Command::Stats(a) => stats(a),
        Command::Annotate(a) => annotate(a),
        Command::AnnotateServe(a) => serve(a),
    }
}

fn make(ctx: &RunContext, a: MakeArgs) -> Result<()> {
    let stories = load_stories(&a.stories)?;
    let templates = ctx.templates()?;
    let gateway = ctx.gateway(Some(a.out.join("fixtures")))?;
    let pipeline = Pipeline::new(&gateway, &templates, &ctx.config.pipeline)?;
    let outcomes = pipeline.run_batch(&stories);
    write_run_dir(&a.out, &outcomes, &ctx.config.pipeline, &templates)?;
    let candidates: usize = outcomes.iter().map(|o| o.candidates.len()).sum();
    let pending: usize =
        outcomes.iter().flat_map(|o| &o.candidates).filter(|c| c.status == CandidateStatus::PendingAnnotation).count();
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    out!(
        "{} stories: {candidates} candidates, {pending} passed the filter, {failed} stories failed; wrote {}",
        stories.len(),
        a.out.display()
    );
    Ok(())
}

fn build(ctx: &RunContext, a: BuildArgs) -> Result<()> {
    let mut candidates = read_candidates(&a.candidates)?;
    if let (Some(tasks), Some(votes)) = (&a.tasks, &a.votes) {
        let mut tasks = read_tasks(tasks)?;
        ingest_votes(&mut tasks, votes)?;
        apply_resolutions(&mut candidates, &tasks)?;
    }
    let accepted: Vec<_> = candidates
        .into_iter()
        .filter(|c| {
            c.status == CandidateStatus::Accepted
                || (a.accept_pending && c.status == CandidateStatus::PendingAnnotation)
        })
        .collect();
    if accepted.is_empty() {
        bail!("no accepted candidates (use --accept-pending or --tasks/--votes)");
    }
    let strategy = match a.strategy {
        StrategyArg::Original => NegativeStrategy::Original,
        StrategyArg::Counterfactual => NegativeStrategy::Counterfactual,
        StrategyArg::Resolved => NegativeStrategy::Resolved,
    };
    let originals = match (&a.stories, a.strategy) {
        (Some(p), _) => load_stories(p)?,
        (None, StrategyArg::Original) => return usage("--stories is required with --strategy original"),
        (None, _) => Vec::new(),
    };
    let templates = ctx.templates()?;
    let gateway = match a.strategy {
        StrategyArg::Resolved => Some(ctx.gateway(None)?),
        _ => None,
    };
    let resolver =
        gateway.as_ref().map(|g| Resolver { gateway: g, templates: &templates, model: a.resolver_model.clone() });
    let options = BuildOptions { name: a.name, strategy, seed: ctx.seed, created: ctx.created(), resolver };
    let out = build_dataset(&accepted, &originals, options)?;
    export_jsonl(&out.manifest, &a.out)?;
    for f in &out.failures {
        log::warn!("dropped {}: {}", f.candidate_id, f.error);
    }
    out!(
        "wrote {} ({} positives, {} negatives, {} dropped)",
        a.out.display(),
        out.manifest.positives,
        out.manifest.negatives,
        out.failures.len()
    );
    Ok(())
}

fn scorer(a: &EvalArgs) -> Result<Box<dyn ContradictionScorer>> {
    match (&a.scorer_url, &a.scorer_cmd) {
        (Some(url), _) => Ok(Box::new(HttpScorer::new(url, Duration::from_secs(120))?)),
        (None, Some(cmd)) if !cmd.is_empty() => Ok(Box::new(SubprocessScorer::spawn(&cmd[0], &cmd[1..])?)),
        _ => usage("the entailment baseline needs --scorer-url or --scorer-cmd"),
    }
}

fn eval(ctx: &RunContext, a: EvalArgs) -> Result<()> {
    let manifest = import_jsonl(&a.dataset)?;
    let templates = ctx.templates()?;
    let exemplars = bundled_exemplars();
    let mut detector_config = None;
    let mut gateway = None;
    let mut entailment = None;
    match (&a.detector, a.baseline) {
        (Some(path), None) => {
            let mut c = DetectorConfig::load(path)?;
            if let Some(v) = &a.verifier {
                c.verifier = Some(load_file::<VerifierConfig>(v).map_err(anyhow::Error::msg)?);
            }
            c.validate()?;
            detector_config = Some(c);
            gateway = Some(ctx.gateway(None)?);
        }
        (None, Some(BaselineArg::Entailment)) => entailment = Some(scorer(&a)?),
        (None, Some(_)) => {}
        _ => return usage("pass exactly one of --detector or --baseline"),
    }
    let method = match (a.baseline, &detector_config, &gateway, &entailment) {
        (Some(BaselineArg::NoError), ..) => Method::NoError,
        (Some(BaselineArg::Random), ..) => Method::Random { seed: ctx.seed },
        (Some(BaselineArg::Entailment), _, _, Some(s)) => {
            Method::Entailment { scorer: s.as_ref(), threshold: a.threshold }
        }
        (None, Some(c), Some(g), _) => Method::Detector(Detector::new(c, g, &templates, &exemplars)?),
        _ => unreachable!("validated above"),
    };
    let report = run_eval(&manifest, &method, a.records.as_deref())?;
    if let Some(path) = &a.report {
        write_report_csv(path, std::slice::from_ref(&report.row))?;
    }
    if a.json {
        out!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        let r = &report.row;
        out!(
            "{} {}: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} ceeval_pos {:.4} ceeval_full {:.4} n {}",
            r.model,
            r.strategy,
            r.accuracy,
            r.precision,
            r.recall,
            r.f1,
            r.ceeval_pos,
            r.ceeval_full,
            r.n
        );
    }
    if !report.failures.is_empty() {
        bail!("{} examples failed; rerun with the same --records to retry them", report.failures.len());
    }
    Ok(())
}

fn genstudy(ctx: &RunContext, a: StudyArgs) -> Result<()> {
    let stories = load_stories(&a.stories)?;
    let generator: GeneratorConfig = load_file(&a.generator).map_err(anyhow::Error::msg)?;
    let detector = DetectorConfig::load(&a.detector)?;
    let task = match a.task {
        TaskArg::Summarize => GenerationTask::Summarize,
        TaskArg::Adapt => GenerationTask::AdaptModern,
    };
    let config = StudyConfig {
        task,
        generator_model: generator.model_name,
        word_budget: generator.word_budget.or(Some(flawfic_core::study::DEFAULT_WORD_BUDGET)),
        detector,
    };
    let templates = ctx.templates()?;
    let gateway = ctx.gateway(Some(a.out.join("fixtures")))?;
    let report = run_study(&stories, &config, &gateway, &templates, &bundled_exemplars())?;
    write_study(&a.out, &report)?;
    write_jsonl(
        &a.out.join("generated.jsonl"),
        report.generated.iter().map(|(id, text)| serde_json::json!({ "story_id": id, "text": text })),
    )?;
    if a.json {
        out!("{}", serde_json::to_string_pretty(&report.rates)?);
    } else {
        let fmt = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let r = &report.rates;
        out!(
            "{}: original {} generated {} ratio {} over {} pairs",
            r.task,
            fmt(r.original_rate),
            fmt(r.generated_rate),
            fmt(r.ratio),
            r.n_pairs
        );
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let manifest = import_jsonl(&a.dataset)?;
    let s = dataset_stats(&manifest)?;
    if a.json {
        out!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        out!("count   {}", s.count);
        out!("mean    {:.2}", s.mean);
        out!("std     {:.2}", s.std);
        out!("min     {}", s.min);
        out!("25%     {:.2}", s.p25);
        out!("median  {:.2}", s.median);
        out!("75%     {:.2}", s.p75);
        out!("max     {}", s.max);
    }
    Ok(())
}

fn annotate(cmd: AnnotateCommand) -> Result<()> {
    match cmd {
        AnnotateCommand::Export { candidates, out } => {
            let pending: Vec<_> = read_candidates(&candidates)?
                .into_iter()
                .filter(|c| c.status == CandidateStatus::PendingAnnotation)
                .collect();
            let tasks = export_annotation_tasks(&pending, &out)?;
            out!("wrote {} tasks to {}", tasks.len(), out.display());
        }
        AnnotateCommand::Ingest { tasks, votes, out, json } => {
            let mut tasks_v = read_tasks(&tasks)?;
            let report = ingest_votes(&mut tasks_v, &votes)?;
            let mut counts = std::collections::BTreeMap::<&str, usize>::new();
            for t in &tasks_v {
                let key = match resolve_annotations(t)? {
                    Resolution::Accepted => "accepted",
                    Resolution::Rejected => "rejected",
                    Resolution::Pending => "pending",
                };
                *counts.entry(key).or_default() += 1;
            }
            if let Some(out) = out {
                write_tasks(&tasks_v, &out)?;
            }
            if json {
                out!(
                    "{}",
                    serde_json::json!({ "added": report.added, "repeated": report.repeated, "resolutions": counts })
                );
            } else {
                out!("{} votes added, {} repeats ignored; {counts:?}", report.added, report.repeated);
            }
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let session = server::Session::open(&a.tasks, &a.votes)?;
    let state = server::AppState::new(session, a.token, a.static_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener =
            tokio::net::TcpListener::bind(&a.bind).await.with_context(|| format!("cannot bind {}", a.bind))?;
        eprintln!("serving on http://{}", listener.local_addr()?);
        server::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
