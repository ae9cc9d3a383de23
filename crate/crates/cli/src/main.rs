//! Command-line front end: reconstruct a workspace, serve it, validate and
//! score submissions, drive the governed run loop, and inspect its traces.
//!
//! Exit codes: 0 success (or admissible), 1 domain failure, 2 usage error.
//! Failures print one `error: ...` line to stderr.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use tsgate_core::data_interface::{
    build_reconstruction, derive_task_file, load_workspace, parse_skeleton, write_reconstruction,
    FamilySelector, SchemaMap, SliceSpec, TaskFileOptions, TEST_FILE, TRAIN_FILE,
};
use tsgate_core::data_interface::synthetic::{store_sales_fixture, SyntheticSpec};
use tsgate_core::orchestration::{
    run_governed_loop, ConstructorMode, RoleSet, RunConfig, TraceStatistics,
};
use tsgate_core::protocol_engine::{read_events, replay, ProtocolError};
use tsgate_core::task_server::{serve, ServerConfig};
use tsgate_core::validation_gate::{validate_submission, Evaluator, SubmissionContext};

#[derive(Parser)]
#[command(name = "tsgate", version, about = "Governed time-series task harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rebuild a sealed local task workspace from raw or synthetic data
    Reconstruct(ReconstructArgs),
    /// Host a workspace over HTTP
    Serve(ServeArgs),
    /// Run the validity checks on a submission file
    Validate(ValidateArgs),
    /// Score a submission against the sealed truth
    Score(ScoreArgs),
    /// Drive the governed loop against a task service
    Run(RunArgs),
    /// Fold an event log back into the protocol state
    Replay(ReplayArgs),
    /// Render trace statistics and the figure index of a finished run
    Report(ReportArgs),
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Serve(args) => cmd_serve(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Score(args) => cmd_score(args),
        Command::Run(args) => cmd_run(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Report(args) => cmd_report(args),
    }
}

/// The run directory can come from the flag or the environment.
fn resolve_run_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("TSGATE_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("run"))
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ReconstructArgs {
    /// Directory holding the raw source files (train.csv and friends)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Generate a seeded store-sales-shaped fixture instead of reading raw files
    #[arg(long)]
    synthetic: bool,
    /// Stores to keep: a single id or an inclusive range like 1-5
    #[arg(long, default_value = "1-5")]
    stores: String,
    /// Family count for the synthetic fixture
    #[arg(long, default_value_t = 33)]
    families: u32,
    /// Last public training date
    #[arg(long, default_value = "2017-07-30")]
    cutoff: NaiveDate,
    /// Hidden window as start:end
    #[arg(long, default_value = "2017-07-31:2017-08-15")]
    hidden: String,
    /// Seed for the synthetic generator
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Workspace directory to write
    #[arg(long, default_value = "workspace")]
    out: PathBuf,
}

fn parse_store_range(text: &str) -> Result<Vec<u32>> {
    if let Some((lo, hi)) = text.split_once('-') {
        let lo: u32 = lo.trim().parse().context("store range start")?;
        let hi: u32 = hi.trim().parse().context("store range end")?;
        if lo > hi || lo == 0 {
            bail!("store range `{text}` is empty or starts at zero");
        }
        Ok((lo..=hi).collect())
    } else {
        Ok(vec![text.trim().parse().context("store id")?])
    }
}

fn parse_hidden_range(text: &str) -> Result<(NaiveDate, NaiveDate)> {
    let (start, end) = text
        .split_once(':')
        .ok_or_else(|| anyhow!("hidden window must look like start:end, got `{text}`"))?;
    let start: NaiveDate = start.parse().context("hidden window start")?;
    let end: NaiveDate = end.parse().context("hidden window end")?;
    if start > end {
        bail!("InconsistentDates: hidden window {start}:{end} is reversed");
    }
    Ok((start, end))
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<i32> {
    let stores = parse_store_range(&args.stores)?;
    let (hidden_start, hidden_end) = parse_hidden_range(&args.hidden)?;
    let schema = SchemaMap::default();

    let raw: BTreeMap<String, Vec<u8>> = if args.synthetic {
        let spec = SyntheticSpec {
            seed: args.seed,
            stores: *stores.iter().max().expect("nonempty store list"),
            families: args.families,
            history_start: "2017-01-01".parse().expect("fixed date"),
            hidden_end,
        };
        store_sales_fixture(&spec)
    } else {
        let data_dir = args
            .data_dir
            .ok_or_else(|| anyhow!("either --data-dir or --synthetic is required"))?;
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(&data_dir)
            .with_context(|| format!("reading {}", data_dir.display()))?
        {
            let entry = entry?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "csv") {
                let name = entry.file_name().to_string_lossy().into_owned();
                files.insert(name, std::fs::read(&path)?);
            }
        }
        if !files.contains_key(TRAIN_FILE) {
            bail!("no {TRAIN_FILE} in {}", data_dir.display());
        }
        files
    };

    let slice = SliceSpec {
        store_ids: stores.into_iter().collect(),
        families: FamilySelector::All,
        public_train_end: args.cutoff,
        hidden_start,
        hidden_end,
        auxiliary_truncation: BTreeMap::new(),
        auxiliary_full_span: BTreeSet::new(),
    };
    let recon = build_reconstruction(&raw, &slice, &schema)?;
    let entity_count = recon.hidden_truth.entities().len() as u64;
    let history_start = recon
        .public_train
        .rows
        .iter()
        .map(|r| r.date)
        .min()
        .unwrap_or(args.cutoff);
    let task = derive_task_file(
        history_start,
        &slice,
        entity_count,
        &schema.timezone,
        &TaskFileOptions::default(),
    )?;
    let manifest_path = write_reconstruction(&recon, &task, &schema, &args.out)?;
    println!("manifest: {}", manifest_path.display());
    println!("public files: {}", recon.public_files.len());
    println!("entities: {entity_count}");
    println!("hidden rows: {}", recon.hidden_truth.rows.len());
    Ok(0)
}

// ---------------------------------------------------------------------------
// serve
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ServeArgs {
    /// Workspace directory produced by `reconstruct`
    #[arg(long, default_value = "workspace")]
    workspace: PathBuf,
    /// Port to bind; 0 picks an ephemeral one
    #[arg(long, default_value_t = 0)]
    port: u16,
    /// Submission log path (defaults to submissions.jsonl in the workspace)
    #[arg(long)]
    log: Option<PathBuf>,
}

fn cmd_serve(args: ServeArgs) -> Result<i32> {
    let ws = load_workspace(&args.workspace, &SchemaMap::default())?;
    let log = args
        .log
        .unwrap_or_else(|| args.workspace.join("submissions.jsonl"));
    let config = ServerConfig::from_workspace(&ws, log)?;
    let server = serve(config, args.port)?;
    println!("serving {}", server.base_url());
    use std::io::Write;
    std::io::stdout().flush().ok();
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

// ---------------------------------------------------------------------------
// validate / score
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value = "workspace")]
    workspace: PathBuf,
    /// Submission file to check
    #[arg(long)]
    submission: PathBuf,
}

fn cmd_validate(args: ValidateArgs) -> Result<i32> {
    let schema = SchemaMap::default();
    let ws = load_workspace(&args.workspace, &schema)?;
    let skeleton = parse_skeleton(
        ws.public_files
            .get(TEST_FILE)
            .ok_or_else(|| anyhow!("workspace has no {TEST_FILE}"))?,
        &schema,
    )?;
    let ctx = SubmissionContext::from_parts(&skeleton, &ws.public_train);
    let payload = std::fs::read(&args.submission)
        .with_context(|| format!("reading {}", args.submission.display()))?;
    let report = validate_submission(&payload, &ws.task, Some(&ctx))?;
    print!("{}", report.render());
    Ok(if report.all_passed() { 0 } else { 1 })
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, default_value = "workspace")]
    workspace: PathBuf,
    /// Submission file to score
    #[arg(long)]
    submission: PathBuf,
}

fn cmd_score(args: ScoreArgs) -> Result<i32> {
    let schema = SchemaMap::default();
    let ws = load_workspace(&args.workspace, &schema)?;
    let payload = std::fs::read(&args.submission)
        .with_context(|| format!("reading {}", args.submission.display()))?;
    let evaluator =
        Evaluator::new(ws.task.clone(), &ws.hidden_truth)?.with_training_reference(&ws.public_train);
    let outcome = evaluator.evaluate(&payload)?;
    if !outcome.admissible {
        print!("{}", outcome.validity.render());
        bail!("submission is not admissible; nothing to score");
    }
    let scores = outcome
        .scores
        .ok_or_else(|| anyhow!("admissible submission carried no scores"))?;
    for (metric, value) in &scores.values {
        println!("{metric} {value:?}");
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "workspace")]
    workspace: PathBuf,
    /// Use an already-running service instead of hosting one internally
    #[arg(long)]
    endpoint: Option<String>,
    /// Run directory (or TSGATE_RUN_DIR)
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, default_value = "governed-run")]
    submitter: String,
    /// Smoothing weight for the exponential branch
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    /// Dispatch budget before the loop refuses to continue
    #[arg(long, default_value_t = 48)]
    budget: u32,
    /// Constructor script: standard or weekday-only
    #[arg(long, default_value = "standard")]
    constructor: String,
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let schema = SchemaMap::default();
    let ws = load_workspace(&args.workspace, &schema)?;
    let task = ws.task.clone();
    let mode = match args.constructor.as_str() {
        "standard" => ConstructorMode::Standard,
        "weekday-only" => ConstructorMode::WeekdayOnly,
        other => bail!("unknown constructor script `{other}`"),
    };
    let (endpoint, _server) = match args.endpoint {
        Some(url) => (url, None),
        None => {
            let log = args.workspace.join("submissions.jsonl");
            let config = ServerConfig::from_workspace(&ws, log)?;
            let server = serve(config, 0)?;
            (server.base_url(), Some(server))
        }
    };
    println!("endpoint: {endpoint}");

    let mut roles = RoleSet::with_constructor(mode);
    let mut config = RunConfig::new(resolve_run_dir(args.run_dir));
    config.submitter = args.submitter;
    config.ses_alpha = args.alpha;
    config.max_dispatches = args.budget;
    let outcome = run_governed_loop(&task, &endpoint, &mut roles, &config)?;

    println!(
        "final submission: id={} admissible={}",
        outcome.final_submission.id, outcome.final_submission.admissible
    );
    if let Some(scores) = &outcome.final_submission.scores {
        for (metric, value) in &scores.values {
            println!("score: {metric} {value:?}");
        }
    }
    println!(
        "stop: {}",
        outcome
            .state
            .last_signal
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".into())
    );
    if outcome.state.violations.is_empty() {
        println!("violations: none");
    } else {
        for violation in &outcome.state.violations {
            println!("violation: {violation}");
        }
    }
    println!(
        "trace: review_blocks={} critique_rounds={} figures={} tools={} files={} runtime={:.2}s",
        outcome.trace.review_blocks,
        outcome.trace.critique_rounds,
        outcome.trace.figures_produced,
        outcome.trace.unique_tools,
        outcome.trace.touched_files,
        outcome.trace.runtime_seconds,
    );
    println!("report: {}", outcome.report_path.display());
    Ok(if outcome.state.violations.is_empty() { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// replay / report
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ReplayArgs {
    /// Event log to fold
    #[arg(long)]
    events: PathBuf,
}

fn cmd_replay(args: ReplayArgs) -> Result<i32> {
    let events = read_events(&args.events).map_err(|e| match &e {
        ProtocolError::CorruptRecord { line, detail } => {
            anyhow!("CorruptRecord: line {line}: {detail}")
        }
        _ => anyhow!(e),
    })?;
    let state = replay(&events);
    println!("events: {}", state.total_events());
    println!("initialized: {}", state.initialized);
    println!(
        "dispatches open: {}",
        state.open_dispatches.values().sum::<u64>()
    );
    println!(
        "issues: open={} resolved={}",
        state.open_issues.len(),
        state.resolved_issues.len()
    );
    println!("blockers open: {}", state.open_blockers.len());
    println!("compactions: {}", state.compactions);
    println!("checkpoints: {}", state.checkpoints);
    println!("sync decisions: {}", state.sync_decisions);
    println!("stop_permission: {}", state.stop_permission);
    println!(
        "last signal: {}",
        state
            .last_signal
            .map(|s| s.to_string())
            .unwrap_or_else(|| "none".into())
    );
    if state.violations.is_empty() {
        println!("violations: none");
        Ok(0)
    } else {
        for violation in &state.violations {
            println!("violation: {violation}");
        }
        Ok(1)
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory (or TSGATE_RUN_DIR)
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

fn cmd_report(args: ReportArgs) -> Result<i32> {
    let run_dir = resolve_run_dir(args.run_dir);
    let stats_path = run_dir.join("trace_stats.json");
    let stats: TraceStatistics = serde_json::from_slice(
        &std::fs::read(&stats_path)
            .with_context(|| format!("reading {}", stats_path.display()))?,
    )?;
    println!("runtime_seconds   {:.2}", stats.runtime_seconds);
    println!("unique_tools      {}", stats.unique_tools);
    println!("touched_files     {}", stats.touched_files);
    println!("review_blocks     {}", stats.review_blocks);
    println!("critique_rounds   {}", stats.critique_rounds);
    println!("figures_produced  {}", stats.figures_produced);
    println!();
    println!("figures:");
    for figure in list_files(&run_dir.join("figures")) {
        println!("  {figure}");
    }
    let report = run_dir.join("report.txt");
    if report.exists() {
        println!("report: {}", report.display());
    }
    Ok(0)
}

fn list_files(dir: &Path) -> Vec<String> {
    let mut names = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    names
}
