//! Headless command line driving the same operations as the HTTP API.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use grader_core::calibration::SamplingStrategy;
use grader_core::canonical;
use grader_core::exact::Exact;
use grader_core::ids::{AssignmentId, ItemId, QuestionId, SubmissionId, WisdomId};
use grader_core::store::{Store, SystemClock};

use crate::app::{App, Bundle, TimeSavingsQuery};
use crate::config::{Config, ProviderMode};
use crate::error::AppError;
use crate::{api, export};

#[derive(Debug, Parser)]
#[command(name = "grader", version, about = "Human-in-the-loop grading service")]
pub struct Cli {
    /// Store directory (overrides GRADER_STORE; default ./grader-data).
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Provider mode (overrides GRADER_PROVIDER).
    #[arg(long, global = true, value_enum)]
    provider: Option<ProviderKind>,
    /// Mock provider fixture file (overrides GRADER_FIXTURES).
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Remote provider base URL (overrides GRADER_PROVIDER_URL).
    #[arg(long, global = true)]
    provider_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Strategy {
    Random,
    LowConfidenceFirst,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
    /// Load courses, assignments and questions from a bundle file.
    Init {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Split a bulk upload manifest into submissions and match names.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Bind a submission to a roster student by hand.
    Match {
        #[arg(long)]
        submission: String,
        #[arg(long)]
        student: String,
    },
    /// Grade (or regrade) one question and write the records.
    Grade {
        #[arg(long)]
        question: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the review queue of an assignment.
    Queue {
        #[arg(long)]
        assignment: String,
        #[arg(long)]
        seed: u64,
    },
    /// Run a calibration cycle from a corrections file keyed by respondent.
    Calibrate {
        #[arg(long)]
        question: String,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "random")]
        strategy: Strategy,
        #[arg(long)]
        corrections: PathBuf,
        /// Replace a drafted wisdom's text before applying: `<wisdom id>=<text>`.
        #[arg(long = "edit")]
        edits: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytics reports.
    Report {
        #[command(subcommand)]
        report: Report,
    },
    /// Export final grades.
    Export {
        #[arg(long)]
        assignment: String,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum Report {
    TimeSavings {
        #[arg(long)]
        assignment: Option<String>,
        #[arg(long)]
        t_avg: Exact,
        #[arg(long)]
        students: Option<u64>,
        #[arg(long)]
        questions: Option<u64>,
        #[arg(long)]
        c: Option<u64>,
    },
    Accuracy {
        #[arg(long)]
        assignment: Option<String>,
    },
    Usage {
        #[arg(long)]
        from: Option<NaiveDate>,
        #[arg(long)]
        to: Option<NaiveDate>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::bad(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AppError::bad(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), AppError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| AppError::Internal(format!("{}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), AppError> {
    emit(out, &canonical::to_string(value)?)
}

pub fn config_for(cli: &Cli) -> Result<Config, AppError> {
    let mut config = Config::from_env()?;
    if let Some(store) = &cli.store {
        config.store = Some(store.clone());
    }
    if config.store.is_none() {
        config.store = Some(PathBuf::from("grader-data"));
    }
    match cli.provider {
        Some(ProviderKind::Mock) => {
            config.provider = ProviderMode::Mock {
                fixtures: cli.fixtures.clone().or_else(|| std::env::var("GRADER_FIXTURES").ok().map(PathBuf::from)),
            }
        }
        Some(ProviderKind::Http) => {
            let endpoint = cli
                .provider_url
                .clone()
                .or_else(|| std::env::var("GRADER_PROVIDER_URL").ok())
                .ok_or_else(|| AppError::bad("--provider http needs --provider-url or GRADER_PROVIDER_URL"))?;
            config.provider = ProviderMode::Http { endpoint, token: std::env::var("GRADER_PROVIDER_TOKEN").ok() };
        }
        None => {
            if let (ProviderMode::Mock { fixtures }, Some(f)) = (&mut config.provider, &cli.fixtures) {
                *fixtures = Some(f.clone());
            }
        }
    }
    Ok(config)
}

/// Open the configured store and build the service facade.
pub fn open_app(config: &Config) -> Result<Arc<App>, AppError> {
    let clock = Arc::new(SystemClock);
    let store = match config.store.as_deref() {
        Some(p) if p != Path::new(":memory:") => Store::open(p, clock, config.snapshot_every)?,
        _ => Store::in_memory(clock),
    };
    App::new(Arc::new(store), Arc::new(config.build_gateway()?), config.parallelism)
}

async fn run(cli: Cli) -> Result<(), AppError> {
    let config = config_for(&cli)?;
    let app = open_app(&config)?;
    let actor = "cli";
    match cli.command {
        Command::Serve { port } => {
            let port = port.unwrap_or(config.port);
            let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
                .await
                .map_err(|e| AppError::Internal(format!("bind port {port}: {e}")))?;
            tracing::info!(port, "listening");
            api::serve(app, listener).await.map_err(|e| AppError::Internal(e.to_string()))
        }
        Command::Init { bundle } => {
            let created = app.load_bundle(read_json::<Bundle>(&bundle)?, actor)?;
            emit_json(None, &serde_json::json!({ "created": created }))
        }
        Command::Ingest { manifest } => {
            let report = app.ingest(read_json(&manifest)?, actor).await?;
            emit_json(None, &report)
        }
        Command::Match { submission, student } => {
            let bound = app.resolve_match(&SubmissionId::from(submission), &student.as_str().into(), actor).await?;
            emit_json(None, &bound.value)
        }
        Command::Grade { question, out } => {
            let question = QuestionId::from(question);
            let mut run = app.start_run(&question, true, actor).await?;
            run.started_at = None;
            run.completed_at = None;
            let records = app.list_records(&question)?;
            emit_json(out.as_deref(), &serde_json::json!({ "run": run, "records": records }))
        }
        Command::Queue { assignment, seed } => {
            emit_json(None, &app.review_queue(&AssignmentId::from(assignment), seed, actor)?)
        }
        Command::Calibrate { question, size, seed, strategy, corrections, edits, out } => {
            let question = QuestionId::from(question);
            let wanted: BTreeMap<String, BTreeSet<ItemId>> = read_json(&corrections)?;
            let strategy = match strategy {
                Strategy::Random => SamplingStrategy::Random,
                Strategy::LowConfidenceFirst => SamplingStrategy::LowConfidenceFirst,
            };
            let session = app.open_calibration(&question, size, strategy, seed, actor).await?.value;
            for record_id in &session.sample {
                let record = app.get_record(record_id)?.value;
                if let Some(selection) = wanted.get(&record.respondent) {
                    app.record_correction(&session.id, record_id, selection.clone(), actor).await?;
                }
            }
            app.propose_wisdoms(&session.id, actor).await?;
            for edit in &edits {
                let (id, text) = edit
                    .split_once('=')
                    .ok_or_else(|| AppError::bad(format!("--edit expects <wisdom id>=<text>, got {edit:?}")))?;
                app.edit_wisdom(&session.id, &WisdomId::from(id), text, actor).await?;
            }
            let mut applied = app.apply_calibration(&session.id, actor).await?;
            applied.run.started_at = None;
            applied.run.completed_at = None;
            emit_json(out.as_deref(), &applied)
        }
        Command::Report { report } => match report {
            Report::TimeSavings { assignment, t_avg, students, questions, c } => {
                let query =
                    TimeSavingsQuery { assignment: assignment.map(AssignmentId::from), t_avg, students, questions, c };
                emit_json(None, &app.time_savings(&query)?)
            }
            Report::Accuracy { assignment } => {
                emit_json(None, &app.accuracy(assignment.map(AssignmentId::from).as_ref())?)
            }
            Report::Usage { from, to } => {
                let window = (from.is_some() || to.is_some())
                    .then(|| (from.unwrap_or(NaiveDate::MIN), to.unwrap_or(NaiveDate::MAX)));
                emit_json(None, &app.usage(window)?)
            }
        },
        Command::Export { assignment, format, out } => {
            let grades = app.export(&AssignmentId::from(assignment))?;
            let text = match format {
                Format::Csv => export::to_csv(&grades).map_err(|e| AppError::Internal(e.to_string()))?,
                Format::Json => export::to_json(&grades)?,
            };
            match out {
                Some(path) => emit(Some(&path), &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("GRADER_LOG").unwrap_or_else(|_| "warn".into()))
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: tokio runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
