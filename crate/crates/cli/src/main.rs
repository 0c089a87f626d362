use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mfa_core::backends::BackendEnv;
use mfa_core::eval::{self, EvalReport};
use mfa_core::runner::{transcript_jsonl, RunError};
use mfa_core::triggers::build_trigger;
use mfa_core::workload::estimate_workload;
use mfa_core::{dsl, Automaton, EventBody, Session, StateKind, Status, ValidationReport};
use mfa_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(
    name = "mfa",
    version,
    about = "Run and inspect multi-LLM finite automata"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a dialogue, interactively or from a script of user turns.
    Run(RunArgs),
    /// Parse and validate a definition.
    Validate {
        file: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Bound the machine work between two user turns.
    Estimate {
        file: PathBuf,
        /// Seconds per dialer call.
        #[arg(long)]
        cost_dialer: Option<f64>,
        /// Seconds per writer call.
        #[arg(long)]
        cost_writer: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Score a trigger against a labelled dataset.
    EvalTrigger(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// One user turn per line; read stdin interactively when absent.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Write the JSONL transcript here.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Directory for writer sinks.
    #[arg(long)]
    sink_dir: Option<PathBuf>,
    #[arg(long, default_value = "cli")]
    session_id: String,
}

#[derive(Args)]
struct EvalArgs {
    trigger: String,
    /// Definition file declaring the trigger.
    #[arg(long)]
    defs: PathBuf,
    /// CSV with `text,label` columns.
    #[arg(long)]
    dataset: PathBuf,
    /// CSV with a `text` column of off-topic sentences.
    #[arg(long)]
    distractors: Option<PathBuf>,
    /// Distractor share in percent; repeat for several rows.
    #[arg(long = "pct", default_values_t = [0.0])]
    pct: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Column label; defaults to the model name or the trigger kind.
    #[arg(long)]
    backend: Option<String>,
    /// Write the full reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory of `.mfa` files registered at startup.
    #[arg(long)]
    defs: Option<PathBuf>,
    #[arg(long, env = "MFA_TOKEN")]
    token: Option<String>,
    #[arg(long)]
    cors_origin: Option<String>,
    #[arg(long)]
    sink_dir: Option<PathBuf>,
    /// Where relative paths in uploaded definitions resolve.
    #[arg(long)]
    upload_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Validate { file, json } => validate(&file, json),
        Command::Estimate {
            file,
            cost_dialer,
            cost_writer,
            json,
        } => estimate(&file, cost_dialer, cost_writer, json),
        Command::EvalTrigger(args) => eval_trigger(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(file: &Path) -> Result<Automaton> {
    dsl::parse_file(file).map_err(|e| anyhow!("{e}"))
}

fn print_report(report: &ValidationReport) {
    for issue in &report.errors {
        eprintln!("error: {issue}");
    }
    for issue in &report.warnings {
        eprintln!("warning: {issue}");
    }
}

fn load_valid(file: &Path) -> Result<Automaton> {
    let mut a = load(file)?;
    let report = a.validate();
    print_report(&report);
    if !report.is_ok() {
        bail!("{} failed validation", file.display());
    }
    Ok(a)
}

fn read_script(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let automaton = Arc::new(load_valid(&args.file)?);
    let env = BackendEnv {
        base_dir: automaton.base_dir().map(Path::to_path_buf),
        sink_dir: args.sink_dir.clone(),
        ..BackendEnv::default()
    };
    let mut session = Session::builder(automaton)
        .id(args.session_id.clone())
        .seed(args.seed)
        .env(env)
        .start()?;
    let echo_input = args.script.is_some();
    session.subscribe(move |event| match &event.body {
        EventBody::UserInput { text } if echo_input => println!("> {text}"),
        EventBody::Display { text } => println!("{text}"),
        EventBody::Terminated { reason, detail, .. } => {
            let reason = serde_json::to_value(reason).unwrap_or_default();
            match detail {
                Some(d) => eprintln!("[session ended: {} ({d})]", reason.as_str().unwrap_or("?")),
                None => eprintln!("[session ended: {}]", reason.as_str().unwrap_or("?")),
            }
        }
        EventBody::Warning { message } => log::warn!("{message}"),
        _ => {}
    });

    let outcome = match &args.script {
        Some(path) => session.run_script(&read_script(path)?),
        None => interactive(&mut session),
    };
    if let Some(path) = &args.transcript {
        std::fs::write(path, transcript_jsonl(session.transcript()))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    match outcome {
        Ok(()) if session.status() == Status::Ended => Ok(ExitCode::SUCCESS),
        Ok(()) => Ok(ExitCode::FAILURE),
        Err(e) => {
            eprintln!("error: {e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn interactive(session: &mut Session) -> Result<(), RunError> {
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        match session.status() {
            Status::Running => {
                session.step(None)?;
            }
            Status::AwaitingUser => {
                eprint!("> ");
                io::stderr().flush().ok();
                let line = match lines.next() {
                    Some(Ok(l)) => l,
                    _ => mfa_core::runner::QUIT_COMMAND.to_owned(),
                };
                session.step(Some(line.trim_end_matches('\r')))?;
            }
            Status::Ended | Status::Error => return Ok(()),
        }
    }
}

fn validate(file: &Path, json: bool) -> Result<ExitCode> {
    let source = dsl::DefinitionSource::read(file).map_err(|e| anyhow!("{e}"))?;
    let mut a = match source.parse() {
        Ok(a) => a,
        Err(errors) => {
            for e in &errors {
                eprintln!("{}", source.render(e));
            }
            return Ok(ExitCode::from(2));
        }
    };
    let report = a.validate();
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_report(&report);
        if report.is_ok() {
            println!(
                "{}: ok ({} states, {} edges, {} warnings)",
                file.display(),
                a.state_count(),
                a.edges().len(),
                report.warnings.len()
            );
        }
    }
    Ok(if report.is_ok() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn estimate(file: &Path, dialer: Option<f64>, writer: Option<f64>, json: bool) -> Result<ExitCode> {
    let a = load_valid(file)?;
    let mut costs = HashMap::new();
    if let Some(c) = dialer {
        costs.insert(StateKind::Dialer, c);
    }
    if let Some(c) = writer {
        costs.insert(StateKind::Writer, c);
    }
    let est = estimate_workload(&a, &costs)?;
    if json {
        let pairs: Vec<_> = est
            .per_pair
            .iter()
            .map(|((from, to), bound)| {
                serde_json::json!({ "from": from.to_string(), "to": to.to_string(), "max_chain": bound })
            })
            .collect();
        let out = serde_json::json!({
            "max_machine_chain": est.max_machine_chain,
            "estimated_latency": est.estimated_latency,
            "per_pair": pairs,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("max machine chain: {}", est.max_machine_chain);
    if let Some(l) = est.estimated_latency {
        println!("estimated latency: {l:.2} s");
    }
    for ((from, to), bound) in &est.per_pair {
        println!("  {from} -> {to}: {bound}");
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_trigger(args: EvalArgs) -> Result<ExitCode> {
    let a = load(&args.defs)?;
    let def = a
        .trigger(&args.trigger)
        .ok_or_else(|| anyhow!("no trigger `{}` in {}", args.trigger, args.defs.display()))?;
    let env = BackendEnv {
        base_dir: a.base_dir().map(Path::to_path_buf),
        ..BackendEnv::default()
    };
    let backend = args
        .backend
        .clone()
        .or_else(|| def.params.model.clone())
        .unwrap_or_else(|| def.kind.as_str().to_owned());
    let dataset = eval::load_dataset(&args.dataset)?;
    let pool = match &args.distractors {
        Some(p) => eval::load_distractors(p)?,
        None => Vec::new(),
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    for &pct in &args.pct {
        let data = eval::augment(&dataset, &pool, pct, args.seed)?;
        let mut trigger = build_trigger(def, &env)?;
        reports.push(eval::evaluate(
            trigger.as_mut(),
            &args.trigger,
            &backend,
            &data,
        )?);
    }
    print!("{}", eval::render_grid(&reports));
    for r in &reports {
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
    }
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&reports)?)
            .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .context("bad listen address")?;
    let app = AppState::new(ServiceConfig {
        token: args.token,
        cors_origin: args.cors_origin,
        backend: BackendEnv {
            sink_dir: args.sink_dir,
            ..BackendEnv::default()
        },
        upload_dir: args.upload_dir,
    });
    if let Some(dir) = &args.defs {
        for info in app.load_dir(dir)? {
            log::info!("registered {} ({})", info.automaton_id, info.name);
            eprintln!("registered {}", info.automaton_id);
        }
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(mfa_service::serve(addr, app))?;
    Ok(ExitCode::SUCCESS)
}
