use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adrs_cli::{benchmark, Problem, BENCHMARKS};
use adrs_core::api::{serve, Registry, Server};
use adrs_core::config::RunConfig;
use adrs_core::control::LiveRun;
use adrs_core::engine::{Engine, RunSetup};
use adrs_core::events::{fold, RunReport};
use adrs_core::generator::{Generator, GeneratorSpec};
use adrs_core::harness::{CommandEvaluator, EvaluatorSpec};
use adrs_core::store::StoredRun;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

/// File in the run directory holding the resolved evaluator settings.
const EVALUATOR_FILE: &str = "evaluator.json";

#[derive(Parser)]
#[command(name = "adrs", version, about = "Evolutionary search over systems policies")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Start a new run.
    Run(RunArgs),
    /// Continue a run from one of its checkpoints.
    Resume(ResumeArgs),
    /// Score one candidate with a benchmark evaluator and print the report line.
    Bench(BenchArgs),
    /// Summarize a stored run.
    Report {
        run_dir: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Serve the control API over stored runs.
    Serve {
        /// A run directory, or a directory of run directories.
        run_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

#[derive(Args)]
struct GenArgs {
    /// `scripted:<path>` or `http-chat:<url>`.
    #[arg(long)]
    generator: String,
    /// Generator for meta summaries; defaults to none.
    #[arg(long)]
    summarizer: Option<String>,
    /// Model name for http-chat generators.
    #[arg(long)]
    model: Option<String>,
    /// JSON object merged into http-chat request bodies.
    #[arg(long)]
    options: Option<String>,
    /// Serve the control API on this port while the run is active.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    problem: PathBuf,
    /// Run directory; defaults to runs/<problem>-<unix time>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Args)]
struct ResumeArgs {
    /// A `<run>/checkpoints/<iteration>` directory.
    checkpoint: PathBuf,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// One of cbl, eplb, txn, llmsql.
    name: String,
    #[arg(long)]
    candidate: PathBuf,
    #[arg(long, default_value = "full")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn build_generator(spec: &str, gen: &GenArgs) -> Result<Box<dyn Generator>> {
    let options: BTreeMap<String, serde_json::Value> = match &gen.options {
        Some(text) if spec.starts_with("http-chat:") => {
            serde_json::from_str(text).context("--options must be a JSON object")?
        }
        _ => BTreeMap::new(),
    };
    let model = spec.starts_with("http-chat:").then_some(gen.model.as_deref()).flatten();
    let spec = GeneratorSpec::parse(spec, model, options)?;
    Ok(spec.build()?)
}

fn generators(gen: &GenArgs) -> Result<(Box<dyn Generator>, Option<Box<dyn Generator>>)> {
    let main = build_generator(&gen.generator, gen)?;
    let summarizer = gen.summarizer.as_deref().map(|s| build_generator(s, gen)).transpose()?;
    Ok((main, summarizer))
}

fn start_server(live: &std::sync::Arc<LiveRun>, gen: &GenArgs) -> Result<Option<Server>> {
    let Some(port) = gen.port else { return Ok(None) };
    let registry = Registry::new();
    registry.add(live.clone());
    let server = serve(registry, SocketAddr::new(gen.host, port)).context("starting the control API")?;
    eprintln!("control API on http://{}/api/runs/{}", server.addr(), live.id());
    Ok(Some(server))
}

fn run_id(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned())
}

fn finish(report: &RunReport, dir: &Path) -> ExitCode {
    print!("{}", report.render());
    println!("run directory: {}", dir.display());
    if report.status == "aborted" {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let config = RunConfig::parse(&text).with_context(|| format!("config {}", args.config.display()))?;
    let problem = Problem::load(&args.problem)?;
    let out = args.out.unwrap_or_else(|| {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        PathBuf::from("runs").join(format!("{}-{secs}", run_id(&problem.dir)))
    });
    if out.join(adrs_core::store::EVENTS_FILE).exists() {
        bail!("{} already holds a run; use `adrs resume`", out.display());
    }
    let work = out.join("eval");
    std::fs::create_dir_all(&work).with_context(|| format!("creating {}", work.display()))?;
    let exe = std::env::current_exe().ok();
    let spec = problem.evaluator_spec(&config, &work, exe.as_deref().and_then(Path::parent));
    spec.validate(config.cascade_enabled).context("evaluator")?;
    std::fs::write(out.join(EVALUATOR_FILE), serde_json::to_string_pretty(&spec)?)?;
    let (generator, summarizer) = generators(&args.gen)?;
    let evaluator = CommandEvaluator::new(spec, config.score.invalid_floor);
    let setup = RunSetup {
        config,
        problem: problem.spec,
        seeds: problem.seeds,
        hint_bank: problem.hints,
    };
    let engine = Engine::create(&out, &run_id(&out), setup, &evaluator, generator, summarizer)?;
    let _server = start_server(&engine.live(), &args.gen)?;
    let report = engine.run()?;
    Ok(finish(&report, &out))
}

fn cmd_resume(args: ResumeArgs) -> Result<ExitCode> {
    let run_dir = args
        .checkpoint
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| anyhow!("{} is not a checkpoint directory", args.checkpoint.display()))?
        .to_path_buf();
    let spec_path = run_dir.join(EVALUATOR_FILE);
    let spec: EvaluatorSpec = serde_json::from_str(
        &std::fs::read_to_string(&spec_path).with_context(|| format!("reading {}", spec_path.display()))?,
    )?;
    let stored = StoredRun::load(&run_dir)?;
    spec.validate(stored.config.cascade_enabled).context("evaluator")?;
    std::fs::create_dir_all(&spec.working_dir)?;
    let (generator, summarizer) = generators(&args.gen)?;
    let evaluator = CommandEvaluator::new(spec, stored.config.score.invalid_floor);
    let engine = Engine::resume(&args.checkpoint, &run_id(&run_dir), &evaluator, generator, summarizer)?;
    let _server = start_server(&engine.live(), &args.gen)?;
    let report = engine.run()?;
    Ok(finish(&report, &run_dir))
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let evaluate = benchmark(&args.name)
        .ok_or_else(|| anyhow!("unknown benchmark `{}`; expected one of {}", args.name, BENCHMARKS.join(", ")))?;
    let text = std::fs::read_to_string(&args.candidate).with_context(|| format!("reading {}", args.candidate.display()))?;
    println!("{}", evaluate(&text, &args.split, args.seed).to_line());
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(dir: &Path, json: bool) -> Result<ExitCode> {
    let run = StoredRun::load(dir)?;
    let state = fold(run.config, run.meta.hint_bank, &run.events);
    let report = RunReport::from_events(&state, &run.events);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(dir: &Path, host: IpAddr, port: u16) -> Result<ExitCode> {
    let registry = Registry::new();
    let n = registry.add_stored(dir)?;
    if n == 0 {
        bail!("no runs under {}", dir.display());
    }
    let server = serve(registry, SocketAddr::new(host, port))?;
    eprintln!("serving {n} run(s) on http://{}/api/runs", server.addr());
    server.wait();
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Resume(a) => cmd_resume(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Report { run_dir, json } => cmd_report(&run_dir, json),
        Cmd::Serve { run_dir, port, host } => cmd_serve(&run_dir, host, port),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
