//! `tabletop`: benchmark runs and reports, simulator stepping, an
//! interactive REPL, the session server and the acceptance checks.
//!
//! Exit codes: 0 success, 1 a check or verification failed, 2 usage or
//! runtime error.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use tabletop_core::agent::{parse_skill_call, Backends, Executor, LoopConfig, ProfileKind, PromptProfile};
use tabletop_core::bench::{build_report, emit_report, run_suite, BenchmarkReport, Format, Mode, SuiteConfig};
use tabletop_core::config::AppConfig;
use tabletop_core::events::Clock;
use tabletop_core::scene::canonical_json;
use tabletop_core::skills::SimExecutor;
use tabletop_core::speech::{read_wav_file, AsrClient, HttpAsr, HttpTts, TtsClient};
use tabletop_service::{serve, CreateRequest, Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "tabletop", version, about = "Closed-loop tabletop manipulation agent")]
struct Cli {
    /// Registry document (tasks, scenes, thresholds, backends). Builtin when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Bench(BenchCommand),
    #[command(subcommand)]
    Sim(SimCommand),
    #[command(subcommand)]
    Agent(AgentCommand),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Run every acceptance check; exits 1 if any fails.
    Check,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run a benchmark suite and emit its report.
    Run(RunArgs),
    /// Re-emit a JSON report, optionally verifying its aggregates.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum SimCommand {
    /// Apply skill calls to a fresh scene and print outcomes and the final snapshot.
    Step(StepArgs),
}

#[derive(Subcommand)]
enum AgentCommand {
    /// Read instructions from stdin and print each episode's events as JSONL.
    Repl(ReplArgs),
}

/// Backend URIs: `mock://rules`, `mock://rules-text` or an http(s) endpoint.
#[derive(Args, Clone, Default)]
struct BackendArgs {
    #[arg(long)]
    planner: Option<String>,
    #[arg(long)]
    converter: Option<String>,
    #[arg(long)]
    evaluator: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Comma-separated: full, baseline, no_planner, no_evaluator.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    modes: Vec<Mode>,
    /// Comma-separated task ids; every simulated task when omitted.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long)]
    trials: Option<u32>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    fail_prob: Option<f64>,
    /// Example set used in the stage prompts.
    #[arg(long, default_value = "prompted", value_parser = parse_profile)]
    profile: ProfileKind,
    /// Directory with planner.txt, converter.txt and evaluator.txt.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[command(flatten)]
    backends: BackendArgs,
    /// One JSONL event log per episode under this directory.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[arg(long, default_value = "markdown")]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    report_json: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON report produced by `bench run`.
    input: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recompute rows and aggregates from the raw records; exit 1 on mismatch.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct StepArgs {
    #[arg(long, default_value_t = 1)]
    scenario: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    fail_prob: f64,
    /// Skill calls such as `vlamove(pick="apple", place="red plate")`.
    actions: Vec<String>,
}

#[derive(Args)]
struct ReplArgs {
    #[arg(long, default_value_t = 1)]
    scenario: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "full")]
    mode: Mode,
    #[arg(long, default_value_t = 0.0)]
    fail_prob: f64,
    #[command(flatten)]
    backends: BackendArgs,
    /// ASR endpoint; enables `@path.wav` input lines.
    #[arg(long)]
    asr: Option<String>,
    #[arg(long)]
    tts: Option<String>,
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    capacity: usize,
    #[command(flatten)]
    backends: BackendArgs,
    #[arg(long)]
    asr: Option<String>,
    #[arg(long)]
    tts: Option<String>,
    /// Wall-clock timestamps instead of logical ones.
    #[arg(long)]
    wall_clock: bool,
}

fn parse_profile(s: &str) -> Result<ProfileKind, String> {
    match s {
        "prompted" => Ok(ProfileKind::Prompted),
        "unprompted" => Ok(ProfileKind::Unprompted),
        _ => Err(format!("unknown profile `{s}` (expected prompted or unprompted)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Bench(BenchCommand::Run(a)) => bench_run(config, a),
        Command::Bench(BenchCommand::Report(a)) => bench_report(config, a),
        Command::Sim(SimCommand::Step(a)) => sim_step(config, a),
        Command::Agent(AgentCommand::Repl(a)) => repl(config, a),
        Command::Serve(a) => serve_cmd(config, a),
        Command::Check => Ok(acceptance()),
    }
}

fn registry(path: Option<&Path>, backends: Option<&BackendArgs>) -> Result<Arc<AppConfig>> {
    let mut reg = match path {
        Some(p) => AppConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => AppConfig::builtin(),
    };
    if let Some(b) = backends {
        let agent = &mut reg.agent;
        for (slot, uri) in [(&mut agent.planner, &b.planner), (&mut agent.converter, &b.converter), (&mut agent.evaluator, &b.evaluator)] {
            if let Some(u) = uri {
                *slot = u.clone();
            }
        }
    }
    Ok(Arc::new(reg))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn bench_run(config: Option<&Path>, a: RunArgs) -> Result<ExitCode> {
    let reg = registry(config, Some(&a.backends))?;
    let backends = Backends::from_config(reg.clone())?;
    let profile = match &a.prompts {
        Some(dir) => PromptProfile::load_dir(dir, a.profile)?,
        None => PromptProfile::builtin(a.profile),
    };
    let defaults = SuiteConfig::from_registry(&reg);
    let cfg = SuiteConfig {
        modes: a.modes,
        tasks: if a.tasks.is_empty() { defaults.tasks.clone() } else { a.tasks },
        trials: a.trials.unwrap_or(defaults.trials),
        seed_base: a.seed_base.unwrap_or(defaults.seed_base),
        fail_prob: a.fail_prob.unwrap_or(defaults.fail_prob),
        log_dir: a.log_dir,
        ..defaults
    };
    let report = run_suite(&reg, &backends, &profile, &cfg)?;
    write_out(a.out.as_deref(), &emit_report(&report, a.format))?;
    if let Some(p) = &a.report_json {
        write_out(Some(p), &emit_report(&report, Format::Json))?;
    }
    if !report.complete {
        eprintln!("warning: some episodes aborted on backend errors");
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_report(config: Option<&Path>, a: ReportArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report: BenchmarkReport = serde_json::from_str(&text).context("parsing report")?;
    if a.verify {
        let reg = registry(config, None)?;
        let cfg = SuiteConfig {
            modes: report.modes.clone(),
            tasks: report.rows.iter().map(|r| r.task_id.clone()).collect(),
            trials: report.trials,
            seed_base: report.seed_base,
            fail_prob: report.fail_prob,
            ..SuiteConfig::from_registry(&reg)
        };
        let rebuilt = build_report(&reg, &cfg, report.records.clone());
        if rebuilt.rows != report.rows || rebuilt.aggregates != report.aggregates || rebuilt.complete != report.complete {
            eprintln!("verify: rows or aggregates do not match the raw records");
            return Ok(ExitCode::from(1));
        }
        eprintln!("verify: {} rows and {} aggregates match", report.rows.len(), report.aggregates.len());
    }
    write_out(a.out.as_deref(), &emit_report(&report, a.format))?;
    Ok(ExitCode::SUCCESS)
}

fn sim_step(config: Option<&Path>, a: StepArgs) -> Result<ExitCode> {
    let reg = registry(config, None)?;
    let calls = a
        .actions
        .iter()
        .map(|t| parse_skill_call(t).map_err(|e| anyhow!("`{t}`: {e}")))
        .collect::<Result<Vec<_>>>()?;
    let scene = reg.make_scenario(a.scenario, a.seed)?;
    let mut exec = SimExecutor::new(&reg, scene, a.fail_prob)?;
    for call in &calls {
        println!("{}", canonical_json(&exec.execute(call))?);
    }
    println!("{}", canonical_json(&exec.snapshot())?);
    Ok(ExitCode::SUCCESS)
}

fn speech_clients(asr: Option<&str>, tts: Option<&str>) -> Result<(Option<Arc<dyn AsrClient>>, Option<Arc<dyn TtsClient>>)> {
    let t = Duration::from_secs(30);
    let asr = asr.map(|u| HttpAsr::new(u, t).map(|c| Arc::new(c) as Arc<dyn AsrClient>)).transpose()?;
    let tts = tts.map(|u| HttpTts::new(u, t).map(|c| Arc::new(c) as Arc<dyn TtsClient>)).transpose()?;
    Ok((asr, tts))
}

fn service_config(reg: Arc<AppConfig>, asr: Option<&str>, tts: Option<&str>) -> Result<ServiceConfig> {
    let (asr, tts) = speech_clients(asr, tts)?;
    Ok(ServiceConfig {
        backends: Backends::from_config(reg.clone())?,
        base_loop: LoopConfig::from_agent(&reg.agent),
        asr,
        tts,
        ..ServiceConfig::mock(reg)
    })
}

fn repl(config: Option<&Path>, a: ReplArgs) -> Result<ExitCode> {
    let reg = registry(config, Some(&a.backends))?;
    let cfg = ServiceConfig {
        log_dir: a.log_dir,
        ..service_config(reg, a.asr.as_deref(), a.tts.as_deref())?
    };
    let service = Service::new(cfg);
    let session = service.create(&CreateRequest {
        scenario: Some(a.scenario.into()),
        seed: a.seed,
        mode: Some(a.mode),
        fail_prob: a.fail_prob,
        task: None,
    })?;
    let mut out = std::io::stdout().lock();
    let mut printed = 0;
    let mut flush = |out: &mut std::io::StdoutLock<'_>| -> Result<()> {
        for e in session.log.since(printed + 1) {
            writeln!(out, "{}", e.to_json_line())?;
            printed = e.seq;
        }
        out.flush()?;
        Ok(())
    };
    flush(&mut out)?;
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (text, spoken) = match line.strip_prefix('@') {
            Some(path) => {
                let (rate, samples) = read_wav_file(Path::new(path))?;
                match service.transcribe(&samples, rate) {
                    Ok(t) => (t, true),
                    Err(e) => {
                        eprintln!("{e}");
                        continue;
                    }
                }
            }
            None => (line.to_string(), false),
        };
        let (s, _) = service.begin(&session.id)?;
        service.run(&s, &text, spoken);
        flush(&mut out)?;
    }
    service.close(&session.id)?;
    Ok(ExitCode::SUCCESS)
}

fn serve_cmd(config: Option<&Path>, a: ServeArgs) -> Result<ExitCode> {
    let reg = registry(config, Some(&a.backends))?;
    let cfg = ServiceConfig {
        log_dir: a.log_dir,
        capacity: a.capacity,
        clock: if a.wall_clock { Clock::System } else { Clock::Logical },
        ..service_config(reg, a.asr.as_deref(), a.tts.as_deref())?
    };
    if let Some(dir) = &cfg.log_dir {
        std::fs::create_dir_all(dir)?;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        serve(listener, Arc::new(Service::new(cfg))).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn acceptance() -> ExitCode {
    let checks = tabletop_acceptance::run_all();
    for c in &checks {
        println!("{c}");
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn modes_parse_from_a_list() {
        let cli = Cli::try_parse_from(["tabletop", "bench", "run", "--modes", "full,no_evaluator", "--trials", "2"]).unwrap();
        let Command::Bench(BenchCommand::Run(a)) = cli.command else { panic!("wrong command") };
        assert_eq!(a.modes, vec![Mode::Full, Mode::NoEvaluator]);
        assert_eq!(a.trials, Some(2));
        assert!(Cli::try_parse_from(["tabletop", "bench", "run", "--modes", "fast"]).is_err());
        assert!(Cli::try_parse_from(["tabletop", "bench", "run", "--profile", "other"]).is_err());
    }
}
