//! `sifter` command-line entry point.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sifter_core::config::JobConfig;
use sifter_core::corpus::{self, FsFrameLoader};
use sifter_core::eval::{self, EvalInputs, QueryEvent, StageTiming};
use sifter_core::filters::{self, write_verdicts, RemovalReason};
use sifter_core::pipeline::events::{read_log, write_log};
use sifter_core::service::{ServiceConfig, SystemClock, TaskService};
use sifter_core::sim::{self, LatentQuality, WorkerProfile};
use sifter_core::{Execution, Job};

#[derive(Parser)]
#[command(name = "sifter", version, about = "Hybrid human-machine short-video curation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSON Lines corpus manifest and summarize it.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        /// Write the normalized manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print ids of videos whose caption matches any keyword.
    Search {
        /// Comma-separated keywords.
        #[arg(long)]
        keywords: String,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Run keyword search and the automated filters for a job.
    RunR1(RunR1Args),
    /// Start the HTTP task service.
    Serve(ServeArgs),
    /// Run simulated end-to-end jobs.
    Simulate(SimulateArgs),
    /// Compute timing and rating comparisons.
    Eval(EvalArgs),
    /// Replay an event log and write the finished compilation.
    Export {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct R1Overrides {
    #[arg(long)]
    min_duration: Option<f64>,
    #[arg(long)]
    motion_threshold: Option<f64>,
    #[arg(long)]
    colorfulness_threshold: Option<f64>,
    /// Seconds.
    #[arg(long)]
    dedup_window: Option<f64>,
    /// Seed for the selection-stage shuffle.
    #[arg(long)]
    seed: Option<u64>,
}

impl R1Overrides {
    fn apply(&self, cfg: &mut JobConfig) {
        if let Some(v) = self.min_duration {
            cfg.r1.min_duration = v;
        }
        if let Some(v) = self.motion_threshold {
            cfg.r1.motion_diff_threshold = v;
        }
        if let Some(v) = self.colorfulness_threshold {
            cfg.r1.colorfulness_threshold = v;
        }
        if let Some(v) = self.dedup_window {
            cfg.r1.dedup_window = v;
        }
        if let Some(v) = self.seed {
            cfg.params.random_seed = v;
        }
    }
}

#[derive(Args)]
struct RunR1Args {
    #[arg(long)]
    job: PathBuf,
    /// Verdicts, one JSON object per searched video.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the corpus named in the job file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Also write the job's event log up to the opened selection stage.
    #[arg(long)]
    events: Option<PathBuf>,
    #[command(flatten)]
    overrides: R1Overrides,
    /// Disable the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Seconds after a page deadline during which submissions still count.
    #[arg(long, default_value_t = 5.0)]
    grace: f64,
    #[arg(long, default_value = "/media")]
    media_base: String,
    /// Job files to register at startup.
    #[arg(long)]
    job: Vec<PathBuf>,
    /// Run the filters for preloaded jobs before accepting workers.
    #[arg(long)]
    run_r1: bool,
    /// Overrides the shuffle seed of preloaded jobs.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    job: PathBuf,
    /// JSON array of worker profiles: selection workers first.
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Number of synthetic videos entering the selection stage.
    #[arg(long, default_value_t = 1000)]
    videos: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the event log of the first trial here.
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON array of per-job stage timings.
    #[arg(long)]
    timings: Option<PathBuf>,
    /// JSON array of curator query events.
    #[arg(long)]
    query_log: Option<PathBuf>,
    /// CSV with rater_id, condition, video_id, score and optional job_id.
    #[arg(long)]
    ratings: Option<PathBuf>,
    /// Number of comparisons for the Bonferroni correction.
    #[arg(long, default_value_t = 12)]
    m: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Query-session timeout, minutes.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("bad JSON in {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn ingest(corpus_path: &Path, out: Option<&Path>) -> Result<()> {
    let m = corpus::ingest_manifest(corpus_path)?;
    let uploaders: std::collections::BTreeSet<_> = m.entries.iter().map(|a| a.uploader_id.as_str()).collect();
    let total: f64 = m.entries.iter().map(|a| a.duration).sum();
    println!("videos: {}", m.len());
    println!("uploaders: {}", uploaders.len());
    println!("total duration: {total:.1} s");
    if let Some(p) = out {
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?);
        for a in &m.entries {
            serde_json::to_writer(&mut w, a)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn search(keywords: &str, corpus_path: &Path) -> Result<()> {
    let m = corpus::ingest_manifest(corpus_path)?;
    let kws: Vec<&str> = keywords.split(',').map(str::trim).filter(|k| !k.is_empty()).collect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for a in corpus::search_by_keywords(&kws, &m)? {
        writeln!(out, "{}", a.id)?;
    }
    Ok(())
}

fn run_r1(args: &RunR1Args) -> Result<()> {
    let mut cfg = JobConfig::load(&args.job)?;
    args.overrides.apply(&mut cfg);
    if let Some(c) = &args.corpus {
        cfg.corpus = Some(c.clone());
    }
    cfg.validate()?;
    let corpus_path = cfg.corpus.clone().context("job has no corpus; pass --corpus")?;
    let manifest = corpus::ingest_manifest(&corpus_path)?;
    let hits: Vec<_> = corpus::search_by_keywords(&cfg.keywords, &manifest)?
        .into_iter()
        .cloned()
        .collect();
    let loader = FsFrameLoader::new(manifest.base_dir());
    let outcome = filters::run_r1(&hits, &cfg.r1, &loader, exec(args.sequential))?;

    let f = File::create(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let mut w = BufWriter::new(f);
    write_verdicts(&mut w, &outcome.verdicts)?;
    w.flush()?;

    eprintln!("searched {} of {} videos", hits.len(), manifest.len());
    for r in [
        RemovalReason::TooShort,
        RemovalReason::SameSessionDuplicate,
        RemovalReason::StaticContent,
        RemovalReason::LowColorfulness,
        RemovalReason::Unreadable,
        RemovalReason::Kept,
    ] {
        eprintln!("  {:<24} {}", serde_json::to_value(r)?.as_str().unwrap_or("?"), outcome.count(r));
    }

    if let Some(path) = &args.events {
        let now = Utc::now();
        let job_id = cfg.job_id.clone().unwrap_or_else(|| "job".into());
        let mut job = Job::create(cfg.to_job(&job_id), now)?;
        job.record_r1(outcome.kept_ids(), now)?;
        job.start_r2(now)?;
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
        write_log(&mut w, job.events())?;
        w.flush()?;
    }
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    let svc = Arc::new(TaskService::new(
        ServiceConfig {
            grace_seconds: args.grace,
            media_base: args.media_base.clone(),
        },
        Arc::new(SystemClock),
    ));
    let ex = exec(args.sequential);
    for path in &args.job {
        let mut cfg = JobConfig::load(path)?;
        if let Some(s) = args.seed {
            cfg.params.random_seed = s;
        }
        let id = svc.submit_job(cfg)?;
        if args.run_r1 {
            let verdicts = svc.run_r1(&id, ex)?;
            let kept = verdicts.iter().filter(|v| v.kept).count();
            eprintln!("job {id}: {kept} of {} videos passed the filters", verdicts.len());
        } else {
            eprintln!("job {id} registered");
        }
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(sifter_server::serve(args.addr, svc, ex))?;
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = JobConfig::load(&args.job)?;
    let profiles: Vec<WorkerProfile> = read_json(&args.profiles)?;
    let report = sim::run_trials(&cfg, &profiles, args.videos, args.seed, args.trials, exec(args.sequential))?;
    let s = &report.summary;
    eprintln!(
        "{} trials: output size {:.2}, {} under-supplied",
        report.trials, s.output_size.mean, s.under_supplied
    );
    if let Some(o) = &s.overlap_fraction {
        eprintln!("selection overlap {:.3}", o.mean);
    }
    if let Some(t) = &s.sifter_minutes {
        eprintln!("pipeline time {:.2} min", t.mean);
    }
    if let Some(path) = &args.events {
        // trials are deterministic in their seed, so rerunning the first one
        // reproduces its log exactly
        let first = &report.per_trial[0];
        let latent = LatentQuality::uniform(&sim::video_ids(args.videos), first.seed);
        let run = sim::run_end_to_end(&cfg, &profiles, &latent, first.seed)?;
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
        write_log(&mut w, &run.events)?;
        w.flush()?;
    }
    emit(args.report.as_deref(), &report)
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    if args.timings.is_none() && args.query_log.is_none() && args.ratings.is_none() {
        bail!("nothing to evaluate: pass --timings, --query-log or --ratings");
    }
    let inputs = EvalInputs {
        timings: args.timings.as_deref().map(read_json::<Vec<StageTiming>>).transpose()?,
        queries: args.query_log.as_deref().map(read_json::<Vec<QueryEvent>>).transpose()?,
        ratings: args
            .ratings
            .as_deref()
            .map(|p| -> Result<_> {
                let f = File::open(p).with_context(|| format!("cannot open {}", p.display()))?;
                Ok(eval::read_ratings_csv(f)?)
            })
            .transpose()?,
    };
    let report = eval::build_report(&inputs, args.m, args.alpha, args.timeout)?;
    for c in &report.ratings {
        match &c.test {
            Some(t) => eprintln!(
                "{}: t({}) = {:.3}, p = {:.4}{}",
                c.job_id,
                t.df,
                t.t,
                t.p,
                if c.significant { " *" } else { "" }
            ),
            None => eprintln!("{}: no test ({})", c.job_id, c.note.as_deref().unwrap_or("")),
        }
    }
    emit(args.report.as_deref(), &report)
}

fn export(events: &Path, out: Option<&Path>) -> Result<()> {
    let f = File::open(events).with_context(|| format!("cannot open {}", events.display()))?;
    let log = read_log(BufReader::new(f)).map_err(|e| anyhow::anyhow!("{}: {e}", events.display()))?;
    let job = Job::replay(log)?;
    match job.output() {
        Some(o) => emit(out, o),
        None => bail!("job {} is not finalized (phase {:?})", job.job_id(), job.phase()),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { corpus, out } => ingest(&corpus, out.as_deref()),
        Command::Search { keywords, corpus } => search(&keywords, &corpus),
        Command::RunR1(a) => run_r1(&a),
        Command::Serve(a) => serve(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Export { events, out } => export(&events, out.as_deref()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
