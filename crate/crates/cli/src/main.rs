//! `geoloc`: validate inputs, synthesize traces, run scenarios and compare
//! runs.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid input
//! (arguments, config, traces, mismatched runs), 3 infeasible synthesis.
//!
//! Config precedence, lowest first: built-in defaults, `--config` file,
//! the `GEOLOC_SEED` environment variable, command-line flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use geoloc_core::scenarios::{
    compare, export, latency_traces, default_latency_center, read_summary, summarize_runs, Comparison, ExportError,
    OverlayMode, RunOptions, ScenarioError, ScenarioKind, Summary,
};
use geoloc_core::traces::TraceError;
use geoloc_core::{run, ProtocolConfig, SynthParams, Traces};

const SEED_ENV: &str = "GEOLOC_SEED";

#[derive(Parser)]
#[command(name = "geoloc", version, about = "Location-aware overlay and replication simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario in one or all modes and write its artifacts.
    Run(RunArgs),
    /// Compare completed run directories of the same scenario and seed.
    Compare {
        #[arg(required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
        /// Also write the comparison as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check a config file and/or trace files.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        routes: Option<PathBuf>,
        #[arg(long)]
        objects: Option<PathBuf>,
    },
    /// Generate synthetic traces into a directory.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// `defaults` or comma-separated key=value synth parameters.
        #[arg(long, default_value = "defaults")]
        params: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags named after config keys; each overrides the file value.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML or JSON protocol config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_distance: Option<f64>,
    #[arg(long)]
    max_peers: Option<usize>,
    #[arg(long)]
    announcement_time: Option<u64>,
    #[arg(long)]
    broadcast_time: Option<u64>,
    #[arg(long)]
    bully_timeout: Option<u64>,
    #[arg(long)]
    interest_radius: Option<f64>,
    #[arg(long)]
    review_probability: Option<f64>,
    #[arg(long)]
    latency_low: Option<u64>,
    #[arg(long)]
    latency_high: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: ScenarioKind,
    /// glo-partial, glo-full, cs, or all.
    #[arg(long, default_value = "all")]
    mode: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, requires = "objects")]
    routes: Option<PathBuf>,
    #[arg(long, requires = "routes")]
    objects: Option<PathBuf>,
    /// `defaults` or comma-separated key=value synth parameters.
    #[arg(long, conflicts_with = "routes")]
    synth: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run several seeds; each gets its own `seed<N>` subdirectory.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Parallel simulations for multi-mode or multi-seed runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Edge grid as ROWSxCOLS; 0x0 for none.
    #[arg(long)]
    edge_grid: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Signalling outage window START-END in ms.
    #[arg(long)]
    outage: Option<String>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn invalid(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn runtime(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

fn from_trace(e: TraceError) -> Failure {
    match e {
        TraceError::Infeasible(_) => Failure { code: 3, err: e.into() },
        TraceError::Io { .. } | TraceError::Parse { .. } | TraceError::Empty { .. } | TraceError::Invalid(_) => invalid(e),
    }
}

fn from_scenario(e: ScenarioError) -> Failure {
    match e {
        ScenarioError::Config(_) | ScenarioError::Setup(_) => invalid(e),
        ScenarioError::Trace(t) => from_trace(t),
        ScenarioError::Sim(_) | ScenarioError::Protocol(_) => runtime(e),
    }
}

fn from_export(e: ExportError) -> Failure {
    match e {
        ExportError::Mismatch { .. } | ExportError::TooFew(_) | ExportError::Json { .. } => invalid(e),
        ExportError::Io { .. } | ExportError::Csv(_) => runtime(e),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ProtocolConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => ProtocolConfig::from_file(p).map_err(invalid)?,
            None => ProtocolConfig::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            c.seed = s.trim().parse().with_context(|| format!("{SEED_ENV}={s} is not an integer")).map_err(invalid)?;
        }
        macro_rules! set {
            ($($k:ident),*) => { $( if let Some(v) = self.$k { c.$k = v; } )* };
        }
        set!(
            seed,
            max_distance,
            max_peers,
            announcement_time,
            broadcast_time,
            bully_timeout,
            interest_radius,
            review_probability,
            latency_low,
            latency_high
        );
        c.validate().map_err(invalid)?;
        Ok(c)
    }
}

/// Parse `defaults` or `key=value,...` over the synth parameters. The
/// synth seed defaults to the run seed.
fn synth_params(spec: &str, cfg: &ProtocolConfig) -> Result<SynthParams, Failure> {
    let mut p = SynthParams {
        seed: cfg.seed,
        max_distance: cfg.max_distance,
        interest_radius: cfg.interest_radius,
        ..SynthParams::default()
    };
    if spec == "defaults" {
        return Ok(p);
    }
    for kv in spec.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| invalid(anyhow::anyhow!("synth parameter `{kv}` is not key=value")))?;
        let bad = |e: &dyn std::fmt::Display| invalid(anyhow::anyhow!("synth parameter {k}: {e}"));
        let int = |v: &str| v.parse::<u64>().map_err(|e| bad(&e));
        let float = |v: &str| v.parse::<f64>().map_err(|e| bad(&e));
        match k {
            "seed" => p.seed = int(v)?,
            "clients" => p.clients = int(v)? as usize,
            "waypoints" => p.waypoints = int(v)? as usize,
            "objects" => p.objects = int(v)? as usize,
            "center_lat" => p.center_lat = float(v)?,
            "center_lon" => p.center_lon = float(v)?,
            "bbox_side" => p.bbox_side = float(v)?,
            "step_min" => p.step_min = float(v)?,
            "step_max" => p.step_max = float(v)?,
            "dwell_ms" => p.dwell_ms = int(v)?,
            _ => return Err(invalid(anyhow::anyhow!("unknown synth parameter `{k}`"))),
        }
    }
    Ok(p)
}

fn parse_pair(s: &str, sep: char, what: &str) -> Result<(u64, u64), Failure> {
    let parse = || -> Option<(u64, u64)> {
        let (a, b) = s.split_once(sep)?;
        Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
    };
    parse().ok_or_else(|| invalid(anyhow::anyhow!("{what} `{s}`: expected A{sep}B")))
}

fn print_kv(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("{k}={v}");
    }
}

fn opt(v: Option<u64>) -> String {
    v.map_or_else(|| "na".to_string(), |v| v.to_string())
}

struct Job {
    mode: OverlayMode,
    cfg: ProtocolConfig,
    dir: PathBuf,
}

fn run_job(a: &RunArgs, job: &Job) -> Result<Summary, Failure> {
    let traces: Traces = if a.scenario == ScenarioKind::Latency && a.routes.is_none() {
        latency_traces(5, default_latency_center())
    } else if let (Some(r), Some(o)) = (&a.routes, &a.objects) {
        Traces::load(r, o).map_err(from_trace)?
    } else if let Some(spec) = &a.synth {
        geoloc_core::synthesize(&synth_params(spec, &job.cfg)?).map_err(from_trace)?
    } else {
        return Err(invalid(anyhow::anyhow!("give --routes and --objects, or --synth")));
    };
    let mut opts = RunOptions::new(a.scenario, job.mode, job.cfg.clone());
    if let Some(g) = &a.edge_grid {
        let (r, c) = parse_pair(g, 'x', "edge grid")?;
        opts.edge_grid = (r as usize, c as usize);
    }
    if let Some(o) = &a.outage {
        opts.signalling_outage = Some(parse_pair(o, '-', "outage")?);
    }
    if !(0.0..=1.0).contains(&a.loss) || !(0.0..=1.0).contains(&a.jitter) {
        return Err(invalid(anyhow::anyhow!("--loss and --jitter must lie in [0, 1]")));
    }
    opts.loss = a.loss;
    opts.jitter = a.jitter;
    let out = run(&opts, &traces).map_err(from_scenario)?;
    export(&out, &job.dir).map_err(from_export)
}

/// Comparison across every run of this scenario and seed under `base`.
fn root_summary(base: &Path, scenario: ScenarioKind, seed: u64) -> Result<Comparison, Failure> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(base).with_context(|| base.display().to_string()).map_err(runtime)? {
        let dir = entry.map_err(runtime)?.path();
        if let Ok(s) = read_summary(&dir) {
            if s.meta.scenario == scenario && s.meta.seed == seed {
                dirs.push(dir);
            }
        }
    }
    dirs.sort();
    let c = summarize_runs(&dirs).map_err(from_export)?;
    fs::write(base.join("summary.json"), c.to_json()).map_err(runtime)?;
    Ok(c)
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let base_cfg = a.config.resolve()?;
    let modes: Vec<OverlayMode> = if a.mode == "all" {
        OverlayMode::ALL.to_vec()
    } else {
        vec![a.mode.parse().map_err(|e: String| invalid(anyhow::anyhow!(e)))?]
    };
    let seeds = if a.seeds.is_empty() { vec![base_cfg.seed] } else { a.seeds.clone() };
    let multi_seed = seeds.len() > 1;
    let base_of = |seed: u64| if multi_seed { a.out.join(format!("seed{seed}")) } else { a.out.clone() };
    let jobs: Vec<Job> = seeds
        .iter()
        .flat_map(|&seed| {
            let cfg = ProtocolConfig { seed, ..base_cfg.clone() };
            let base = base_of(seed);
            modes.iter().map(move |&mode| Job {
                mode,
                cfg: cfg.clone(),
                dir: base.join(format!("{}-{}", a.scenario, mode)),
            })
        })
        .collect();

    let width = a.jobs.max(1);
    let mut results: Vec<Option<Result<Summary, Failure>>> = (0..jobs.len()).map(|_| None).collect();
    for (chunk_jobs, chunk_out) in jobs.chunks(width).zip(results.chunks_mut(width)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_jobs.iter().map(|j| s.spawn(|| run_job(&a, j))).collect();
            for (h, slot) in handles.into_iter().zip(chunk_out.iter_mut()) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(runtime(anyhow::anyhow!("simulation thread panicked")))));
            }
        });
    }

    for (job, res) in jobs.iter().zip(results) {
        let s = res.expect("every job ran")?;
        print_kv(&[
            ("scenario", a.scenario.to_string()),
            ("mode", job.mode.to_string()),
            ("seed", job.cfg.seed.to_string()),
            ("out", job.dir.display().to_string()),
            ("total_messages", s.total_messages.to_string()),
            ("total_bytes", s.total_bytes.to_string()),
            ("server_messages", s.server_messages.to_string()),
            ("peer_messages", s.peer_messages.to_string()),
            ("writes_issued", s.writes_issued.to_string()),
            ("latency_median", opt(s.latency.median)),
            ("latency_p95", opt(s.latency.p95)),
            ("quiesced", s.quiesced.to_string()),
            ("missing_deltas", s.missing_deltas.to_string()),
        ]);
    }
    for seed in seeds {
        let c = root_summary(&base_of(seed), a.scenario, seed)?;
        let glo = c.glo_latency_lower.map_or("na".to_string(), |b| b.to_string());
        print_kv(&[("summary", base_of(seed).join("summary.json").display().to_string()), ("glo_latency_lower", glo)]);
    }
    Ok(())
}

fn cmd_compare(dirs: Vec<PathBuf>, json: Option<PathBuf>) -> Result<(), Failure> {
    let c = compare(&dirs).map_err(from_export)?;
    for line in c.key_values() {
        println!("{line}");
    }
    if let Some(p) = json {
        fs::write(&p, c.to_json()).with_context(|| p.display().to_string()).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_validate(config: ConfigArgs, routes: Option<PathBuf>, objects: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = config.resolve()?;
    println!("config=ok");
    println!("seed={}", cfg.seed);
    match (routes, objects) {
        (Some(r), Some(o)) => {
            let t = Traces::load(&r, &o).map_err(from_trace)?;
            t.validate().map_err(from_trace)?;
            println!("traces=ok");
            println!("clients={}", t.routes.len());
            println!("objects={}", t.objects.len());
            println!("pairs_meet={}", t.pairs_meet(cfg.max_distance));
            println!("coverage_ok={}", t.coverage_ok(cfg.interest_radius));
        }
        (None, None) => {}
        _ => return Err(invalid(anyhow::anyhow!("--routes and --objects go together"))),
    }
    Ok(())
}

fn cmd_synth(config: ConfigArgs, params: String, out: PathBuf) -> Result<(), Failure> {
    let cfg = config.resolve()?;
    let p = synth_params(&params, &cfg)?;
    let t = geoloc_core::synthesize(&p).map_err(from_trace)?;
    t.save(&out).map_err(runtime)?;
    print_kv(&[
        ("out", out.display().to_string()),
        ("seed", p.seed.to_string()),
        ("clients", t.routes.len().to_string()),
        ("objects", t.objects.len().to_string()),
    ]);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Compare { dirs, json } => cmd_compare(dirs, json),
        Cmd::Validate { config, routes, objects } => cmd_validate(config, routes, objects),
        Cmd::Synth { config, params, out } => cmd_synth(config, params, out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
