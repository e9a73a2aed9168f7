use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use teca_core::checkpoint;
use teca_core::config::TrainConfig;
use teca_core::grpo::{self, TrainObserver};
use teca_core::model::PolicyParams;
use teca_core::report;
use teca_core::reward::RewardMode;
use teca_core::task::{self, Problem};
use teca_core::telemetry::{self, EvalReport, TelemetryRecord};
use teca_core::traces::{self, AnalyzeOptions};
use teca_core::warmstart;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TECA_OUT_ROOT";

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "teca", version, about = "Cumulative-entropy-regulated GRPO on a tiny policy")]
pub struct Cli {
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Warm-start a policy and train it with GRPO.
    Train(TrainArgs),
    /// Compute averaged TECA curves and statistics from a trace file.
    Analyze(AnalyzeArgs),
    /// Compare evaluation reports and plot telemetry.
    Report(ReportArgs),
    /// Write a problem set as line-delimited records.
    Problems(ProblemsArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Stop after this many iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also train an accuracy-only arm from the same initial policy and seeds.
    #[arg(long)]
    with_baseline: bool,
    /// Output directory; defaults to `$TECA_OUT_ROOT/<config>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from this checkpoint instead of running the warm start.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Fixed evaluation problem set (line-delimited records).
    #[arg(long)]
    eval_set: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Line-delimited trace records.
    traces: PathBuf,
    /// Output directory; defaults to `$TECA_OUT_ROOT/analysis-<file stem>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Points of the normalized curves.
    #[arg(long, default_value_t = 100)]
    points: usize,
    /// Keep only records with `"correct": true`.
    #[arg(long)]
    correct_only: bool,
    /// Average correct and incorrect records separately.
    #[arg(long)]
    split_by_correct: bool,
    #[arg(long, default_value_t = 0.1)]
    tail_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    forking_quantile: f64,
    /// Entropy temperature for logit records, overriding their own.
    #[arg(long)]
    temperature: Option<f64>,
    /// Fail on the first malformed record instead of skipping it.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation reports; the first is the baseline for ΔLEN.
    #[arg(long = "eval")]
    evals: Vec<PathBuf>,
    /// Telemetry files, optionally as `label=path`.
    #[arg(long = "telemetry")]
    telemetry: Vec<String>,
    /// Directory for SVG plots and the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProblemsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::usage("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::runtime(format!("cannot configure worker pool: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Report(a) => report_cmd(a),
        Command::Problems(a) => problems(a),
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, body: &[u8]) -> CliResult<()> {
    checkpoint::write_atomic(path, body).map_err(|e| CliError::runtime(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_file(path, text.as_bytes())
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_config(path: &Path) -> CliResult<TrainConfig> {
    TrainConfig::load(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct ArmEntry {
    name: String,
    reward: String,
    dir: String,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config: String,
    initial_policy: String,
    eval_problems: String,
    arms: Vec<ArmEntry>,
    layout: Vec<(&'static str, &'static str)>,
    started_unix: u64,
}

#[derive(Debug, Serialize)]
struct ArmSummary {
    name: String,
    iterations: usize,
    accuracy: f64,
    mean_length: f64,
    delta_length_pct: Option<f64>,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    finished_unix: u64,
    arms: Vec<ArmSummary>,
}

/// Streams telemetry lines and periodic checkpoints into an arm directory.
struct ArmWriter {
    dir: PathBuf,
    telemetry: BufWriter<File>,
}

impl TrainObserver for ArmWriter {
    fn on_iteration(&mut self, record: &TelemetryRecord) -> teca_core::Result<()> {
        let path = self.dir.join("telemetry.jsonl");
        telemetry::write_telemetry_line(&mut self.telemetry, record)
            .and_then(|_| self.telemetry.flush())
            .map_err(|e| teca_core::Error::Io {
                path: path.display().to_string(),
                source: e,
            })
    }

    fn on_checkpoint(&mut self, iteration: usize, params: &PolicyParams) -> teca_core::Result<()> {
        let path = self.dir.join("checkpoints").join(format!("iter-{iteration:06}.json"));
        checkpoint::save(&path, params, &format!("iteration {iteration}"))
    }
}

fn train(args: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|m| CliError::usage(format!("--set {o}: {m}")))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = args.iters {
        cfg.max_iterations = Some(iters);
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args.config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        out_root().join(format!("{stem}-seed{}", cfg.seed))
    });
    if out.join("manifest.json").exists() {
        return Err(CliError::usage(format!(
            "{} already holds a run; choose another --out",
            out.display()
        )));
    }
    create_dir(&out)?;

    let arms: Vec<(&str, RewardMode)> = if args.with_baseline {
        vec![("cer", RewardMode::Cer), ("baseline", RewardMode::AccuracyOnly)]
    } else {
        vec![(
            match cfg.reward_mode {
                RewardMode::Cer => "cer",
                RewardMode::AccuracyOnly => "accuracy",
            },
            cfg.reward_mode,
        )]
    };

    let eval_problems: Vec<Problem> = match &args.eval_set {
        Some(p) => task::read_problem_set(p).map_err(|e| CliError::data(e.to_string()))?,
        None => grpo::evaluation_problems(&cfg),
    };
    if eval_problems.is_empty() {
        return Err(CliError::data("evaluation problem set is empty"));
    }

    let manifest = RunManifest {
        tool: "teca",
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg.to_text(),
        initial_policy: args
            .init
            .as_ref()
            .map_or_else(|| "warm start".to_string(), |p| p.display().to_string()),
        eval_problems: args
            .eval_set
            .as_ref()
            .map_or_else(|| "generated".to_string(), |p| p.display().to_string()),
        arms: arms
            .iter()
            .map(|(n, m)| ArmEntry {
                name: n.to_string(),
                reward: m.to_string(),
                dir: n.to_string(),
            })
            .collect(),
        layout: vec![
            ("manifest.json", "this file, written before training"),
            ("config.cfg", "effective configuration"),
            ("initial.json", "checkpoint every arm starts from"),
            ("eval_problems.jsonl", "evaluation problem set"),
            ("<arm>/telemetry.jsonl", "one record per iteration"),
            ("<arm>/checkpoints/iter-*.json", "periodic checkpoints"),
            ("<arm>/final.json", "final checkpoint"),
            ("<arm>/last_good.json", "parameters kept after an aborted run"),
            ("<arm>/eval_report.json", "greedy evaluation report"),
            ("<arm>/eval_traces.jsonl", "per-problem evaluation entropy traces"),
            ("report.txt", "comparison table when a baseline arm ran"),
            ("summary.json", "written when the run finishes"),
        ],
        started_unix: unix_now(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    write_file(&out.join("config.cfg"), cfg.to_text().as_bytes())?;
    task::write_problem_set(&out.join("eval_problems.jsonl"), &eval_problems)
        .map_err(|e| CliError::runtime(e.to_string()))?;

    let initial = match &args.init {
        Some(p) => checkpoint::load(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?,
        None => {
            eprintln!("warm start: {} steps", cfg.warmstart.steps);
            warmstart::initial_policy(&cfg).map_err(|e| CliError::runtime(format!("warm start failed: {e}")))?
        }
    };
    if initial.config() != &cfg.model {
        return Err(CliError::data("initial checkpoint does not match the configured model"));
    }
    checkpoint::save(&out.join("initial.json"), &initial, "initial").map_err(|e| CliError::runtime(e.to_string()))?;

    let mut reports: Vec<(String, EvalReport, usize)> = Vec::new();
    for (name, mode) in &arms {
        let arm_cfg = TrainConfig {
            reward_mode: *mode,
            ..cfg.clone()
        };
        let dir = out.join(name);
        create_dir(&dir.join("checkpoints"))?;
        let tel_path = dir.join("telemetry.jsonl");
        let file = File::create(&tel_path).map_err(|e| io_err(&tel_path, e))?;
        let mut writer = ArmWriter {
            dir: dir.clone(),
            telemetry: BufWriter::new(file),
        };
        eprintln!("training arm `{name}` ({mode} reward)");
        let outcome = match grpo::train(&arm_cfg, &initial, &mut writer) {
            Ok(o) => o,
            Err(abort) => {
                let kept = dir.join("last_good.json");
                checkpoint::save(&kept, &abort.last_good, "last good")
                    .map_err(|e| CliError::runtime(format!("{abort}; saving last good parameters failed: {e}")))?;
                return Err(CliError::runtime(format!(
                    "arm `{name}`: {abort}; last good parameters kept in {}",
                    kept.display()
                )));
            }
        };
        checkpoint::save(&dir.join("final.json"), &outcome.params, "final")
            .map_err(|e| CliError::runtime(e.to_string()))?;
        let ev = telemetry::evaluate(&outcome.params, &eval_problems, cfg.max_response_length, name)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        traces::write_traces(&dir.join("eval_traces.jsonl"), &ev.traces)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        reports.push((name.to_string(), ev.report, outcome.iterations));
    }

    if let Some(base) = reports.iter().find(|(n, _, _)| n == "baseline").map(|(_, r, _)| r.clone()) {
        for (name, r, _) in reports.iter_mut() {
            if name != "baseline" {
                *r = r.clone().with_baseline(&base);
            }
        }
    }
    for (name, r, _) in &reports {
        r.save(&out.join(name).join("eval_report.json"))
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let mut ordered: Vec<EvalReport> = reports.iter().map(|(_, r, _)| r.clone()).collect();
    ordered.sort_by_key(|r| r.name != "baseline");
    let mut text = report::comparison_table(&ordered);
    if ordered.len() > 1 {
        text.push('\n');
        text.push_str(&report::difficulty_table(&ordered[0], &ordered[1]));
        write_file(&out.join("report.txt"), text.as_bytes())?;
    }
    print!("{text}");
    write_json(
        &out.join("summary.json"),
        &RunSummary {
            finished_unix: unix_now(),
            arms: reports
                .iter()
                .map(|(n, r, it)| ArmSummary {
                    name: n.clone(),
                    iterations: *it,
                    accuracy: r.accuracy,
                    mean_length: r.mean_length,
                    delta_length_pct: r.delta_length_pct,
                })
                .collect(),
        },
    )?;
    eprintln!("run written to {}", out.display());
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> CliResult<()> {
    if traces::is_analysis_output(&args.traces) {
        return Err(CliError::usage(format!(
            "{} is inside an analysis output directory; refusing to analyze generated artifacts",
            args.traces.display()
        )));
    }
    if !args.traces.is_file() {
        return Err(CliError::data(format!("{}: not a readable file", args.traces.display())));
    }
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args.traces.file_stem().map_or("traces".into(), |s| s.to_string_lossy().into_owned());
        out_root().join(format!("analysis-{stem}"))
    });
    let opts = AnalyzeOptions {
        points: args.points,
        correct_only: args.correct_only,
        split_by_correct: args.split_by_correct,
        tail_fraction: args.tail_fraction,
        forking_quantile: args.forking_quantile,
        temperature: args.temperature,
        strict: args.strict,
    };
    let analysis = traces::analyze_file(&args.traces, &opts).map_err(|e| match e {
        teca_core::Error::InvalidInput(m) => CliError::usage(m),
        other => CliError::data(format!("{}: {other}", args.traces.display())),
    })?;
    let skipped = analysis.stats.skipped;
    if skipped.total() > 0 {
        eprintln!(
            "warning: skipped {} of {} records (malformed {}, too short {}, missing \"correct\" {})",
            skipped.total(),
            analysis.stats.records,
            skipped.malformed,
            skipped.too_short,
            skipped.missing_correct
        );
    }
    traces::write_analysis(&out, &analysis).map_err(|e| CliError::runtime(e.to_string()))?;
    for c in &analysis.stats.curves {
        println!(
            "{}: traces {} tail_drop {:.6} peak {:.6} tail_mean {:.6} forking/trace {:.3}",
            c.label, c.traces, c.tail_drop, c.peak, c.tail_mean, c.forking_steps_mean
        );
    }
    if analysis.curves.is_empty() {
        println!("no curves: every record was skipped");
    }
    eprintln!("analysis written to {}", out.display());
    Ok(())
}

fn report_cmd(args: ReportArgs) -> CliResult<()> {
    if args.evals.is_empty() && args.telemetry.is_empty() {
        return Err(CliError::usage("report needs --eval and/or --telemetry inputs"));
    }
    let mut text = String::new();
    if !args.evals.is_empty() {
        let reports = args
            .evals
            .iter()
            .map(|p| EvalReport::load(p).map_err(|e| CliError::data(format!("{}: {e}", p.display()))))
            .collect::<CliResult<Vec<_>>>()?;
        text.push_str(&report::comparison_table(&reports));
        if reports.len() == 2 {
            text.push('\n');
            text.push_str(&report::difficulty_table(&reports[0], &reports[1]));
        }
        print!("{text}");
    }
    if !args.telemetry.is_empty() {
        let Some(out) = &args.out else {
            return Err(CliError::usage("--telemetry plots need --out"));
        };
        let mut runs = Vec::new();
        for entry in &args.telemetry {
            let (label, path) = match entry.split_once('=') {
                Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                None => {
                    let p = PathBuf::from(entry);
                    let label = p
                        .parent()
                        .and_then(|d| d.file_name())
                        .or_else(|| p.file_stem())
                        .map_or_else(|| entry.clone(), |s| s.to_string_lossy().into_owned());
                    (label, p)
                }
            };
            let recs = telemetry::read_telemetry(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            if recs.is_empty() {
                return Err(CliError::data(format!("{}: no telemetry records", path.display())));
            }
            runs.push((label, recs));
        }
        create_dir(out)?;
        for field in report::PLOTTED_FIELDS {
            let svg = report::telemetry_plot(field, &runs).expect("plotted fields exist");
            write_file(&out.join(format!("{field}.svg")), svg.as_bytes())?;
        }
        eprintln!("plots written to {}", out.display());
    }
    if let (Some(out), false) = (&args.out, text.is_empty()) {
        create_dir(out)?;
        write_file(&out.join("table.txt"), text.as_bytes())?;
    }
    Ok(())
}

fn problems(args: ProblemsArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = args.seed;
    cfg.eval_problems = args.count.max(1);
    let set = grpo::evaluation_problems(&cfg);
    task::write_problem_set(&args.out, &set[..args.count.min(set.len())])
        .map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(())
}
