use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use trackarena::bench::{generate_suite, BehaviorKind};
use trackarena::checkpoint::{Checkpoint, Phase};
use trackarena::config::RunConfig;
use trackarena::io::{write_atomic, write_json};
use trackarena::pipeline::{
    self, diagnostics_bytes, evaluate_manifest, file_header, load_demos, load_diagnostics, save_demos, SuiteManifest,
};
use trackarena::Error;

#[derive(Parser)]
#[command(name = "trackarena", version, about = "Competitive 2D tracking: data, training and benchmarks")]
struct Cli {
    /// Worker threads for parallel rollouts and evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `--set grpo.learning_rate=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        RunConfig::load(&self.config, &o)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainPhase {
    Bc,
    Single,
    Multi,
}

#[derive(Clone, Copy, ValueEnum)]
enum Behavior {
    Static,
    Random,
    Competitive,
}

impl From<Behavior> for BehaviorKind {
    fn from(b: Behavior) -> Self {
        match b {
            Behavior::Static => BehaviorKind::Static,
            Behavior::Random => BehaviorKind::Random,
            Behavior::Competitive => BehaviorKind::Competitive,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write a demonstration dataset.
    Collect {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file (default: <output_dir>/demos.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one phase and write its checkpoint(s) and diagnostics.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        phase: TrainPhase,
        /// Starting checkpoint; required (bc-tagged) for single and multi.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Demonstration dataset for the bc phase (default: <output_dir>/demos.jsonl).
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Opponent behavior for the single phase (default: train_suite.single_behavior).
        #[arg(long, value_enum)]
        behavior: Option<Behavior>,
    },
    /// Generate or evaluate benchmark suites.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Export diagnostics logs as one CSV table.
    Curves {
        /// Diagnostics logs; each file's path is its source label.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: u32,
        #[arg(long, value_enum)]
        behavior: Behavior,
        /// Opponent checkpoint path, required for competitive suites.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config supplying the arena template (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    Evaluate {
        /// Tracker checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// Config supplying rewards and evaluation settings (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory for report.json and records.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
}

fn optional_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p, overrides),
        None => {
            let mut v = serde_json::to_value(RunConfig::default())?;
            for o in overrides {
                trackarena::config::apply_override(&mut v, o)?;
            }
            RunConfig::from_value(v)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Load(_) | Error::Generation { .. } => 2,
        _ => 3,
    }
}

fn summary(v: serde_json::Value) {
    println!("{v}");
}

fn collect(cfg: &ConfigArgs, out: Option<PathBuf>) -> Result<(), Error> {
    let cfg = cfg.load()?;
    let out = out.unwrap_or_else(|| Path::new(&cfg.output_dir).join("demos.jsonl"));
    let set = pipeline::collect(&cfg)?;
    save_demos(&out, &set, file_header(&cfg)?)?;
    summary(json!({
        "command": "collect",
        "episodes": set.episodes,
        "demos": set.demos.len(),
        "seed": cfg.seed,
        "out": out,
    }));
    Ok(())
}

fn load_init(path: Option<&Path>, phase: &str) -> Result<Checkpoint, Error> {
    let p = path.ok_or_else(|| Error::Usage(format!("--phase {phase} needs --init <bc checkpoint>")))?;
    let ck = Checkpoint::load(p)?;
    if ck.phase != Phase::Bc {
        return Err(Error::Usage(format!(
            "--init {} has phase {:?}; --phase {phase} needs a bc checkpoint",
            p.display(),
            ck.phase
        )));
    }
    Ok(ck)
}

fn train(
    cfg: &ConfigArgs,
    phase: TrainPhase,
    init: Option<&Path>,
    demos: Option<PathBuf>,
    behavior: Option<Behavior>,
) -> Result<(), Error> {
    let cfg = cfg.load()?;
    let dir = PathBuf::from(&cfg.output_dir);
    let header = file_header(&cfg)?;
    match phase {
        TrainPhase::Bc => {
            let demos = demos.unwrap_or_else(|| dir.join("demos.jsonl"));
            let (_, data) = load_demos(&demos)?;
            let start = init.map(|p| Checkpoint::load(p)?.params()).transpose()?;
            let (ck, report) = pipeline::run_bc(&cfg, &data, start.as_ref())?;
            let path = dir.join("bc.json");
            ck.save(&path)?;
            write_json(&dir.join("bc_report.json"), &report)?;
            summary(json!({
                "command": "train",
                "phase": "bc",
                "demos": data.len(),
                "holdout_loss": report.final_holdout_loss(),
                "checkpoint": path,
                "hash": ck.hash()?,
            }));
        }
        TrainPhase::Single => {
            let bc = load_init(init, "single")?;
            let kind = behavior.map(BehaviorKind::from).unwrap_or(cfg.train_suite.single_behavior);
            let out = pipeline::run_single(&cfg, &bc, kind)?;
            let path = dir.join("single.json");
            out.checkpoint.save(&path)?;
            write_atomic(&dir.join("single_diagnostics.jsonl"), &diagnostics_bytes(header, &out.diagnostics)?)?;
            summary(json!({
                "command": "train",
                "phase": "single",
                "behavior": kind.as_str(),
                "iterations": out.diagnostics.len(),
                "final_mean_return": out.diagnostics.last().map(|d| d.mean_return),
                "checkpoint": path,
                "hash": out.checkpoint.hash()?,
            }));
        }
        TrainPhase::Multi => {
            let bc = load_init(init, "multi")?;
            let out = pipeline::run_multi(&cfg, &bc)?;
            let tp = dir.join("multi_tracker.json");
            let op = dir.join("multi_opponent.json");
            out.tracker.save(&tp)?;
            out.opponent.save(&op)?;
            write_atomic(&dir.join("multi_diagnostics.jsonl"), &diagnostics_bytes(header, &out.diagnostics)?)?;
            summary(json!({
                "command": "train",
                "phase": "multi",
                "records": out.diagnostics.len(),
                "tracker": tp,
                "opponent": op,
                "hash": out.tracker.hash()?,
            }));
        }
    }
    Ok(())
}

fn bench(cmd: BenchCommand) -> Result<(), Error> {
    match cmd {
        BenchCommand::Generate {
            seed,
            count,
            behavior,
            checkpoint,
            config,
            out,
        } => {
            let cfg = optional_config(config.as_deref(), &[])?;
            let kind = BehaviorKind::from(behavior);
            let reference = match (kind, &checkpoint) {
                (BehaviorKind::Competitive, None) => {
                    return Err(Error::Usage("competitive suites need --checkpoint".into()));
                }
                (BehaviorKind::Competitive, Some(p)) => {
                    Checkpoint::load(p)?.params()?;
                    Some(p.to_string_lossy().into_owned())
                }
                _ => None,
            };
            let episodes = generate_suite(seed, count, kind, &cfg.arena, reference.as_deref())?;
            let mut header = file_header(&cfg)?;
            header.seed = seed;
            let manifest = SuiteManifest::new(header, seed, kind, episodes);
            manifest.save(&out)?;
            summary(json!({
                "command": "bench generate",
                "behavior": kind.as_str(),
                "count": manifest.count,
                "seed": seed,
                "out": out,
            }));
        }
        BenchCommand::Evaluate {
            checkpoint,
            suite,
            config,
            overrides,
            out,
        } => {
            let cfg = optional_config(config.as_deref(), &overrides)?;
            let manifest = SuiteManifest::load(&suite)?;
            let tracker = Checkpoint::load(&checkpoint)?;
            let ev = evaluate_manifest(&cfg, &tracker, &manifest, Path::new("."))?;
            write_json(&out.join("report.json"), &ev.report)?;
            write_atomic(&out.join("records.jsonl"), &ev.records_bytes)?;
            let m = &ev.report.metrics;
            summary(json!({
                "command": "bench evaluate",
                "episodes": m.episodes,
                "sr": m.sr,
                "tr": m.tr,
                "cr": m.cr,
                "out": out,
            }));
        }
    }
    Ok(())
}

const CURVE_COLUMNS: [&str; 14] = [
    "source",
    "agent",
    "round",
    "iteration",
    "mean_return",
    "return_std",
    "advantage_std",
    "clip_fraction",
    "mean_ratio",
    "kl",
    "entropy",
    "loss",
    "steps",
    "wall_time_ms",
];

fn curves(logs: &[PathBuf], out: Option<PathBuf>) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CURVE_COLUMNS).map_err(csv_err)?;
    let mut rows = 0usize;
    for log in logs {
        let (_, records) = load_diagnostics(log)?;
        let source = log.to_string_lossy();
        for d in records {
            let agent = serde_json::to_value(d.agent)?;
            w.write_record([
                source.to_string(),
                agent.as_str().unwrap_or_default().to_string(),
                d.round.to_string(),
                d.iteration.to_string(),
                d.mean_return.to_string(),
                d.return_std.to_string(),
                d.advantage_std.to_string(),
                d.clip_fraction.to_string(),
                d.mean_ratio.to_string(),
                d.kl.to_string(),
                d.entropy.to_string(),
                d.loss.to_string(),
                d.steps.to_string(),
                d.wall_time_ms.to_string(),
            ])
            .map_err(csv_err)?;
            rows += 1;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    match out {
        Some(p) => {
            write_atomic(&p, &bytes)?;
            summary(json!({ "command": "curves", "logs": logs.len(), "rows": rows, "out": p }));
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("--workers: {e}")))?;
    }
    match cli.command {
        Command::Collect { cfg, out } => collect(&cfg, out),
        Command::Train {
            cfg,
            phase,
            init,
            demos,
            behavior,
        } => train(&cfg, phase, init.as_deref(), demos, behavior),
        Command::Bench { command } => bench(command),
        Command::Curves { logs, out } => curves(&logs, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
