//! `dpiqa` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpiqa::config::RunConfig;
use dpiqa::pipeline;
use dpiqa::Error;

#[derive(Parser, Debug)]
#[command(
    name = "dpiqa",
    version,
    about = "Diffusion-prior image quality assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Config file in `key = value` form; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set teacher.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset manifest (`data.manifest`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (`output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed (`seeds.train`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the teacher on the repeated split protocol.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of splits to run, 1 to 5.
        #[arg(long, default_value_t = 5)]
        splits: usize,
    },
    /// Distill a student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Score images with a teacher or student checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the JSON report.
        #[arg(long, default_value = "predictions.json")]
        json: PathBuf,
        /// Also write a saliency PNG per image beside the JSON report.
        #[arg(long)]
        saliency: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate a checkpoint on the split protocol, or zero-shot on a second
    /// manifest.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second dataset for cross-dataset evaluation.
        #[arg(long)]
        cross: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write gradient saliency maps.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Print the effective configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_config(a: &ConfigArgs) -> dpiqa::Result<RunConfig> {
    let mut overrides = Vec::new();
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    let flag = |k: &str, v: String| (k.to_string(), v);
    if let Some(m) = &a.manifest {
        overrides.push(flag("data.manifest", m.display().to_string()));
    }
    if let Some(o) = &a.out {
        overrides.push(flag("output.dir", o.display().to_string()));
    }
    if let Some(s) = a.seed {
        overrides.push(flag("seeds.train", s.to_string()));
    }
    if let Some(p) = &a.config {
        if !p.is_file() {
            return Err(Error::Config(format!(
                "--config: {} does not exist",
                p.display()
            )));
        }
    }
    RunConfig::load(a.config.as_deref(), std::env::vars(), &overrides)
}

fn write(path: &Path, text: &str) -> dpiqa::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> dpiqa::Result<ExitCode> {
    match cli.command {
        Command::TrainTeacher { cfg, splits } => {
            let cfg = load_config(&cfg)?;
            let r = pipeline::train_teacher_splits(&cfg, splits)?;
            println!("{}", pipeline::to_json(&r)?);
        }
        Command::Distill { cfg, teacher } => {
            let cfg = load_config(&cfg)?;
            let r = pipeline::distill(&cfg, &teacher)?;
            println!("{}", pipeline::to_json(&r)?);
        }
        Command::Predict {
            checkpoint,
            json,
            saliency,
            images,
        } => {
            let loaded = pipeline::load_checkpoint(&checkpoint)?;
            let dir = json
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf();
            let r = pipeline::predict(&loaded, &images, saliency.then_some(dir.as_path()))?;
            write(&json, &pipeline::to_json(&r)?)?;
            for p in &r.predictions {
                match (&p.score, &p.error) {
                    (Some(s), _) => println!("{s:.6}\t{}", p.image.display()),
                    (None, Some(e)) => {
                        println!("error\t{}", p.image.display());
                        log::error!("{}: {e}", p.image.display());
                    }
                    _ => {}
                }
            }
            if r.failures() == r.predictions.len() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval {
            cfg,
            checkpoint,
            cross,
            json,
        } => {
            let cfg = load_config(&cfg)?;
            let manifest = cfg.require_manifest()?.to_path_buf();
            let cross = cross.or_else(|| cfg.cross_manifest.clone());
            let loaded = pipeline::load_checkpoint(&checkpoint)?;
            let r = pipeline::evaluate(&loaded, &cfg, &manifest, cross.as_deref())?;
            let text = r.to_json()?;
            if let Some(p) = json {
                write(&p, &text)?;
            }
            println!("{text}");
        }
        Command::Saliency {
            checkpoint,
            out,
            images,
        } => {
            let loaded = pipeline::load_checkpoint(&checkpoint)?;
            let r = pipeline::saliency(&loaded, &images, &out)?;
            println!("{}", pipeline::to_json(&r)?);
        }
        Command::Config { cfg } => {
            print!("{}", load_config(&cfg)?.to_kv());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
