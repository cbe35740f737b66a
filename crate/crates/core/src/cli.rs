//! The `cgz` command-line front end.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{format_table, gamma_trend, run_ablation, write_csv, AblationAxis};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::{export_previews, read_dataset, write_dataset, Generator, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::train::{evaluate, finetune, pretrain, resume_pretraining, Pools};
use crate::verify::{gradient_suite, STEP, TOLERANCE};

#[derive(Debug, Parser)]
#[command(name = "cgz", version, about = "Semi-supervised contrastive regression for gaze estimation")]
pub struct Cli {
    /// TOML run configuration; keys not set keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Only print results, no progress.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Image height and width in pixels.
        #[arg(long, default_value_t = IMAGE_SIZE)]
        size: usize,
        /// Centered eye with nominal size and no rotation.
        #[arg(long)]
        no_jitter: bool,
    },
    /// Contrastive pretraining on the unlabeled split of `data_path`.
    Pretrain(Overrides),
    /// Regressor training on the labeled split of `data_path`.
    Finetune(Overrides),
    /// Mean angular error of `checkpoint_path` on `test_path`.
    Eval(Overrides),
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        instances: usize,
    },
    /// Full pipeline per loss variant or γ, once per ablation seed.
    Ablate {
        #[arg(long, value_enum)]
        axis: AblationAxis,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// 8-bit PNG previews and a labels CSV for `data_path`.
    ExportPreviews {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        limit: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Config overrides, `--key=value`. `--unfreeze` and `--scratch` are
    /// shorthands for `--freeze_encoder=false` and `--scratch=true`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    pub settings: Vec<String>,
}

impl Cli {
    /// Global flags written after the first override land in the override
    /// list; moves them back.
    pub fn hoist_global_flags(&mut self) -> Result<()> {
        let overrides = match &mut self.command {
            Command::Pretrain(o) | Command::Finetune(o) | Command::Eval(o) => o,
            Command::Ablate { overrides, .. } | Command::ExportPreviews { overrides, .. } => overrides,
            Command::GenData { .. } | Command::Gradcheck { .. } => return Ok(()),
        };
        let mut kept = Vec::new();
        let mut it = std::mem::take(&mut overrides.settings).into_iter();
        while let Some(s) = it.next() {
            match s.as_str() {
                "-q" | "--quiet" => self.quiet = true,
                "--config" => {
                    let path = it
                        .next()
                        .ok_or_else(|| Error::InvalidConfig("--config needs a path".into()))?;
                    self.config = Some(path.into());
                }
                _ => match s.strip_prefix("--config=") {
                    Some(path) => self.config = Some(path.into()),
                    None => kept.push(s),
                },
            }
        }
        overrides.settings = kept;
        Ok(())
    }
}

/// Loads the config file (if any), then applies overrides in order.
pub fn resolve_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &overrides.settings {
        match s.as_str() {
            "--unfreeze" => cfg.freeze_encoder = false,
            "--scratch" => cfg.scratch = true,
            _ => cfg.set(s)?,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(value: &'a str, key: &str) -> Result<&'a str> {
    if value.is_empty() {
        Err(Error::InvalidConfig(format!("{key} must be set")))
    } else {
        Ok(value)
    }
}

/// Runs one command, writing results to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::GenData { count, seed, out: path, size, no_jitter } => {
            if *count == 0 {
                return Err(Error::InvalidArgument("count must be >= 1".into()));
            }
            if *size < 4 {
                return Err(Error::InvalidArgument(format!("size must be >= 4, got {size}")));
            }
            let gen = Generator {
                jitter: !no_jitter,
                size: *size,
            };
            write_dataset(path, &gen.dataset(*count, *seed))?;
            writeln!(out, "wrote {count} samples to {}", path.display())?;
        }
        Command::Pretrain(o) => {
            let cfg = resolve_config(config, o)?;
            let dest = required(&cfg.checkpoint_path, "checkpoint_path")?;
            let train = read_dataset(&cfg.data_path)?;
            let unlabeled = Pools::new(&train, &cfg)?.unlabeled();
            let ckpt = if cfg.resume_path.is_empty() {
                pretrain(&unlabeled, &cfg)?
            } else {
                let ckpt = load_checkpoint(&cfg.resume_path)?;
                resume_pretraining(ckpt, &unlabeled, cfg.pretrain_epochs)?
            };
            save_checkpoint(dest, &ckpt)?;
            let last = ckpt.loss_history.last().copied().unwrap_or(f64::NAN);
            writeln!(out, "pretrained {} epochs, final loss {last:.6}, saved {dest}", ckpt.epoch)?;
        }
        Command::Finetune(o) => {
            let cfg = resolve_config(config, o)?;
            let dest = required(&cfg.checkpoint_path, "checkpoint_path")?;
            let init = if cfg.scratch {
                None
            } else {
                let ckpt = load_checkpoint(required(&cfg.init_path, "init_path")?)?;
                ckpt.expect_stage(Stage::Pretrained)?;
                Some(ckpt)
            };
            let train = read_dataset(&cfg.data_path)?;
            let labeled = Pools::new(&train, &cfg)?.labeled();
            let ckpt = finetune(&labeled, init.as_ref(), &cfg)?;
            save_checkpoint(dest, &ckpt)?;
            let last = ckpt.loss_history.last().copied().unwrap_or(f64::NAN);
            writeln!(
                out,
                "fine-tuned {} epochs on {} labeled samples, final loss {last:.6}, saved {dest}",
                ckpt.epoch,
                labeled.len()
            )?;
        }
        Command::Eval(o) => {
            let cfg = resolve_config(config, o)?;
            let ckpt = load_checkpoint(required(&cfg.checkpoint_path, "checkpoint_path")?)?;
            let test = read_dataset(&cfg.test_path)?;
            writeln!(out, "MAE: {:.4} deg", evaluate(&ckpt, &test)?)?;
        }
        Command::Gradcheck { seed, instances } => {
            if *instances == 0 {
                return Err(Error::InvalidArgument("instances must be >= 1".into()));
            }
            let entries = gradient_suite(*instances, *seed)?;
            let width = entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
            let mut failed = Vec::new();
            for e in &entries {
                let status = if e.passed() { "PASS" } else { "FAIL" };
                write!(out, "{status}  {:<width$}  max error {:.3e}", e.name, e.max_error())?;
                match e.redraws {
                    0 => writeln!(out)?,
                    n => writeln!(out, "  ({n} ill-conditioned draws skipped)")?,
                }
                if !e.passed() {
                    failed.push(e.name);
                }
            }
            writeln!(
                out,
                "{} of {} checks passed ({instances} instances each, h = {STEP:e}, tolerance {TOLERANCE:e})",
                entries.len() - failed.len(),
                entries.len()
            )?;
            if !failed.is_empty() {
                return Err(Error::Gradcheck(failed.join(", ")));
            }
        }
        Command::Ablate { axis, overrides } => {
            let cfg = resolve_config(config, overrides)?;
            let train = read_dataset(&cfg.data_path)?;
            let test = read_dataset(&cfg.test_path)?;
            let rows = run_ablation(&train, &test, &cfg, *axis)?;
            write!(out, "{}", format_table(&rows))?;
            if *axis == AblationAxis::Gamma {
                if let Some(trend) = gamma_trend(&rows) {
                    writeln!(out, "gamma trend (median MAE as gamma grows): {trend:?}")?;
                }
            }
            if cfg.output_path.is_empty() {
                writeln!(out)?;
                write_csv(&mut *out, &rows)?;
            } else {
                write_csv(File::create(&cfg.output_path)?, &rows)?;
                writeln!(out, "wrote {}", cfg.output_path)?;
            }
        }
        Command::ExportPreviews { out: dir, limit, overrides } => {
            let cfg = resolve_config(config, overrides)?;
            let samples = read_dataset(&cfg.data_path)?;
            let n = samples.len().min(*limit);
            std::fs::create_dir_all(dir)?;
            export_previews(dir, &samples[..n])?;
            writeln!(out, "exported {n} previews to {}", dir.display())?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let mut cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = cli.hoist_global_flags() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    if !cli.quiet {
        init_logging();
    }
    let stdout = io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata<'_>) -> bool {
        metadata.level() <= log::Level::Info
    }

    fn log(&self, record: &log::Record<'_>) {
        if self.enabled(record.metadata()) {
            eprintln!("{}", record.args());
        }
    }

    fn flush(&self) {}
}

fn init_logging() {
    static LOGGER: StderrLogger = StderrLogger;
    if log::set_logger(&LOGGER).is_ok() {
        log::set_max_level(log::LevelFilter::Info);
    }
}
