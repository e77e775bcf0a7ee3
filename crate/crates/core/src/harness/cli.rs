use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use super::config::{InitSpec, Precision, RunConfig, TaskKind};
use super::data::{export_splits, load_splits};
use super::run::{load_init, run_cam, run_eval, run_finetune, run_pretrain};
use super::sweep::{run_sweep, summarize, write_results, write_summary};
use crate::cam::render_heatmap;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::tensor::Real;
use crate::train::write_log_csv;
use crate::weights::WeightFile;

#[derive(Debug, Parser)]
#[command(name = "timnet", version, about = "Text-image matching pre-training and label-efficient fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Schedule {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic splits in the corpus export layout.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the matching network on paired images and reports.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: Schedule,
    },
    /// Fine-tune an image classifier on a fraction of the labeled split.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long)]
        task: Option<TaskKind>,
        /// `scratch` or `pretrained:<weight file>`.
        #[arg(long)]
        init: Option<InitSpec>,
        #[arg(long)]
        fraction: Option<f64>,
        /// Keep the feature extractor fixed.
        #[arg(long)]
        freeze: bool,
    },
    /// Print test metrics of a saved model as one CSV row.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Write a class activation heatmap next to the input image.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        weights: PathBuf,
        /// Grayscale PGM input.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1)]
        class: usize,
        /// Report text for a matching heatmap (task `match`).
        #[arg(long)]
        text: Option<String>,
    },
    /// Fine-tune every (fraction, seed, init) cell and summarize.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long)]
        task: Option<TaskKind>,
        /// Matcher weights for the pretrained arm; trained first when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        inits: Option<Vec<String>>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Cam { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }

    /// Effective configuration: file (or defaults), then flag overrides.
    fn config(&self) -> Result<RunConfig> {
        let c = self.common();
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        match self {
            Command::GenData { .. } => {}
            Command::Pretrain { schedule, .. } => {
                apply_schedule(schedule, &mut cfg.pretrain.epochs, &mut cfg.pretrain.batch_size);
            }
            Command::Finetune {
                schedule,
                task,
                init,
                fraction,
                freeze,
                ..
            } => {
                apply_schedule(schedule, &mut cfg.finetune.epochs, &mut cfg.finetune.batch_size);
                override_opt(&mut cfg.task, task);
                override_opt(&mut cfg.init, init);
                override_opt(&mut cfg.fraction, fraction);
                cfg.finetune.freeze_extractor |= freeze;
            }
            Command::Eval { task, .. } | Command::Cam { task, .. } => override_opt(&mut cfg.task, task),
            Command::Sweep {
                schedule,
                task,
                fractions,
                seeds,
                inits,
                ..
            } => {
                apply_schedule(schedule, &mut cfg.finetune.epochs, &mut cfg.finetune.batch_size);
                override_opt(&mut cfg.task, task);
                override_opt(&mut cfg.sweep.fractions, fractions);
                override_opt(&mut cfg.sweep.seeds, seeds);
                override_opt(&mut cfg.sweep.inits, inits);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn override_opt<V: Clone>(dst: &mut V, src: &Option<V>) {
    if let Some(v) = src {
        *dst = v.clone();
    }
}

fn apply_schedule(s: &Schedule, epochs: &mut usize, batch: &mut usize) {
    override_opt(epochs, &s.epochs);
    override_opt(batch, &s.batch_size);
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code: 0 on success, 2 for usage or configuration errors,
/// 1 for anything else.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = cli.command.config().and_then(|cfg| {
        let dir = cfg.out.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let echo = cfg.to_json();
        eprint!("effective config:\n{echo}");
        write_file(&dir.join("config.json"), echo.as_bytes())?;
        match cfg.precision {
            Precision::F32 => execute::<f32>(&cli.command, &cfg),
            Precision::F64 => execute::<f64>(&cli.command, &cfg),
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn metrics_csv(r: &MetricReport) -> String {
    format!("acc,auroc,f1,prec,recall,ap,n\n{},{}\n", r.csv_cells().join(","), r.n_samples)
}

fn execute<T: Real>(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    let out = &cfg.out;
    let splits = load_splits(cfg)?;
    match cmd {
        Command::GenData { .. } => {
            export_splits(cfg, &splits, out)?;
            info!("wrote corpus splits under {}", out.display());
        }
        Command::Pretrain { .. } => {
            let p = run_pretrain::<T>(cfg, &splits)?;
            WeightFile::from_store(&p.net.store).save(&out.join("matcher.timw"))?;
            write_log_csv(&out.join("pretrain_log.csv"), &p.log)?;
            write_file(&out.join("vocab.tsv"), splits.vocab.to_tsv().as_bytes())?;
            write_file(&out.join("val_metrics.csv"), metrics_csv(&p.val).as_bytes())?;
            print!("{}", metrics_csv(&p.val));
        }
        Command::Finetune { .. } => {
            let weights = load_init(&cfg.init)?;
            let f = run_finetune::<T>(cfg, &splits, weights.as_ref(), cfg.fraction, cfg.seed)?;
            WeightFile::from_store(&f.model.store).save(&out.join("downstream.timw"))?;
            write_log_csv(&out.join("finetune_log.csv"), &f.log)?;
            write_file(&out.join("test_metrics.csv"), metrics_csv(&f.test).as_bytes())?;
            if let Some(r) = &f.load {
                let json = serde_json::json!({ "loaded": r.loaded, "fresh": r.fresh, "ignored": r.ignored });
                write_file(&out.join("load_report.json"), (serde_json::to_string_pretty(&json)? + "\n").as_bytes())?;
            }
            print!("{}", metrics_csv(&f.test));
        }
        Command::Eval { weights, .. } => {
            let r = run_eval::<T>(cfg, &splits, &WeightFile::load(weights)?)?;
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(metrics_csv(&r).as_bytes());
        }
        Command::Cam {
            weights,
            image,
            class,
            text,
            ..
        } => {
            let (heat, gray) = run_cam::<T>(cfg, &splits, &WeightFile::load(weights)?, image, *class, text.as_deref())?;
            let path = out.join("cam.pgm");
            render_heatmap(&heat, &gray, &path)?;
            eprintln!(
                "class {} raw range [{}, {}] -> {}",
                heat.source_class,
                heat.raw_min,
                heat.raw_max,
                path.display()
            );
        }
        Command::Sweep { weights, .. } => {
            let needs_pretrained = cfg.sweep.inits.iter().any(|i| i == "pretrained");
            let file = match (weights, needs_pretrained) {
                (_, false) => None,
                (Some(p), true) => Some(WeightFile::load(p)?),
                (None, true) => {
                    info!("no matcher weights given; pre-training first");
                    let p = run_pretrain::<T>(cfg, &splits)?;
                    write_log_csv(&out.join("pretrain_log.csv"), &p.log)?;
                    let f = WeightFile::from_store(&p.net.store);
                    f.save(&out.join("matcher.timw"))?;
                    Some(f)
                }
            };
            let rows = run_sweep::<T>(cfg, &splits, file.as_ref())?;
            write_results(&out.join("sweep_results.csv"), &rows)?;
            let summary = summarize(&rows);
            write_summary(&out.join("sweep_summary.json"), &summary)?;
            if let Some(r) = &summary.label_reduction {
                println!(
                    "label reduction {:.4}: pretrained at {} reaches best scratch accuracy {:.4} (fraction {})",
                    r.reduction, r.pretrained_fraction, r.best_scratch_acc, r.best_scratch_fraction
                );
            }
        }
    }
    Ok(())
}
