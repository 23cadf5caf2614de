//! The `advclr` command-line driver.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attack::ModelView;
use crate::check::{model_grad_check, random_check_case};
use crate::config::{Overrides, RunConfig};
use crate::error::{Error, ErrorCategory, Result};
use crate::eval::{clean_accuracy, eval_table, ReportDocument};
use crate::model::{read_checkpoint, write_checkpoint};
use crate::train::{act_pretrain, finetune, train_supervised, EpochRecord, Hooks};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

/// Gradient-check tolerance on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Config => EXIT_CONFIG,
        ErrorCategory::Data => EXIT_DATA,
        ErrorCategory::Numeric => EXIT_NUMERIC,
        ErrorCategory::Io => EXIT_IO,
    }
}

#[derive(Debug, Parser)]
#[command(name = "advclr", version, about = "Adversarial contrastive pretraining and robustness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the data directory (takes precedence over ADVCLR_DATA_DIR).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Write artifacts here instead of a fresh directory under output_dir.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the configured datasets and check their invariants.
    IngestCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Adversarial contrastive pretraining (or the cross-entropy baseline).
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Train the end-to-end cross-entropy baseline instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Train the linear classifier on top of a frozen encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Clean and robust accuracy for one or more models.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model as `ID=PATH` or just `PATH`; repeatable.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        /// Comma-separated ε values, e.g. `0,0.03`.
        #[arg(long, value_delimiter = ',')]
        epsilon: Option<Vec<f32>>,
    },
    /// Compare analytic gradients against finite differences on small
    /// random networks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random networks of each kind.
        #[arg(long, default_value_t = 1)]
        cases: u64,
    },
    /// Print report files as a table.
    Report {
        /// Report JSON files or run directories.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Print the CSV projection instead.
        #[arg(long)]
        csv: bool,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(e.category());
            eprintln!("error [{:?}]: {e}", e.category());
            code
        }
    }
}

fn load_config(common: &Common, pretrain_epochs: Option<usize>, finetune_epochs: Option<usize>, eps: Option<Vec<f32>>) -> Result<RunConfig> {
    let ov = Overrides {
        seed: common.seed,
        data_dir: common.data_dir.clone(),
        pretrain_epochs,
        finetune_epochs,
        epsilons: eps,
    };
    RunConfig::load(&common.config, &ov)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `<output_dir>/<stage>-<config hash>-<UTC timestamp>`, unless overridden.
fn run_dir(common: &Common, cfg: &RunConfig, stage: &str) -> Result<PathBuf> {
    let dir = match &common.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            let base = cfg.output_dir.join(format!("{stage}-{}-{stamp}", cfg.hash()));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    create_dir(&dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json()).map_err(|e| Error::io(&dir.join("config.json"), e))?;
    Ok(dir)
}

fn print_epoch(r: &EpochRecord) {
    eprintln!("epoch {:>3}  loss {:.5}  lr {:.5}  {:.1}s", r.epoch, r.loss, r.lr, r.seconds);
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::IngestCheck { common } => {
            let cfg = load_config(&common, None, None, None)?;
            let (train, test) = cfg.load_datasets()?;
            for (name, d) in [("train", &train), ("test", &test)] {
                let counts = d.class_counts();
                if counts.iter().sum::<usize>() != d.len() {
                    return Err(Error::invalid(format!("{name}: label counts do not sum to the dataset size")));
                }
                let (lo, hi) = d
                    .pixels()
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                println!(
                    "{name}: {} images of shape {:?}, {} classes, pixel range [{lo}, {hi}], per class {:?}",
                    d.len(),
                    d.image_shape(),
                    d.num_classes(),
                    counts
                );
            }
            println!("ok");
            Ok(())
        }
        Command::Pretrain { common, epochs, baseline } => {
            let cfg = load_config(&common, epochs, None, None)?;
            let spec = cfg.encoder_spec()?;
            let (train, _) = cfg.load_datasets()?;
            let stage = if baseline { "baseline" } else { "pretrain" };
            let dir = run_dir(&common, &cfg, stage)?;
            let mut cb = print_epoch;
            let hooks = Hooks {
                checkpoint_dir: Some(&dir),
                on_epoch: Some(&mut cb),
            };
            let out = if baseline {
                train_supervised(&train, &spec, &cfg.baseline_config()?, hooks)?
            } else {
                act_pretrain(&train, &spec, &cfg.pretrain_config()?, hooks)?
            };
            let mut ckpt = out.checkpoint(stage);
            ckpt.metadata.insert("seed".into(), cfg.seed.to_string());
            ckpt.metadata.insert("config_hash".into(), cfg.hash());
            let path = dir.join("checkpoint.ckpt");
            write_checkpoint(&path, &ckpt)?;
            out.log.write(&dir.join("train_log.jsonl"))?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Finetune { common, checkpoint, epochs } => {
            let cfg = load_config(&common, None, epochs, None)?;
            let ft = cfg.finetune_config()?;
            let (train, _) = cfg.load_datasets()?;
            let pre = read_checkpoint(&checkpoint)?;
            let dir = run_dir(&common, &cfg, "finetune")?;
            let mut cb = print_epoch;
            let out = finetune(
                &train,
                &pre.params,
                &ft,
                Hooks {
                    checkpoint_dir: None,
                    on_epoch: Some(&mut cb),
                },
            )?;
            let mut ckpt = out.checkpoint("finetune");
            ckpt.metadata.extend(pre.metadata.into_iter().map(|(k, v)| (format!("source.{k}"), v)));
            ckpt.metadata.insert("seed".into(), cfg.seed.to_string());
            let path = dir.join("checkpoint.ckpt");
            write_checkpoint(&path, &ckpt)?;
            out.log.write(&dir.join("finetune_log.jsonl"))?;
            let acc = clean_accuracy(&ModelView::eval(&out.params), &train)?;
            eprintln!("train accuracy {:.2}%", 100.0 * acc);
            println!("{}", path.display());
            Ok(())
        }
        Command::Evaluate { common, models, epsilon } => {
            let cfg = load_config(&common, None, None, epsilon)?;
            let (_, test) = cfg.load_datasets()?;
            let test = match cfg.eval.limit {
                Some(n) => test.take(n),
                None => test,
            };
            let mut loaded = Vec::with_capacity(models.len());
            for m in &models {
                let (id, path) = match m.split_once('=') {
                    Some((id, p)) => (id.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(m);
                        let id = p
                            .parent()
                            .and_then(|d| d.file_name())
                            .or(p.file_stem())
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| m.clone());
                        (id, p)
                    }
                };
                loaded.push((id, read_checkpoint(&path)?.params));
            }
            let refs: Vec<(&str, &_)> = loaded.iter().map(|(id, p)| (id.as_str(), p)).collect();
            let reports = eval_table(&refs, &cfg.eval.attacks, &cfg.eval.epsilons, &test, cfg.seed)?;
            let doc = ReportDocument::new(reports);
            let dir = run_dir(&common, &cfg, "evaluate")?;
            doc.write(&dir.join("report.json"))?;
            let csv_path = dir.join("report.csv");
            std::fs::write(&csv_path, doc.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
            eprint!("{}", doc.render_table());
            println!("{}", dir.join("report.json").display());
            Ok(())
        }
        Command::Gradcheck { seed, cases } => {
            let mut worst: f64 = 0.0;
            for case in 0..cases {
                for residual in [false, true] {
                    let (p, x, y) = random_check_case(seed.wrapping_add(case), residual)?;
                    let report = model_grad_check(&p, &x, &y, 1e-5)?;
                    let kind = if residual { "resnet_small" } else { "toy_conv" };
                    for r in &report {
                        println!("{kind:<13} case {case}  {:<32} n={:<5} max_rel_err {:.3e}", r.name, r.len, r.max_rel_err);
                        worst = worst.max(r.max_rel_err);
                    }
                }
            }
            println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
            if worst <= GRADCHECK_TOLERANCE {
                println!("PASS");
                Ok(())
            } else {
                println!("FAIL");
                Err(Error::CheckFailed(format!(
                    "max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}"
                )))
            }
        }
        Command::Report { paths, csv } => {
            for p in paths {
                let file = if p.is_dir() { p.join("report.json") } else { p };
                let doc = ReportDocument::read(&file)?;
                if csv {
                    print!("{}", doc.to_csv());
                } else {
                    print!("{}", doc.render_table());
                }
            }
            Ok(())
        }
    }
}
