//! `w2v2`: pre-train, fine-tune, probe and account for desk-scale runs.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when a command
//! fails at run time. Failures print one line, `error[<category>]: <detail>`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use w2v2::batch_assembler::{data_seen, DATASET_HOURS};
use w2v2::ctc_finetune::{self, FinetuneConfig};
use w2v2::dataset::{load_manifest, synth_corpus, SynthConfig};
use w2v2::experiment::{experiment_equal_data, Condition, COMPARISON_FILE};
use w2v2::grad_probe::{self, BatchSize};
use w2v2::trainer::{self, Checkpoint, Corpus, FlatConfig, TrainConfig};
use w2v2::{Error, Result, Rng};

/// Environment variable naming the default root for run directories.
const OUT_ENV: &str = "W2V2_OUT";

#[derive(Parser)]
#[command(name = "w2v2", version, about = "Contrastive speech pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pre-training.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "seed", "overrides"])]
        resume: Option<PathBuf>,
    },
    /// CTC fine-tuning from a checkpoint (`init = path`) or from scratch.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Spread of gradients across independent batches at a checkpoint.
    ProbeGradvar(ProbeArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Upper-bound hours and epochs seen by a run.
    DataSeen {
        #[arg(long)]
        batch_seconds: f64,
        #[arg(long)]
        iterations: u64,
        #[arg(long, default_value_t = DATASET_HOURS)]
        dataset_hours: f64,
    },
    /// Generate a synthetic labeled corpus.
    SynthData(SynthArgs),
    /// Validation curves of a finished run as CSV.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train conditions with equal batch_seconds x iterations and compare them.
    EqualData(EqualDataArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` overrides applied after the config file.
    #[arg(value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Batch sizes in seconds.
    #[arg(long, num_args = 1..)]
    seconds: Vec<f64>,
    /// Batch sizes in utterances.
    #[arg(long, num_args = 1..)]
    utterances: Vec<usize>,
    #[arg(long, default_value_t = grad_probe::DEFAULT_BATCHES)]
    batches: usize,
    /// Independent probes per batch size.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Per-utterance report for fine-tuned checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.83)]
    min_seconds: f64,
    #[arg(long, default_value_t = 2.0)]
    max_seconds: f64,
    #[arg(long, default_value = "abcdefgh ")]
    vocab: String,
}

#[derive(Args)]
struct EqualDataArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Conditions as `<batch_seconds>x<iterations>`, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_condition, required = true)]
    pairs: Vec<Condition>,
    /// Fine-tuning config for the end checkpoints; the toy preset by default.
    #[arg(long)]
    finetune_config: Option<PathBuf>,
    /// Compare on validation loss only.
    #[arg(long, conflicts_with = "finetune_config")]
    no_finetune: bool,
}

fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

fn parse_condition(s: &str) -> std::result::Result<Condition, String> {
    let (b, n) = s
        .split_once('x')
        .ok_or_else(|| format!("expected <seconds>x<iterations>, got {s:?}"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad batch seconds in {s:?}"))?;
    let n: u64 = n.trim().parse().map_err(|_| format!("bad iterations in {s:?}"))?;
    Ok(Condition::new(b, n))
}

/// Config file, then overrides, then `--seed`, resolved in one pass so
/// every bad key is reported together.
fn resolve<C: FlatConfig>(run: &RunArgs) -> Result<C> {
    let mut text = match &run.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    for (k, v) in &run.overrides {
        text.push_str(&format!("\n{k} = {v}"));
    }
    if let Some(seed) = run.seed {
        text.push_str(&format!("\nseed = {seed}"));
    }
    C::parse(&text)
}

fn out_dir(run: &RunArgs, command: &str, seed: u64) -> PathBuf {
    run.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("{command}-seed{seed}"))
    })
}

fn corpus(manifest: &Path) -> Result<Corpus> {
    Corpus::from_manifest(&load_manifest(manifest)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { run, resume } => {
            let records = match resume {
                Some(ckpt) => {
                    let dir = run.out.clone().unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
                    trainer::resume(&ckpt, &dir)?
                }
                None => {
                    let cfg: TrainConfig = resolve(&run)?;
                    let dir = out_dir(&run, "pretrain", cfg.seed);
                    println!("run directory: {}", dir.display());
                    trainer::pretrain(&cfg, &dir)?
                }
            };
            if let Some(r) = records.last() {
                println!(
                    "step {}: contrastive {:.4}, accuracy {:.3}, perplexity {:.2}/{:.2}",
                    r.step, r.loss_contrastive, r.accuracy, r.perplexity_1, r.perplexity_2
                );
            }
        }
        Command::Finetune { run } => {
            let cfg: FinetuneConfig = resolve(&run)?;
            let dir = out_dir(&run, "finetune", cfg.seed);
            println!("run directory: {}", dir.display());
            let report = ctc_finetune::finetune(&cfg, &dir)?;
            println!("cer {:.4} wer {:.4}", report.cer, report.wer);
        }
        Command::ProbeGradvar(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let corpus = corpus(&a.manifest)?;
            let mut sizes: Vec<Option<BatchSize>> = a.seconds.iter().map(|&s| Some(BatchSize::Seconds(s))).collect();
            sizes.extend(a.utterances.iter().map(|&u| Some(BatchSize::Utterances(u))));
            if sizes.is_empty() {
                sizes.push(None);
            }
            let mut rng = Rng::new(a.seed);
            let mut reports = Vec::new();
            for size in sizes {
                for _ in 0..a.repeats {
                    let r = grad_probe::probe(&ckpt, &corpus, size, a.batches, &mut rng)?;
                    println!("batch {:.2} s: avg_std {:.6e}", r.batch_seconds, r.avg_std);
                    reports.push(r);
                }
            }
            grad_probe::write_reports(&a.out, &reports)?;
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let corpus = corpus(&a.manifest)?;
            if ckpt.state["kind"] == "finetune" {
                let (model, head, store) = ctc_finetune::load_finetuned(&ckpt)?;
                let report = ctc_finetune::evaluate(&model, &head, &store, &corpus)?;
                if let Some(out) = &a.out {
                    report.write_csv(out)?;
                }
                println!("cer {:.4} wer {:.4}", report.cer, report.wer);
            } else {
                let (cfg, model, store, step) = trainer::load_model(&ckpt)?;
                let r = trainer::evaluate(&model, &store, &corpus, &cfg, Rng::new(a.seed))?;
                println!(
                    "step {step}: contrastive {:.4}, diversity {:.4}, penalty {:.4}, accuracy {:.3}, perplexity {:.2}/{:.2}",
                    r.loss_contrastive, r.loss_diversity, r.loss_penalty, r.accuracy, r.perplexity_1, r.perplexity_2
                );
            }
        }
        Command::DataSeen {
            batch_seconds,
            iterations,
            dataset_hours,
        } => {
            let d = data_seen(batch_seconds, iterations, dataset_hours);
            println!("{:.0} h", d.hours);
            println!("{:.1} epochs", d.epochs);
        }
        Command::SynthData(a) => {
            let cfg = SynthConfig::new(a.seed, a.count, a.min_seconds, a.max_seconds, &a.vocab);
            let m = synth_corpus(&cfg, &a.out)?;
            println!(
                "{} utterances, {:.2} h, manifest {}",
                m.len(),
                m.total_seconds() / 3600.0,
                a.out.join("manifest.tsv").display()
            );
        }
        Command::Report { run_dir, out } => {
            let n = match &out {
                Some(p) => {
                    let f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
                    trainer::write_curves(&run_dir, f)?
                }
                None => trainer::write_curves(&run_dir, io::stdout().lock())?,
            };
            log::info!("{n} validation rows");
        }
        Command::EqualData(a) => {
            let cfg: TrainConfig = resolve(&a.run)?;
            let ft = match (&a.finetune_config, a.no_finetune) {
                (_, true) => None,
                (Some(p), false) => Some(FinetuneConfig::load(p)?),
                (None, false) => Some(FinetuneConfig::toy()),
            };
            let dir = out_dir(&a.run, "equal-data", cfg.seed);
            let rows = experiment_equal_data(&cfg, &a.pairs, ft.as_ref(), &dir)?;
            for r in &rows {
                let cer = r.cer.map_or_else(|| "-".to_string(), |c| format!("{c:.4}"));
                println!(
                    "{:.4} h  {} s x {}: contrastive {:.4}, cer {cer}",
                    r.hours_seen, r.batch_seconds, r.iterations, r.val_contrastive
                );
            }
            println!("table: {}", dir.join(COMPARISON_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(2)
        }
    }
}
