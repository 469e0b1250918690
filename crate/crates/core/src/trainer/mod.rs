//! Self-supervised pre-training: gradient accumulation over gpu-batches,
//! cyclic learning rate, periodic validation and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod schedule;

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use checkpoint::Checkpoint;
pub use config::{FlatConfig, TrainConfig};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{lr_heuristic, CyclicLr, LrKind};

use crate::batch_assembler::{
    pad_and_collate, seconds, BatchAssembler, Collated, DataSeenLedger, GpuBatch,
};
use crate::dataset::{load_manifest, split_validation, Manifest};
use crate::error::{Error, Result};
use crate::model::{SslOptions, Wav2Vec2};
use crate::numerics::{Graph, Rng, Tensor};
use crate::params::ParamStore;
use crate::quantizer::{codebook_similarity_stats, Selection, SimilarityStats};
use crate::ssl_objective::{self, LossBreakdown};

// Labels of the independent random streams derived from the run seed.
const STREAM_INIT: u64 = 11;
const STREAM_BATCHES: u64 = 12;
const STREAM_STEPS: u64 = 13;
const STREAM_VALID: u64 = 14;
const STREAM_SPLIT: u64 = 15;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const CONFIG_FILE: &str = "config.cfg";

/// Decoded audio held in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub ids: Vec<String>,
    pub audio: Vec<Vec<f64>>,
    pub transcripts: Vec<Option<String>>,
}

impl Corpus {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Ok(Corpus {
            ids: m.entries.iter().map(|u| u.id.clone()).collect(),
            audio: m.load_audio()?,
            transcripts: m.entries.iter().map(|u| u.transcript.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.audio.iter().map(Vec::len).collect()
    }

    pub fn collate(&self, members: &[usize]) -> Result<Collated> {
        let utts: Vec<(String, Vec<f64>)> = members
            .iter()
            .map(|&i| (self.ids[i].clone(), self.audio[i].clone()))
            .collect();
        pad_and_collate(&utts)
    }

    /// Deterministic batches: ascending length, consecutive, each capped at
    /// `cap_seconds` of speech (a single longer utterance forms its own batch).
    pub fn sequential_batches(&self, cap_seconds: f64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| (self.audio[i].len(), i));
        let mut out: Vec<Vec<usize>> = Vec::new();
        let mut total = 0.0;
        for i in order {
            let s = seconds(self.audio[i].len());
            match out.last_mut() {
                Some(b) if total + s <= cap_seconds => {
                    b.push(i);
                    total += s;
                }
                _ => {
                    out.push(vec![i]);
                    total = s;
                }
            }
        }
        out
    }
}

/// One row of validation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Contrastive loss per masked step.
    pub loss_contrastive: f64,
    /// Diversity loss averaged over validation batches.
    pub loss_diversity: f64,
    /// Feature penalty averaged over utterances.
    pub loss_penalty: f64,
    pub loss_total: f64,
    pub accuracy: f64,
    pub perplexity_1: f64,
    pub perplexity_2: f64,
    pub sim1_avg: f64,
    pub sim1_min: f64,
    pub sim1_max: f64,
    pub sim2_avg: f64,
    pub sim2_min: f64,
    pub sim2_max: f64,
    pub masked_steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub hours_upper: f64,
    pub hours_measured: f64,
}

/// Which validation loss ranks checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectOn {
    Ssl,
    Contrastive,
}

impl SelectOn {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssl" => Ok(SelectOn::Ssl),
            "contrastive" => Ok(SelectOn::Contrastive),
            _ => Err(Error::InvalidArgument(format!("unknown selection criterion {s:?}"))),
        }
    }
}

/// Index of the record with the lowest validation loss; ties go to the earliest.
pub fn select_best(records: &[MetricRecord], on: SelectOn) -> Result<usize> {
    let key = |r: &MetricRecord| match on {
        SelectOn::Ssl => r.loss_total,
        SelectOn::Contrastive => r.loss_contrastive,
    };
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if best.is_none_or(|b| key(r) < key(&records[b])) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no validation records to select from".into()))
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt-{step:07}.w2vm"))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Validation curves of a finished run in plotting order: losses,
/// accuracy, perplexities and codeword similarity against data seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub hours_seen: f64,
    pub loss_total: f64,
    pub loss_contrastive: f64,
    pub loss_diversity: f64,
    pub loss_penalty: f64,
    pub accuracy: f64,
    pub perplexity_1: f64,
    pub perplexity_2: f64,
    pub sim1_avg: f64,
    pub sim1_min: f64,
    pub sim1_max: f64,
    pub sim2_avg: f64,
    pub sim2_min: f64,
    pub sim2_max: f64,
}

impl From<&MetricRecord> for CurveRow {
    fn from(r: &MetricRecord) -> Self {
        CurveRow {
            step: r.step,
            hours_seen: r.hours_upper,
            loss_total: r.loss_total,
            loss_contrastive: r.loss_contrastive,
            loss_diversity: r.loss_diversity,
            loss_penalty: r.loss_penalty,
            accuracy: r.accuracy,
            perplexity_1: r.perplexity_1,
            perplexity_2: r.perplexity_2,
            sim1_avg: r.sim1_avg,
            sim1_min: r.sim1_min,
            sim1_max: r.sim1_max,
            sim2_avg: r.sim2_avg,
            sim2_min: r.sim2_min,
            sim2_max: r.sim2_max,
        }
    }
}

/// Read `run_dir/metrics.csv` and write its curves to `out`. Nothing in
/// `run_dir` is modified.
pub fn write_curves<W: std::io::Write>(run_dir: &Path, out: W) -> Result<usize> {
    let records = read_metrics(&run_dir.join(METRICS_FILE))?;
    let mut w = csv::Writer::from_writer(out);
    for r in &records {
        w.serialize(CurveRow::from(r))?;
    }
    w.flush().map_err(|e| Error::io(run_dir, e))?;
    Ok(records.len())
}

/// Append `rows` to a CSV file, writing the header if the file is new.
pub fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loss values of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub breakdown: LossBreakdown,
    pub batches: Vec<GpuBatch>,
}

/// Gradient of the self-supervised loss of one batch, in store order.
pub fn batch_gradient(
    model: &Wav2Vec2,
    store: &ParamStore,
    batch: &Collated,
    rngs: &[Rng],
    opts: &SslOptions,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| true);
    let out = model.ssl_forward(&mut g, &b, batch, rngs, opts)?;
    let mut grads = g.backward(out.loss);
    Ok((store.collect_grads(&mut grads, &b), out.breakdown))
}

/// Random stream for the `position`-th utterance of optimizer step `step`.
pub fn utterance_rng(seed: u64, step: u64, position: usize) -> Rng {
    Rng::with_stream(seed, STREAM_STEPS).derive(step).derive(position as u64)
}

/// Full pre-training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Wav2Vec2,
    pub store: ParamStore,
    pub opt: AdamW,
    pub step: u64,
    pub assembler: BatchAssembler,
    pub ledger: DataSeenLedger,
    train: Corpus,
    val: Corpus,
    lr: CyclicLr,
    tau: crate::quantizer::TempSchedule,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train: Corpus, val: Corpus) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::new(cfg.seed).derive(STREAM_INIT);
        let model = Wav2Vec2::init(&cfg.model(), &mut store, &mut rng);
        let opt = AdamW::new(cfg.adam(), &store);
        Self::assemble(cfg, model, store, opt, train, val)
    }

    fn assemble(
        cfg: TrainConfig,
        model: Wav2Vec2,
        store: ParamStore,
        opt: AdamW,
        train: Corpus,
        val: Corpus,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        let assembler = BatchAssembler::with_bin_size(
            train.lengths(),
            cfg.gpu_batch_seconds(),
            cfg.bin_size,
            Rng::new(cfg.seed).derive(STREAM_BATCHES),
        )?;
        Ok(Trainer {
            ledger: DataSeenLedger::new(cfg.batch_seconds, train.len()),
            lr: cfg.lr_schedule(),
            tau: cfg.tau_schedule(),
            cfg,
            model,
            store,
            opt,
            step: 0,
            assembler,
            train,
            val,
        })
    }

    pub fn train_corpus(&self) -> &Corpus {
        &self.train
    }

    pub fn val_corpus(&self) -> &Corpus {
        &self.val
    }

    pub fn train_options(&self, tau: f64) -> SslOptions {
        SslOptions {
            mask_prob: self.cfg.mask_prob,
            mask_span: self.cfg.mask_span,
            distractors: self.cfg.distractors,
            tau,
            selection: Selection::Gumbel,
            dropout: self.cfg.dropout,
        }
    }

    /// One optimizer step over `gpu_batches` accumulated batches.
    pub fn step(&mut self) -> Result<StepStats> {
        let lr = self.lr.at(self.step);
        let tau = self.tau.at(self.step);
        let opts = self.train_options(tau);
        let batches: Vec<GpuBatch> = (0..self.cfg.gpu_batches).map(|_| self.assembler.next_batch()).collect();
        let mut sum: Option<Vec<Tensor>> = None;
        let mut total = LossBreakdown::default();
        let mut position = 0;
        for batch in &batches {
            let collated = self.train.collate(&batch.members)?;
            let rngs: Vec<Rng> = (0..batch.members.len())
                .map(|i| utterance_rng(self.cfg.seed, self.step, position + i))
                .collect();
            position += batch.members.len();
            let (grads, bd) = batch_gradient(&self.model, &self.store, &collated, &rngs, &opts)?;
            if !bd.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: self.step,
                    message: format!("loss {} with non-finite values", bd.total),
                });
            }
            merge(&mut total, &bd);
            let mut grads = grads;
            if self.cfg.grad_normalization == "masked_steps" && bd.masked_steps > 0 {
                let c = 1.0 / bd.masked_steps as f64;
                for g in &mut grads {
                    g.scale_assign(c);
                }
            }
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let mut grads = sum.expect("at least one gpu-batch");
        let a = self.cfg.gpu_batches as f64;
        for g in &mut grads {
            *g = g.map(|x| x / a);
        }
        self.opt.step(&mut self.store, &grads, lr, |_| true);
        self.ledger.record(&batches);
        let stats = StepStats {
            step: self.step,
            lr,
            tau,
            breakdown: total,
            batches,
        };
        self.step += 1;
        Ok(stats)
    }

    /// Validation metrics for the current parameters; no dropout, noise-free
    /// code selection and masks that are identical at every evaluation.
    pub fn validate(&self) -> Result<MetricRecord> {
        let corpus = if self.val.is_empty() { &self.train } else { &self.val };
        let mut rec = evaluate(
            &self.model,
            &self.store,
            corpus,
            &self.cfg,
            Rng::new(self.cfg.seed).derive(STREAM_VALID),
        )?;
        rec.step = self.step;
        rec.lr = self.lr.at(self.step);
        rec.tau = self.tau.at(self.step);
        rec.hours_upper = self.ledger.upper_bound_seconds() / 3600.0;
        rec.hours_measured = self.ledger.measured_seconds / 3600.0;
        Ok(rec)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint {
            config: serde_json::to_value(&self.cfg)?,
            state: json!({
                "kind": "pretrain",
                "step": self.step,
                "assembler": self.assembler,
                "ledger": self.ledger,
                "adam_steps": self.opt.steps,
            }),
            tensors: Vec::new(),
        };
        c.push_store("param.", &self.store);
        for (prefix, ts) in [("adam.m.", &self.opt.m), ("adam.v.", &self.opt.v)] {
            for (id, t) in self.store.ids().zip(ts) {
                c.tensors.push((format!("{prefix}{}", self.store.name(id)), t.clone()));
            }
        }
        Ok(c)
    }

    /// Rebuild the full training state from a checkpoint.
    pub fn from_checkpoint(c: &Checkpoint, train: Corpus, val: Corpus) -> Result<Self> {
        let (cfg, model, store, _) = load_model(c)?;
        let mut opt = AdamW::new(cfg.adam(), &store);
        for (prefix, ts) in [("adam.m.", &mut opt.m), ("adam.v.", &mut opt.v)] {
            let moments = c.store_with_prefix(prefix);
            for (id, slot) in store.ids().zip(ts.iter_mut()) {
                let name = store.name(id);
                *slot = moments
                    .by_name(name)
                    .filter(|t| t.shape() == store.get(id).shape())
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment {prefix}{name}")))?
                    .clone();
            }
        }
        let state = &c.state;
        opt.steps = serde_json::from_value(state["adam_steps"].clone())?;
        let mut t = Self::assemble(cfg, model, store, opt, train, val)?;
        t.step = serde_json::from_value(state["step"].clone())?;
        t.assembler = serde_json::from_value(state["assembler"].clone())?;
        t.ledger = serde_json::from_value(state["ledger"].clone())?;
        if t.assembler.lengths() != t.train.lengths().as_slice() {
            return Err(Error::Checkpoint("training corpus differs from the one in the checkpoint".into()));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Train until `iterations`, validating and checkpointing every
    /// `val_interval` steps. On a non-finite loss a `diverged.w2vm`
    /// checkpoint is written and the error returned.
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<MetricRecord>> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let cfg_path = out_dir.join(CONFIG_FILE);
        fs::write(&cfg_path, self.cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
        let metrics = out_dir.join(METRICS_FILE);
        let mut records = Vec::new();
        let mut ledger_written = self.ledger.rows().len();
        while self.step < self.cfg.iterations {
            if let Err(e) = self.step() {
                if matches!(e, Error::Diverged { .. }) {
                    self.save(&out_dir.join("diverged.w2vm"))?;
                }
                return Err(e);
            }
            if self.step.is_multiple_of(self.cfg.val_interval) || self.step == self.cfg.iterations {
                let rec = self.validate()?;
                log::info!(
                    "step {} L_c/step {:.4} acc {:.3} ppl {:.1}/{:.1}",
                    rec.step,
                    rec.loss_contrastive,
                    rec.accuracy,
                    rec.perplexity_1,
                    rec.perplexity_2
                );
                append_csv(&metrics, std::slice::from_ref(&rec))?;
                append_csv(&out_dir.join(LEDGER_FILE), &self.ledger.rows()[ledger_written..])?;
                ledger_written = self.ledger.rows().len();
                self.save(&checkpoint_path(out_dir, self.step))?;
                records.push(rec);
            }
        }
        Ok(records)
    }
}

/// Configuration, model, parameters and step stored in a pre-training checkpoint.
pub fn load_model(c: &Checkpoint) -> Result<(TrainConfig, Wav2Vec2, ParamStore, u64)> {
    if c.state["kind"] != "pretrain" {
        return Err(Error::Checkpoint("not a pre-training checkpoint".into()));
    }
    let cfg: TrainConfig = serde_json::from_value(c.config.clone())?;
    let store = c.store_with_prefix("param.");
    let model = Wav2Vec2::attach(&cfg.model(), &store)?;
    let step = serde_json::from_value(c.state["step"].clone())?;
    Ok((cfg, model, store, step))
}

fn merge(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.contrastive += b.contrastive;
    acc.diversity += b.diversity;
    acc.penalty += b.penalty;
    acc.total += b.total;
    acc.masked_steps += b.masked_steps;
    acc.correct += b.correct;
    if acc.perplexities.is_empty() {
        acc.perplexities = b.perplexities.clone();
    } else {
        for (a, p) in acc.perplexities.iter_mut().zip(&b.perplexities) {
            *a += p;
        }
    }
}

/// Validation metrics of `store` on `corpus`; `rng` seeds the per-utterance
/// streams so repeated evaluations see identical masks and distractors.
pub fn evaluate(
    model: &Wav2Vec2,
    store: &ParamStore,
    corpus: &Corpus,
    cfg: &TrainConfig,
    rng: Rng,
) -> Result<MetricRecord> {
    let opts = SslOptions {
        mask_prob: cfg.mask_prob,
        mask_span: cfg.mask_span,
        distractors: cfg.distractors,
        tau: cfg.tau_floor,
        selection: Selection::Argmax,
        dropout: 0.0,
    };
    let batches = corpus.sequential_batches(cfg.gpu_batch_seconds());
    let mut sum = LossBreakdown::default();
    for members in &batches {
        let collated = corpus.collate(members)?;
        let rngs: Vec<Rng> = members.iter().map(|&i| rng.derive(i as u64)).collect();
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let out = model.ssl_forward(&mut g, &b, &collated, &rngs, &opts)?;
        merge(&mut sum, &out.breakdown);
    }
    let nb = batches.len() as f64;
    let sims: Vec<SimilarityStats> = model
        .quantizer
        .codebook_ids()
        .iter()
        .map(|&id| codebook_similarity_stats(store.get(id)))
        .collect::<Result<_>>()?;
    let lc = sum.contrastive_per_step();
    let ld = sum.diversity / nb;
    let lp = sum.penalty / corpus.len() as f64;
    Ok(MetricRecord {
        step: 0,
        loss_contrastive: lc,
        loss_diversity: ld,
        loss_penalty: lp,
        loss_total: ssl_objective::combine(lc, ld, lp),
        accuracy: sum.accuracy(),
        perplexity_1: sum.perplexities[0] / nb,
        perplexity_2: sum.perplexities[1] / nb,
        sim1_avg: sims[0].avg,
        sim1_min: sims[0].min,
        sim1_max: sims[0].max,
        sim2_avg: sims[1].avg,
        sim2_min: sims[1].min,
        sim2_max: sims[1].max,
        masked_steps: sum.masked_steps,
        lr: 0.0,
        tau: 0.0,
        hours_upper: 0.0,
        hours_measured: 0.0,
    })
}

/// Load the configured manifests, split off validation data if needed, and
/// build the in-memory corpora.
pub fn load_corpora(cfg: &TrainConfig) -> Result<(Corpus, Corpus)> {
    if cfg.train_manifest.is_empty() {
        return Err(Error::Config(vec!["train_manifest: required".into()]));
    }
    let train = load_manifest(Path::new(&cfg.train_manifest))?;
    let (train, val) = if cfg.val_manifest.is_empty() {
        split_validation(&train, cfg.val_fraction, &mut Rng::new(cfg.seed).derive(STREAM_SPLIT))?
    } else {
        (train, load_manifest(Path::new(&cfg.val_manifest))?)
    };
    Ok((Corpus::from_manifest(&train)?, Corpus::from_manifest(&val)?))
}

/// Pre-train from scratch according to `cfg`, writing into `out_dir`.
pub fn pretrain(cfg: &TrainConfig, out_dir: &Path) -> Result<Vec<MetricRecord>> {
    let (train, val) = load_corpora(cfg)?;
    Trainer::new(cfg.clone(), train, val)?.run(out_dir)
}

/// Continue a run from its checkpoint.
pub fn resume(checkpoint: &Path, out_dir: &Path) -> Result<Vec<MetricRecord>> {
    let c = Checkpoint::load(checkpoint)?;
    let cfg: TrainConfig = serde_json::from_value(c.config.clone())?;
    let (train, val) = load_corpora(&cfg)?;
    Trainer::from_checkpoint(&c, train, val)?.run(out_dir)
}
