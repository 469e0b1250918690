//! Character recognition on top of a pre-trained (or random) model: a
//! linear CTC head, tri-stage learning rate, staged unfreezing, greedy
//! decoding and edit-distance error rates.

use std::fs::{self, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::batch_assembler::{BatchAssembler, BIN_SIZE};
use crate::context_network::{Dropout, Linear};
use crate::dataset::{class_to_char, encode_transcript, load_manifest, num_classes, split_validation, BLANK};
use crate::error::{Error, Result};
use crate::feature_encoder::FeatureEncoder;
use crate::model::{ModelConfig, Wav2Vec2};
use crate::numerics::{ctc_min_frames, Graph, Rng, Tensor};
use crate::params::{Bound, Builder, ParamStore};
use crate::trainer::{self, AdamW, AdamWConfig, Checkpoint, Corpus, FlatConfig, TrainConfig};

pub const BASE_LR: f64 = 5e-7;
pub const PEAK_LR: f64 = 5e-5;
pub const FINAL_LR: f64 = 2.5e-6;
pub const WARMUP_FRACTION: f64 = 0.1;
pub const HOLD_FRACTION: f64 = 0.4;
pub const FINETUNE_MASK_PROB: f64 = 0.05;
pub const CONTEXT_FROZEN_STEPS: u64 = 5000;
pub const EVAL_FILE: &str = "eval.csv";
pub const TRAIN_LOG_FILE: &str = "finetune.csv";

const STREAM_HEAD: u64 = 21;
const STREAM_BATCHES: u64 = 22;
const STREAM_STEPS: u64 = 23;
const STREAM_SPLIT: u64 = 24;

/// Steps per labeled-data budget.
pub fn budget_steps(budget: &str) -> Option<u64> {
    Some(match budget {
        "10m" => 12_000,
        "1h" => 13_000,
        "10h" => 20_000,
        "100h" => 50_000,
        "960h" => 320_000,
        _ => return None,
    })
}

/// Linear warm-up, constant hold, exponential decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriStageLr {
    pub total_steps: u64,
    pub base: f64,
    pub peak: f64,
    pub final_lr: f64,
    pub warmup: f64,
    pub hold: f64,
}

impl TriStageLr {
    pub fn new(total_steps: u64, base: f64, peak: f64, final_lr: f64) -> Self {
        TriStageLr {
            total_steps,
            base,
            peak,
            final_lr,
            warmup: WARMUP_FRACTION,
            hold: HOLD_FRACTION,
        }
    }

    pub fn canonical(total_steps: u64) -> Self {
        Self::new(total_steps, BASE_LR, PEAK_LR, FINAL_LR)
    }

    /// Rate at `step`; steps past the end keep the final rate.
    pub fn at(&self, step: u64) -> f64 {
        let f = (step as f64 / self.total_steps.max(1) as f64).min(1.0);
        let hold_end = self.warmup + self.hold;
        if f < self.warmup {
            self.base + (self.peak - self.base) * f / self.warmup
        } else if f <= hold_end {
            self.peak
        } else {
            let r = (f - hold_end) / (1.0 - hold_end);
            self.peak * (self.final_lr / self.peak).powf(r)
        }
    }
}

/// Which parameters move at a given fine-tuning step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezePlan {
    pub context_frozen_steps: u64,
}

impl FreezePlan {
    pub fn trainable(&self, name: &str, step: u64) -> bool {
        if name.starts_with(CtcHead::PREFIX) {
            true
        } else if name.starts_with(FeatureEncoder::PREFIX) || !is_context_side(name) {
            false
        } else {
            step >= self.context_frozen_steps
        }
    }
}

/// Parameters between the encoder output and the head.
fn is_context_side(name: &str) -> bool {
    name.starts_with("context.") || name.starts_with("features.") || name == "mask_vector"
}

/// Per-frame character classifier.
#[derive(Debug, Clone)]
pub struct CtcHead {
    proj: Linear,
}

impl CtcHead {
    pub const PREFIX: &'static str = "ctc.";

    fn build(dim: usize, b: &mut Builder) -> Self {
        CtcHead {
            proj: Linear::build("ctc.proj", dim, num_classes(), b),
        }
    }

    pub fn init(dim: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        Self::build(dim, &mut Builder::init(store, rng))
    }

    pub fn attach(dim: usize, store: &ParamStore) -> Result<Self> {
        let mut b = Builder::attach(store);
        let h = Self::build(dim, &mut b);
        b.finish()?;
        Ok(h)
    }
}

/// CTC loss of frame logits `[T, classes]` against class labels.
pub fn ctc_loss(logits: &Tensor, target: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let lp = g.log_softmax_rows(x);
    let l = g.ctc_loss(lp, target, BLANK)?;
    Ok(g.scalar(l))
}

/// Per-frame argmax, repeats collapsed, blanks removed.
pub fn greedy_decode(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.data().chunks(cols) {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn decode_text(classes: &[usize]) -> String {
    classes.iter().filter_map(|&c| class_to_char(c)).collect()
}

/// Levenshtein distance between token sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Word error rate; may exceed 1.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = words(reference);
    if r.is_empty() {
        return Err(Error::InvalidArgument("word error rate of an empty reference".into()));
    }
    Ok(edit_distance(&r, &words(hypothesis)) as f64 / r.len() as f64)
}

/// Character error rate; may exceed 1.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::InvalidArgument("character error rate of an empty reference".into()));
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Fine-tuning run configuration; field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub seed: u64,
    pub train_manifest: String,
    /// Empty to split evaluation data off the training manifest.
    pub val_manifest: String,
    pub val_fraction: f64,
    /// `scratch` or the path of a pre-training checkpoint.
    pub init: String,
    /// Pre-training config whose model dimensions a scratch run uses;
    /// empty for the toy model.
    pub model_config: String,
    pub iterations: u64,
    /// Speech seconds per step.
    pub batch_seconds: f64,
    pub bin_size: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub context_frozen_steps: u64,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub dropout: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl FinetuneConfig {
    pub fn canonical(budget: &str) -> Option<Self> {
        Some(FinetuneConfig {
            iterations: budget_steps(budget)?,
            batch_seconds: 200.0,
            base_lr: BASE_LR,
            peak_lr: PEAK_LR,
            final_lr: FINAL_LR,
            context_frozen_steps: CONTEXT_FROZEN_STEPS,
            ..Self::toy()
        })
    }

    /// Desk-scale preset. Rates keep the canonical ratios at a higher peak,
    /// and the frozen phase keeps its share of the shortest canonical run.
    pub fn toy() -> Self {
        let adam = AdamWConfig::default();
        let iterations = 600;
        let peak = 2e-3;
        FinetuneConfig {
            seed: 0,
            train_manifest: String::new(),
            val_manifest: String::new(),
            val_fraction: 0.1,
            init: "scratch".into(),
            model_config: String::new(),
            iterations,
            batch_seconds: 8.0,
            bin_size: BIN_SIZE,
            base_lr: peak * BASE_LR / PEAK_LR,
            peak_lr: peak,
            final_lr: peak * FINAL_LR / PEAK_LR,
            context_frozen_steps: iterations * CONTEXT_FROZEN_STEPS / 12_000,
            mask_prob: FINETUNE_MASK_PROB,
            mask_span: 10,
            dropout: 0.1,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
        }
    }

    pub fn lr_schedule(&self) -> TriStageLr {
        TriStageLr::new(self.iterations, self.base_lr, self.peak_lr, self.final_lr)
    }

    pub fn freeze_plan(&self) -> FreezePlan {
        FreezePlan {
            context_frozen_steps: self.context_frozen_steps,
        }
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

impl FlatConfig for FinetuneConfig {
    fn default_preset() -> Self {
        Self::toy()
    }

    /// `toy`, or `canonical-<budget>` with budget 10m, 1h, 10h, 100h or 960h.
    fn preset(name: &str) -> Result<Self> {
        if name == "toy" {
            return Ok(Self::toy());
        }
        name.strip_prefix("canonical-")
            .and_then(Self::canonical)
            .ok_or_else(|| {
                Error::Config(vec![format!(
                    "preset: unknown preset {name:?}; expected toy or canonical-{{10m,1h,10h,100h,960h}}"
                )])
            })
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        check(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            "val_fraction: must lie in (0, 1)",
        );
        check(!self.init.is_empty(), "init: expected scratch or a checkpoint path");
        check(self.iterations >= 1, "iterations: must be at least 1");
        check(self.batch_seconds > 0.0 && self.batch_seconds.is_finite(), "batch_seconds: must be positive");
        check(self.bin_size >= 1, "bin_size: must be at least 1");
        check(self.base_lr > 0.0, "base_lr: must be positive");
        check(self.peak_lr >= self.base_lr, "peak_lr: must be at least base_lr");
        check(
            self.final_lr > 0.0 && self.final_lr <= self.peak_lr,
            "final_lr: must lie in (0, peak_lr]",
        );
        check((0.0..=1.0).contains(&self.mask_prob), "mask_prob: must lie in [0, 1]");
        check(self.mask_span >= 1, "mask_span: must be at least 1");
        check((0.0..1.0).contains(&self.dropout), "dropout: must lie in [0, 1)");
        check((0.0..1.0).contains(&self.adam_beta1), "adam_beta1: must lie in [0, 1)");
        check((0.0..1.0).contains(&self.adam_beta2), "adam_beta2: must lie in [0, 1)");
        check(self.adam_eps > 0.0, "adam_eps: must be positive");
        check(self.weight_decay >= 0.0, "weight_decay: must be non-negative");
        errs
    }
}

/// Where fine-tuning starts from.
#[derive(Debug, Clone)]
pub enum Init {
    /// Random parameters with these dimensions.
    Scratch(ModelConfig),
    /// A pre-training checkpoint.
    Pretrained(Checkpoint),
}

/// Labeled utterances with their frozen-encoder latents.
#[derive(Debug, Clone)]
struct Encoded {
    ids: Vec<String>,
    lengths: Vec<usize>,
    latents: Vec<Tensor>,
    transcripts: Vec<String>,
    targets: Vec<Vec<usize>>,
}

impl Encoded {
    fn new(model: &Wav2Vec2, store: &ParamStore, corpus: &Corpus) -> Result<Self> {
        let mut out = Encoded {
            ids: Vec::new(),
            lengths: Vec::new(),
            latents: Vec::new(),
            transcripts: Vec::new(),
            targets: Vec::new(),
        };
        for i in 0..corpus.len() {
            let text = corpus.transcripts[i].as_deref().ok_or_else(|| {
                Error::InvalidArgument(format!("utterance {} has no transcript", corpus.ids[i]))
            })?;
            let z = model.encoder.encode(store, &corpus.audio[i])?;
            let rows = z.valid_len;
            let cols = z.vectors.shape()[1];
            let latent = Tensor::matrix(rows, cols, z.vectors.data()[..rows * cols].to_vec())?;
            out.ids.push(corpus.ids[i].clone());
            out.lengths.push(corpus.audio[i].len());
            out.latents.push(latent);
            out.transcripts.push(text.to_string());
            out.targets.push(encode_transcript(text)?);
        }
        Ok(out)
    }
}

/// Decoding result of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub cer: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Corpus-level rates: total edits over total reference length.
    pub cer: f64,
    pub wer: f64,
}

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>) -> Self {
        let (mut ce, mut cn, mut we, mut wn) = (0usize, 0usize, 0usize, 0usize);
        for r in &rows {
            let rc: Vec<char> = r.reference.chars().collect();
            let hc: Vec<char> = r.hypothesis.chars().collect();
            ce += edit_distance(&rc, &hc);
            cn += rc.len();
            let rw = words(&r.reference);
            we += edit_distance(&rw, &words(&r.hypothesis));
            wn += rw.len();
        }
        EvalReport {
            rows,
            cer: ce as f64 / cn.max(1) as f64,
            wer: we as f64 / wn.max(1) as f64,
        }
    }

    /// Per-utterance rows followed by a summary row with id `ALL`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.serialize(EvalRow {
            id: "ALL".into(),
            reference: String::new(),
            hypothesis: String::new(),
            cer: self.cer,
            wer: self.wer,
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub utterances: usize,
}

/// Fine-tuning state. Encoder latents are computed once since the encoder
/// never changes.
#[derive(Debug, Clone)]
pub struct FineTuner {
    pub cfg: FinetuneConfig,
    pub model: Wav2Vec2,
    pub head: CtcHead,
    pub store: ParamStore,
    pub opt: AdamW,
    pub step: u64,
    assembler: BatchAssembler,
    train: Encoded,
    lr: TriStageLr,
    plan: FreezePlan,
}

impl FineTuner {
    pub fn new(cfg: FinetuneConfig, init: Init, train: &Corpus) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let (model, mut store) = match init {
            Init::Scratch(mc) => {
                let errs = mc.validate();
                if !errs.is_empty() {
                    return Err(Error::Config(errs));
                }
                let mut store = ParamStore::new();
                let model = Wav2Vec2::init(&mc, &mut store, &mut Rng::new(cfg.seed));
                (model, store)
            }
            Init::Pretrained(c) => {
                let (_, model, store, _) = trainer::load_model(&c)?;
                (model, store)
            }
        };
        let head = CtcHead::init(
            model.config().context.dim,
            &mut store,
            &mut Rng::new(cfg.seed).derive(STREAM_HEAD),
        );
        let train = Encoded::new(&model, &store, train)?;
        if train.ids.is_empty() {
            return Err(Error::InvalidArgument("fine-tuning corpus is empty".into()));
        }
        let assembler = BatchAssembler::with_bin_size(
            train.lengths.clone(),
            cfg.batch_seconds,
            cfg.bin_size,
            Rng::new(cfg.seed).derive(STREAM_BATCHES),
        )?;
        Ok(FineTuner {
            opt: AdamW::new(cfg.adam(), &store),
            lr: cfg.lr_schedule(),
            plan: cfg.freeze_plan(),
            cfg,
            model,
            head,
            store,
            step: 0,
            assembler,
            train,
        })
    }

    /// One update on one gpu-batch; the loss is the mean CTC loss per utterance.
    pub fn step(&mut self) -> Result<FinetuneLogRow> {
        let lr = self.lr.at(self.step);
        let batch = self.assembler.next_batch();
        let step = self.step;
        let plan = self.plan;
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, |name| plan.trainable(name, step));
        let mut losses = Vec::new();
        let stream = Rng::new(self.cfg.seed).derive(STREAM_STEPS).derive(step);
        for (pos, &i) in batch.members.iter().enumerate() {
            let mut rng = stream.derive(pos as u64);
            let mut mask_rng = rng.split();
            let mask = (self.cfg.mask_prob > 0.0).then_some((self.cfg.mask_prob, self.cfg.mask_span, &mut mask_rng));
            let dropout = Some(Dropout {
                rate: self.cfg.dropout,
                rng: &mut rng,
            });
            let target = &self.train.targets[i];
            let frames = self.train.latents[i].shape()[0];
            if frames < ctc_min_frames(target) {
                log::warn!("skipping {}: transcript longer than {frames} frames allow", self.train.ids[i]);
                continue;
            }
            let z = g.constant(self.train.latents[i].clone());
            let (c, _) = self.model.contextualize(&mut g, &b, z, frames, mask, dropout)?;
            let logits = self.head.proj.apply(&mut g, &b, c);
            let lp = g.log_softmax_rows(logits);
            losses.push(g.ctc_loss(lp, target, BLANK)?);
        }
        if losses.is_empty() {
            self.step += 1;
            return Ok(FinetuneLogRow {
                step,
                lr,
                loss: f64::NAN,
                utterances: 0,
            });
        }
        let n = losses.len();
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        let loss = g.scale(total, 1.0 / n as f64);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("fine-tuning loss {value}"),
            });
        }
        let mut grads = g.backward(loss);
        let grads = self.store.collect_grads(&mut grads, &b);
        self.opt.step(&mut self.store, &grads, lr, |name| plan.trainable(name, step));
        self.step += 1;
        Ok(FinetuneLogRow {
            step,
            lr,
            loss: value,
            utterances: n,
        })
    }

    /// Greedy-decoded error rates on `corpus`, without masking or dropout.
    pub fn evaluate(&self, corpus: &Corpus) -> Result<EvalReport> {
        evaluate(&self.model, &self.head, &self.store, corpus)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint {
            config: serde_json::to_value(&self.cfg)?,
            state: json!({
                "kind": "finetune",
                "step": self.step,
                "model": self.model.config(),
            }),
            tensors: Vec::new(),
        };
        c.push_store("param.", &self.store);
        Ok(c)
    }
}

/// Greedy decoding of every utterance in `corpus`.
pub fn evaluate(model: &Wav2Vec2, head: &CtcHead, store: &ParamStore, corpus: &Corpus) -> Result<EvalReport> {
    let enc = Encoded::new(model, store, corpus)?;
    let mut rows = Vec::with_capacity(enc.ids.len());
    for i in 0..enc.ids.len() {
        let logits = frame_logits(model, head, store, &enc.latents[i])?;
        let hypothesis = decode_text(&greedy_decode(&logits));
        let reference = enc.transcripts[i].clone();
        rows.push(EvalRow {
            id: enc.ids[i].clone(),
            cer: cer(&reference, &hypothesis)?,
            wer: wer(&reference, &hypothesis)?,
            reference,
            hypothesis,
        });
    }
    Ok(EvalReport::from_rows(rows))
}

fn frame_logits(model: &Wav2Vec2, head: &CtcHead, store: &ParamStore, latent: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b: Bound = store.bind(&mut g, |_| false);
    let z = g.constant(latent.clone());
    let (c, _) = model.contextualize(&mut g, &b, z, latent.shape()[0], None, None)?;
    let logits = head.proj.apply(&mut g, &b, c);
    Ok(g.value(logits).clone())
}

/// Model and head stored in a fine-tuning checkpoint.
pub fn load_finetuned(c: &Checkpoint) -> Result<(Wav2Vec2, CtcHead, ParamStore)> {
    if c.state["kind"] != "finetune" {
        return Err(Error::Checkpoint("not a fine-tuning checkpoint".into()));
    }
    let mc: ModelConfig = serde_json::from_value(c.state["model"].clone())?;
    let store = c.store_with_prefix("param.");
    let model = Wav2Vec2::attach(&mc, &store)?;
    let head = CtcHead::attach(mc.context.dim, &store)?;
    Ok((model, head, store))
}

/// Resolve the starting point named in `cfg.init`.
pub fn resolve_init(cfg: &FinetuneConfig) -> Result<Init> {
    if cfg.init == "scratch" {
        let tc = if cfg.model_config.is_empty() {
            TrainConfig::toy()
        } else {
            TrainConfig::load(Path::new(&cfg.model_config))?
        };
        Ok(Init::Scratch(tc.model()))
    } else {
        Ok(Init::Pretrained(Checkpoint::load(Path::new(&cfg.init))?))
    }
}

/// Fine-tune according to `cfg`, writing the resolved config, a loss log,
/// the final checkpoint and the evaluation report into `out_dir`.
pub fn finetune(cfg: &FinetuneConfig, out_dir: &Path) -> Result<EvalReport> {
    if cfg.train_manifest.is_empty() {
        return Err(Error::Config(vec!["train_manifest: required".into()]));
    }
    let train = load_manifest(Path::new(&cfg.train_manifest))?;
    let (train, val) = if cfg.val_manifest.is_empty() {
        split_validation(&train, cfg.val_fraction, &mut Rng::new(cfg.seed).derive(STREAM_SPLIT))?
    } else {
        (train, load_manifest(Path::new(&cfg.val_manifest))?)
    };
    let train = Corpus::from_manifest(&train)?;
    let val = Corpus::from_manifest(&val)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("finetune.cfg");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let mut ft = FineTuner::new(cfg.clone(), resolve_init(cfg)?, &train)?;
    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::Writer::from_writer(file);
    while ft.step < cfg.iterations {
        log.serialize(ft.step()?)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    ft.to_checkpoint()?.save(&out_dir.join("finetuned.w2vm"))?;
    let report = ft.evaluate(&val)?;
    report.write_csv(&out_dir.join(EVAL_FILE))?;
    Ok(report)
}
