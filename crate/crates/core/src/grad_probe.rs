//! Gradient-variance probing of a fixed checkpoint.
//!
//! Fresh batches are drawn at a chosen size, the raw loss gradient of each is
//! computed with no parameter update, and the spread of every scalar
//! parameter's gradient across batches is summarized.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::batch_assembler::BatchAssembler;
use crate::error::{Error, Result};
use crate::model::{SslOptions, Wav2Vec2};
use crate::numerics::{Rng, Tensor};
use crate::params::ParamStore;
use crate::quantizer::Selection;
use crate::trainer::{batch_gradient, Checkpoint, Corpus, TrainConfig};

pub const DEFAULT_BATCHES: usize = 10;

/// How probe batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSize {
    /// Through the batch assembler at this many seconds per batch.
    Seconds(f64),
    /// A uniform sample of this many distinct utterances.
    Utterances(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub n_batches: usize,
    pub size: BatchSize,
    /// Keep dropout and Gumbel noise active, as during training.
    pub stochastic: bool,
    /// Divide each batch gradient by its number of masked steps.
    pub per_masked_step: bool,
}

impl ProbeOptions {
    pub fn new(size: BatchSize) -> Self {
        ProbeOptions {
            n_batches: DEFAULT_BATCHES,
            size,
            stochastic: true,
            per_masked_step: true,
        }
    }
}

/// Spread of one named parameter tensor's gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpread {
    pub name: String,
    pub scalars: usize,
    pub mean_variance: f64,
    pub mean_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradVarianceReport {
    pub step: u64,
    pub batch_seconds: f64,
    pub n_batches: usize,
    /// Unweighted mean over scalar parameters of the gradient standard deviation.
    pub avg_std: f64,
    pub per_param: Vec<ParamSpread>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    step: u64,
    batch_seconds: f64,
    avg_std: f64,
    n_batches: usize,
}

/// Unbiased per-scalar variance across gradient samples, summarized per
/// tensor and overall. `samples[b][p]` is the gradient of tensor `p` in batch `b`.
pub fn gradient_spread(names: &[&str], samples: &[Vec<Tensor>]) -> Result<(f64, Vec<ParamSpread>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "gradient variance needs at least 2 batches, got {n}"
        )));
    }
    if samples.iter().any(|s| s.len() != names.len()) {
        return Err(Error::Shape("one gradient per named parameter expected".into()));
    }
    let mut per_param = Vec::with_capacity(names.len());
    let (mut std_sum, mut count) = (0.0, 0usize);
    for (p, name) in names.iter().enumerate() {
        let len = samples[0][p].data().len();
        if samples.iter().any(|s| s[p].data().len() != len) {
            return Err(Error::Shape(format!("gradient of {name} changes size between batches")));
        }
        let (mut var_sum, mut sd_sum) = (0.0, 0.0);
        for j in 0..len {
            // Shifting by the first sample leaves the variance unchanged and
            // makes identical samples give exactly zero.
            let shift = samples[0][p].data()[j];
            let mean = samples.iter().map(|s| s[p].data()[j] - shift).sum::<f64>() / n as f64;
            let ss: f64 = samples.iter().map(|s| (s[p].data()[j] - shift - mean).powi(2)).sum();
            let var = ss / (n - 1) as f64;
            var_sum += var;
            sd_sum += var.sqrt();
        }
        std_sum += sd_sum;
        count += len;
        per_param.push(ParamSpread {
            name: name.to_string(),
            scalars: len,
            mean_variance: if len > 0 { var_sum / len as f64 } else { 0.0 },
            mean_std: if len > 0 { sd_sum / len as f64 } else { 0.0 },
        });
    }
    let avg = if count > 0 { std_sum / count as f64 } else { 0.0 };
    Ok((avg, per_param))
}

/// Draw `n` batches of utterance indices.
pub fn draw_batches(corpus: &Corpus, size: BatchSize, n: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    match size {
        BatchSize::Utterances(k) => {
            if k == 0 || k > corpus.len() {
                return Err(Error::InvalidArgument(format!(
                    "batch of {k} utterances from a corpus of {}",
                    corpus.len()
                )));
            }
            Ok((0..n).map(|_| sample(rng, corpus.len(), k).into_vec()).collect())
        }
        BatchSize::Seconds(s) => {
            let mut a = BatchAssembler::new(corpus.lengths(), s, rng.split())?;
            Ok((0..n).map(|_| a.next_batch().members).collect())
        }
    }
}

/// Probe `store` at training step `step`. Parameters are only read.
pub fn probe_model(
    model: &Wav2Vec2,
    store: &ParamStore,
    cfg: &TrainConfig,
    step: u64,
    corpus: &Corpus,
    opts: &ProbeOptions,
    rng: &mut Rng,
) -> Result<GradVarianceReport> {
    if opts.n_batches < 2 {
        return Err(Error::InvalidArgument(format!(
            "gradient variance needs at least 2 batches, got {}",
            opts.n_batches
        )));
    }
    let ssl = SslOptions {
        mask_prob: cfg.mask_prob,
        mask_span: cfg.mask_span,
        distractors: cfg.distractors,
        tau: cfg.tau_schedule().at(step),
        selection: if opts.stochastic { Selection::Gumbel } else { Selection::Argmax },
        dropout: if opts.stochastic { cfg.dropout } else { 0.0 },
    };
    let batches = draw_batches(corpus, opts.size, opts.n_batches, rng)?;
    let mut samples = Vec::with_capacity(batches.len());
    let mut seconds = 0.0;
    for members in &batches {
        let collated = corpus.collate(members)?;
        seconds += collated.total_seconds();
        let stream = rng.split();
        let rngs: Vec<Rng> = (0..members.len()).map(|i| stream.derive(i as u64)).collect();
        let (mut grads, bd) = batch_gradient(model, store, &collated, &rngs, &ssl)?;
        if opts.per_masked_step && bd.masked_steps > 0 {
            let c = 1.0 / bd.masked_steps as f64;
            for g in &mut grads {
                g.scale_assign(c);
            }
        }
        samples.push(grads);
    }
    let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    let (avg_std, per_param) = gradient_spread(&names, &samples)?;
    Ok(GradVarianceReport {
        step,
        batch_seconds: match opts.size {
            BatchSize::Seconds(s) => s,
            BatchSize::Utterances(_) => seconds / batches.len() as f64,
        },
        n_batches: batches.len(),
        avg_std,
        per_param,
    })
}

/// Probe a pre-training checkpoint. With no explicit size, batches follow
/// the checkpoint's own gpu-batch size.
pub fn probe(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    size: Option<BatchSize>,
    n_batches: usize,
    rng: &mut Rng,
) -> Result<GradVarianceReport> {
    let (cfg, model, store, step) = crate::trainer::load_model(checkpoint)?;
    let opts = ProbeOptions {
        n_batches,
        ..ProbeOptions::new(size.unwrap_or(BatchSize::Seconds(cfg.gpu_batch_seconds())))
    };
    probe_model(&model, &store, &cfg, step, corpus, &opts, rng)
}

/// One row per report: step, batch_seconds, avg_std, n_batches.
pub fn write_reports(path: &Path, reports: &[GradVarianceReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(ReportRow {
            step: r.step,
            batch_seconds: r.batch_seconds,
            avg_std: r.avg_std,
            n_batches: r.n_batches,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::{tiny_corpus, tiny_train_config};
    use crate::trainer::Trainer;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn identical_batches_have_zero_spread() {
        let g = vec![Tensor::vector(vec![0.3, -1.0]), Tensor::vector(vec![2.0])];
        let (avg, per) = gradient_spread(&["a", "b"], &vec![g; 10]).unwrap();
        assert_eq!(avg, 0.0);
        assert!(per.iter().all(|p| p.mean_variance == 0.0));
    }

    #[test]
    fn least_squares_matches_sample_variance() {
        // loss_i(w) = (w x_i - y_i)^2 / 2 has gradient (w x_i - y_i) x_i.
        let w = 0.5;
        let data = [(1.0, 2.0), (2.0, 0.0), (-1.0, 1.0), (3.0, 3.0)];
        let grads: Vec<f64> = data.iter().map(|&(x, y)| (w * x - y) * x).collect();
        // -1.5, 2.0, 1.5, -4.5: mean -0.625, squared deviations sum 27.1875.
        let expected_var = 27.1875 / 3.0;
        let samples: Vec<Vec<Tensor>> = grads.iter().map(|&g| vec![Tensor::vector(vec![g])]).collect();
        let (avg, per) = gradient_spread(&["w"], &samples).unwrap();
        assert!((per[0].mean_variance - expected_var).abs() < 1e-12);
        assert!((avg - expected_var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fewer_than_two_batches_is_an_error() {
        let g = vec![vec![Tensor::vector(vec![1.0])]];
        assert!(gradient_spread(&["w"], &g).is_err());
        let t = Trainer::new(tiny_train_config(), tiny_corpus(4, 1), Corpus::default()).unwrap();
        let opts = ProbeOptions {
            n_batches: 1,
            ..ProbeOptions::new(BatchSize::Utterances(2))
        };
        let err = probe_model(&t.model, &t.store, &t.cfg, 0, t.train_corpus(), &opts, &mut Rng::new(0));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn probing_reads_only_and_is_deterministic() {
        let t = Trainer::new(tiny_train_config(), tiny_corpus(8, 2), Corpus::default()).unwrap();
        let before = t.store.checksum();
        let opts = ProbeOptions {
            n_batches: 3,
            ..ProbeOptions::new(BatchSize::Utterances(2))
        };
        let run = || probe_model(&t.model, &t.store, &t.cfg, 0, t.train_corpus(), &opts, &mut Rng::new(5)).unwrap();
        let a = run();
        assert_eq!(a, run());
        assert_eq!(t.store.checksum(), before);
        assert!(a.avg_std > 0.0);
        assert_eq!(a.per_param.iter().map(|p| p.scalars).sum::<usize>(), t.store.num_scalars());
    }

    #[test]
    fn checkpoint_probe_uses_stored_batch_size() {
        let t = Trainer::new(tiny_train_config(), tiny_corpus(8, 3), Corpus::default()).unwrap();
        let c = t.to_checkpoint().unwrap();
        let r = probe(&c, t.train_corpus(), None, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(r.batch_seconds, t.cfg.gpu_batch_seconds());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.csv");
        write_reports(&path, &[r]).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("step,batch_seconds,avg_std,n_batches\n"));
    }

    proptest! {
        #[test]
        fn scaling_gradients_scales_spread(
            vals in prop::collection::vec(-10.0f64..10.0, 6..=6),
            e in -4i32..5,
            neg in any::<bool>(),
        ) {
            // Powers of two keep the scaling exact.
            let c = if neg { -(2f64.powi(e)) } else { 2f64.powi(e) };
            let samples: Vec<Vec<Tensor>> = vals
                .chunks(2)
                .map(|v| vec![Tensor::vector(v.to_vec())])
                .collect();
            let scaled: Vec<Vec<Tensor>> = samples
                .iter()
                .map(|s| vec![s[0].map(|x| x * c)])
                .collect();
            let (a, _) = gradient_spread(&["p"], &samples).unwrap();
            let (b, _) = gradient_spread(&["p"], &scaled).unwrap();
            prop_assert_eq!(b, a * c.abs());
            prop_assert!(a >= 0.0);
        }
    }
}
