//! The full self-supervised model: encoder, quantizer, masking, context
//! network and the two similarity projections.

use serde::{Deserialize, Serialize};

use crate::batch_assembler::Collated;
use crate::context_network::{
    apply_mask, sample_mask, ContextConfig, ContextNetwork, Dropout, Linear, MaskSpec, Norm,
};
use crate::error::{Error, Result};
use crate::feature_encoder::{num_frames, EncoderConfig, FeatureEncoder};
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::params::{self, Bound, Builder, ParamId, ParamStore};
use crate::quantizer::{Quantizer, QuantizerConfig, Selection};
use crate::ssl_objective::{self, LossBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub context: ContextConfig,
    /// Width of the space in which context and target vectors are compared.
    pub sim_dim: usize,
}

impl ModelConfig {
    pub fn canonical() -> Self {
        ModelConfig {
            encoder: EncoderConfig::canonical(),
            quantizer: QuantizerConfig::canonical(),
            context: ContextConfig::canonical(),
            sim_dim: 256,
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            quantizer: QuantizerConfig::toy(),
            context: ContextConfig::toy(),
            sim_dim: 32,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.encoder.validate();
        errs.extend(self.quantizer.validate());
        errs.extend(self.context.validate());
        if self.sim_dim == 0 {
            errs.push("sim_dim must be positive".into());
        }
        errs
    }
}

/// Per-call settings of the self-supervised forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslOptions {
    pub mask_prob: f64,
    pub mask_span: usize,
    pub distractors: usize,
    pub tau: f64,
    pub selection: Selection,
    /// Dropout rate in the context network; 0 evaluates deterministically.
    pub dropout: f64,
}

/// Graph handles and evaluated metrics of one gpu-batch.
#[derive(Debug, Clone)]
pub struct SslOutput {
    pub loss: Var,
    pub contrastive: Var,
    pub diversity: Var,
    pub penalty: Var,
    pub breakdown: LossBreakdown,
    /// Utterances without enough masked steps to contrast.
    pub skipped: usize,
}

// Sub-stream labels of the per-utterance generator.
const STREAM_QUANT: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_DISTRACT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

#[derive(Debug, Clone)]
pub struct Wav2Vec2 {
    cfg: ModelConfig,
    pub encoder: FeatureEncoder,
    feature_norm: Norm,
    feature_proj: Linear,
    mask_vector: ParamId,
    pub context: ContextNetwork,
    context_proj: Linear,
    target_proj: Linear,
    pub quantizer: Quantizer,
}

impl Wav2Vec2 {
    fn build(cfg: &ModelConfig, b: &mut Builder) -> Self {
        let c = cfg.encoder.channels;
        let d = cfg.context.dim;
        Wav2Vec2 {
            cfg: cfg.clone(),
            encoder: FeatureEncoder::build(&cfg.encoder, b),
            feature_norm: Norm::build("features.norm", c, b),
            feature_proj: Linear::build("features.proj", c, d, b),
            mask_vector: b.param("mask_vector", &[d], params::uniform(0.0, 1.0)),
            context: ContextNetwork::build(&cfg.context, b),
            context_proj: Linear::build("head.context_proj", d, cfg.sim_dim, b),
            target_proj: Linear::build("head.target_proj", cfg.quantizer.output_dim(), cfg.sim_dim, b),
            quantizer: Quantizer::build(&cfg.quantizer, c, b),
        }
    }

    pub fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Self {
        Self::build(cfg, &mut Builder::init(store, rng))
    }

    /// Bind to existing parameters, reporting every missing or misshapen tensor.
    pub fn attach(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut b = Builder::attach(store);
        let m = Self::build(cfg, &mut b);
        b.finish()?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Normalize, project, mask and contextualize latents `z: [T, channels]`
    /// whose first `valid_len` rows are real. Returns `[T, dim]` and the mask.
    pub fn contextualize(
        &self,
        g: &mut Graph,
        b: &Bound,
        z: Var,
        valid_len: usize,
        mask: Option<(f64, usize, &mut Rng)>,
        dropout: Option<Dropout>,
    ) -> Result<(Var, MaskSpec)> {
        let f = self.feature_norm.apply(g, b, z);
        self.contextualize_normalized(g, b, f, valid_len, mask, dropout)
    }

    fn contextualize_normalized(
        &self,
        g: &mut Graph,
        b: &Bound,
        f: Var,
        valid_len: usize,
        mask: Option<(f64, usize, &mut Rng)>,
        dropout: Option<Dropout>,
    ) -> Result<(Var, MaskSpec)> {
        let x = self.feature_proj.apply(g, b, f);
        let spec = match mask {
            Some((p, span, rng)) => sample_mask(valid_len, p, span, rng)?,
            None => MaskSpec {
                starts: Vec::new(),
                indices: Vec::new(),
            },
        };
        let x = apply_mask(g, x, &spec, b[self.mask_vector]);
        let out = self.context.forward(g, b, x, valid_len, dropout)?;
        Ok((out.c, spec))
    }

    /// Self-supervised loss of one gpu-batch. `rngs[i]` drives every random
    /// choice for utterance `i`, so results do not depend on how utterances
    /// are grouped into batches (apart from the batch-wide diversity term).
    pub fn ssl_forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &Collated,
        rngs: &[Rng],
        opts: &SslOptions,
    ) -> Result<SslOutput> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if rngs.len() != batch.len() {
            return Err(Error::InvalidArgument(format!(
                "{} random streams for {} utterances",
                rngs.len(),
                batch.len()
            )));
        }
        let codebooks = self.cfg.quantizer.codebooks;
        let mut probs: Vec<Vec<Var>> = vec![Vec::new(); codebooks];
        let mut contrastive: Vec<Var> = Vec::new();
        let mut penalties: Vec<Var> = Vec::new();
        let mut masked_steps = 0;
        let mut correct = 0;
        let mut skipped = 0;

        for (i, wave) in batch.waves.iter().enumerate() {
            let valid = num_frames(batch.lengths[i]);
            let z = self.encoder.forward(g, b, wave)?;
            let zv = if valid < g.shape(z)[0] {
                g.slice_rows(z, 0, valid)
            } else {
                z
            };
            penalties.push(ssl_objective::l2_penalty(g, zv));

            // Targets come from the normalized latents, so the penalty on
            // the raw scale cannot flatten the code distribution.
            let f = self.feature_norm.apply(g, b, z);
            let fv = if valid < g.shape(f)[0] {
                g.slice_rows(f, 0, valid)
            } else {
                f
            };
            let mut rq = rngs[i].derive(STREAM_QUANT);
            let quant = self.quantizer.forward(g, b, fv, opts.tau, opts.selection, &mut rq)?;
            for (acc, p) in probs.iter_mut().zip(quant.probs) {
                acc.push(p);
            }

            let mut rm = rngs[i].derive(STREAM_MASK);
            let mut rdrop = rngs[i].derive(STREAM_DROPOUT);
            let dropout = (opts.dropout > 0.0).then_some(Dropout {
                rate: opts.dropout,
                rng: &mut rdrop,
            });
            let (c, mask) = self.contextualize_normalized(
                g,
                b,
                f,
                valid,
                Some((opts.mask_prob, opts.mask_span, &mut rm)),
                dropout,
            )?;
            let m = mask.indices.len();
            if mask.skip() || m < 2 {
                skipped += 1;
                continue;
            }
            let cm = g.gather_rows(c, &mask.indices);
            let cp = self.context_proj.apply(g, b, cm);
            let qm = g.gather_rows(quant.q, &mask.indices);
            let qp = self.target_proj.apply(g, b, qm);
            let mut rd = rngs[i].derive(STREAM_DISTRACT);
            let dist = ssl_objective::sample_distractors(m, opts.distractors, &mut rd)?;
            let (lc, ok) = ssl_objective::contrastive_loss(
                g,
                cp,
                qp,
                &dist,
                ssl_objective::CONTRASTIVE_TEMPERATURE,
            )?;
            contrastive.push(lc);
            masked_steps += m;
            correct += ok;
        }

        let stacked: Vec<Var> = probs
            .iter()
            .map(|ps| if ps.len() == 1 { ps[0] } else { g.concat_rows(ps) })
            .collect();
        let (ld, perplexities) = ssl_objective::diversity_loss(g, &stacked);
        let lc = sum_or_zero(g, &contrastive);
        let lp = sum_or_zero(g, &penalties);
        let loss = ssl_objective::combine_graph(g, lc, ld, lp);
        let breakdown = LossBreakdown {
            contrastive: g.scalar(lc),
            diversity: g.scalar(ld),
            penalty: g.scalar(lp),
            total: g.scalar(loss),
            masked_steps,
            correct,
            perplexities,
        };
        Ok(SslOutput {
            loss,
            contrastive: lc,
            diversity: ld,
            penalty: lp,
            breakdown,
            skipped,
        })
    }
}

fn sum_or_zero(g: &mut Graph, parts: &[Var]) -> Var {
    let mut it = parts.iter().copied();
    match it.next() {
        None => g.constant(Tensor::scalar(0.0)),
        Some(first) => it.fold(first, |acc, v| g.add(acc, v)),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::batch_assembler::pad_and_collate;
    use crate::numerics::{finite_diff_grad, relative_error};

    /// Two layers, width 8: small enough for full finite-difference checks.
    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels: 2,
                grad_scale: 1.0,
                ..EncoderConfig::canonical()
            },
            quantizer: QuantizerConfig {
                codebooks: 2,
                entries: 3,
                entry_dim: 2,
            },
            context: ContextConfig {
                dim: 8,
                layers: 2,
                heads: 2,
                ffn_dim: 8,
                dropout: 0.0,
                pos_kernel: 4,
                pos_groups: 2,
            },
            sim_dim: 4,
        }
    }

    fn waves(rng: &mut Rng, lens: &[usize]) -> Collated {
        let utts: Vec<(String, Vec<f64>)> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| (format!("u{i}"), (0..n).map(|_| 0.3 * rng.normal()).collect()))
            .collect();
        pad_and_collate(&utts).unwrap()
    }

    fn opts(selection: Selection) -> SslOptions {
        SslOptions {
            mask_prob: 0.5,
            mask_span: 2,
            distractors: 3,
            tau: 1.5,
            selection,
            dropout: 0.0,
        }
    }

    #[test]
    fn attach_round_trip_and_mismatch() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        Wav2Vec2::init(&cfg, &mut store, &mut Rng::new(0));
        assert!(Wav2Vec2::attach(&cfg, &store).is_ok());
        let other = ModelConfig {
            sim_dim: 5,
            ..cfg
        };
        let err = Wav2Vec2::attach(&other, &store).unwrap_err().to_string();
        assert!(err.contains("head.context_proj.weight"), "{err}");
        assert!(err.contains("head.target_proj.weight"), "{err}");
    }

    #[test]
    fn breakdown_combines_terms() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let model = Wav2Vec2::init(&cfg, &mut store, &mut Rng::new(1));
        let batch = waves(&mut Rng::new(2), &[3200, 2900]);
        let rngs = [Rng::new(3), Rng::new(4)];
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| true);
        let out = model.ssl_forward(&mut g, &b, &batch, &rngs, &opts(Selection::Gumbel)).unwrap();
        let bd = &out.breakdown;
        assert!((bd.total - ssl_objective::combine(bd.contrastive, bd.diversity, bd.penalty)).abs() < 1e-12);
        assert!(bd.masked_steps > 0 && bd.contrastive > 0.0);
        assert_eq!(bd.perplexities.len(), 2);
        for p in &bd.perplexities {
            assert!((1.0..=3.0 + 1e-9).contains(p));
        }
    }

    #[test]
    fn per_utterance_terms_sum_across_batches() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let model = Wav2Vec2::init(&cfg, &mut store, &mut Rng::new(5));
        let mut rng = Rng::new(6);
        let both = waves(&mut rng, &[3200, 3200]);
        let first = both.select(&[0]);
        let second = both.select(&[1]);
        let rngs = [Rng::new(7), Rng::new(8)];
        let run = |batch: &Collated, rngs: &[Rng]| {
            let mut g = Graph::new();
            let b = store.bind(&mut g, |_| false);
            model.ssl_forward(&mut g, &b, batch, rngs, &opts(Selection::Gumbel)).unwrap().breakdown
        };
        let whole = run(&both, &rngs);
        let a = run(&first, &rngs[..1]);
        let c = run(&second, &rngs[1..]);
        assert_eq!(whole.contrastive, a.contrastive + c.contrastive);
        assert_eq!(whole.penalty, a.penalty + c.penalty);
        assert_eq!(whole.masked_steps, a.masked_steps + c.masked_steps);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        let model = Wav2Vec2::init(&cfg, &mut store, &mut Rng::new(9));
        let batch = waves(&mut Rng::new(10), &[3200, 2900]);
        let rngs = [Rng::new(11), Rng::new(12)];
        let o = opts(Selection::Soft);
        let eval = |s: &ParamStore| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let b = s.bind(&mut g, |_| true);
            let out = model.ssl_forward(&mut g, &b, &batch, &rngs, &o).unwrap();
            let mut grads = g.backward(out.loss);
            (g.scalar(out.loss), s.collect_grads(&mut grads, &b))
        };
        let (_, analytic) = eval(&store);
        let analytic: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
        let mut numeric = Vec::new();
        for id in store.ids() {
            numeric.extend(
                finite_diff_grad(
                    |p| {
                        let mut s = store.clone();
                        s.get_mut(id).data_mut().copy_from_slice(p);
                        Ok(eval(&s).0)
                    },
                    store.get(id).data(),
                    1e-6,
                )
                .unwrap(),
            );
        }
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-5, "relative error {err:e}");
    }
}
