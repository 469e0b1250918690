//! Product quantization of latent vectors with learned codebooks and
//! straight-through gumbel-softmax selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_similarity, Graph, Rng, Tensor, Var};
use crate::params::{self, Bound, Builder, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub codebooks: usize,
    pub entries: usize,
    pub entry_dim: usize,
}

impl QuantizerConfig {
    pub fn canonical() -> Self {
        QuantizerConfig {
            codebooks: 2,
            entries: 320,
            entry_dim: 128,
        }
    }

    pub fn toy() -> Self {
        QuantizerConfig {
            codebooks: 2,
            entries: 32,
            entry_dim: 16,
        }
    }

    /// Width of a quantized vector.
    pub fn output_dim(&self) -> usize {
        self.codebooks * self.entry_dim
    }

    /// Number of distinct quantized vectors.
    pub fn combinations(&self) -> u128 {
        (self.entries as u128).pow(self.codebooks as u32)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.codebooks == 0 {
            errs.push("quantizer needs at least one codebook".to_string());
        }
        if self.entries < 2 {
            errs.push("codebooks need at least 2 entries".to_string());
        }
        if self.entry_dim == 0 {
            errs.push("codebook entry dimension must be positive".to_string());
        }
        errs
    }
}

/// Gumbel-softmax temperature: `max(floor, start * decay^step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempSchedule {
    pub start: f64,
    pub floor: f64,
    pub decay: f64,
}

impl TempSchedule {
    pub const START: f64 = 2.0;
    pub const FLOOR: f64 = 0.5;

    /// Schedule that reaches `floor` exactly at `step`.
    pub fn reaching_floor_at(start: f64, floor: f64, step: u64) -> Self {
        let decay = (floor / start).powf(1.0 / step.max(1) as f64);
        TempSchedule { start, floor, decay }
    }

    /// Default schedule for a run of `total_steps`: from 2 down to 0.5,
    /// reaching the floor after `floor_fraction` of the run.
    pub fn for_run(total_steps: u64, floor_fraction: f64) -> Self {
        let at = (total_steps as f64 * floor_fraction).round() as u64;
        Self::reaching_floor_at(Self::START, Self::FLOOR, at)
    }

    pub fn at(&self, step: u64) -> f64 {
        let t = self.start * self.decay.powf(step as f64);
        t.max(self.floor)
    }
}

/// Temperature at `step` of a run of `total_steps` under the default schedule.
pub fn temperature_at(step: u64, total_steps: u64) -> f64 {
    TempSchedule::for_run(total_steps, 0.75).at(step)
}

/// How codewords are picked in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Hard one-hot of the noisy logits forward, gradient of the noisy softmax backward.
    Gumbel,
    /// Noisy softmax weights in both passes; differentiable, used for gradient checks.
    Soft,
    /// Noise-free argmax of the logits, for evaluation.
    Argmax,
}

/// Graph handles produced by [`Quantizer::forward`].
#[derive(Debug, Clone)]
pub struct QuantizerOutput {
    /// `T x (codebooks * entry_dim)`.
    pub q: Var,
    /// Per codebook, `T x entries` plain softmax of the logits.
    pub probs: Vec<Var>,
    /// Per codebook, the selected entry for every step.
    pub indices: Vec<Vec<usize>>,
}

/// Evaluated quantization of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSequence {
    pub q: Tensor,
    pub probs: Vec<Tensor>,
    pub indices: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Quantizer {
    cfg: QuantizerConfig,
    weight: ParamId,
    bias: ParamId,
    codebooks: Vec<ParamId>,
}

impl Quantizer {
    pub(crate) fn build(cfg: &QuantizerConfig, input_dim: usize, b: &mut Builder) -> Self {
        let gv = cfg.codebooks * cfg.entries;
        let bound = 1.0 / (cfg.entry_dim as f64).sqrt();
        Quantizer {
            cfg: cfg.clone(),
            weight: b.param("quantizer.weight", &[input_dim, gv], params::normal(1.0)),
            bias: b.param("quantizer.bias", &[gv], params::zeros),
            codebooks: (0..cfg.codebooks)
                .map(|i| {
                    b.param(
                        &format!("quantizer.codebook{i}"),
                        &[cfg.entries, cfg.entry_dim],
                        params::uniform(-bound, bound),
                    )
                })
                .collect(),
        }
    }

    pub fn init(cfg: &QuantizerConfig, input_dim: usize, store: &mut ParamStore, rng: &mut Rng) -> Self {
        Self::build(cfg, input_dim, &mut Builder::init(store, rng))
    }

    pub fn attach(cfg: &QuantizerConfig, input_dim: usize, store: &ParamStore) -> Result<Self> {
        let mut b = Builder::attach(store);
        let q = Self::build(cfg, input_dim, &mut b);
        b.finish()?;
        Ok(q)
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }

    pub fn codebook_ids(&self) -> &[ParamId] {
        &self.codebooks
    }

    /// Quantize `z: [T, input_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        z: Var,
        tau: f64,
        selection: Selection,
        rng: &mut Rng,
    ) -> Result<QuantizerOutput> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        let v = self.cfg.entries;
        let t = g.shape(z)[0];
        let logits = g.linear(z, b[self.weight], b[self.bias]);
        let mut chosen = Vec::with_capacity(self.cfg.codebooks);
        let mut probs = Vec::with_capacity(self.cfg.codebooks);
        let mut indices = Vec::with_capacity(self.cfg.codebooks);
        for (i, &book) in self.codebooks.iter().enumerate() {
            let lg = g.slice_cols(logits, i * v, v);
            let p = g.softmax_rows(lg);
            probs.push(p);
            let (weights, idx) = match selection {
                Selection::Argmax => {
                    let idx: Vec<usize> = g.value(lg).data().chunks(v).map(argmax).collect();
                    let hard = one_hot(&idx, v);
                    (g.straight_through(hard, p), idx)
                }
                Selection::Gumbel | Selection::Soft => {
                    let noise: Vec<f64> = (0..t * v).map(|_| rng.gumbel()).collect();
                    let noise = g.constant(Tensor::from_parts(vec![t, v], noise));
                    let perturbed = g.add(lg, noise);
                    let perturbed = g.scale(perturbed, 1.0 / tau);
                    let idx: Vec<usize> = g.value(perturbed).data().chunks(v).map(argmax).collect();
                    let soft = g.softmax_rows(perturbed);
                    if selection == Selection::Soft {
                        (soft, idx)
                    } else {
                        (g.straight_through(one_hot(&idx, v), soft), idx)
                    }
                }
            };
            indices.push(idx);
            chosen.push(g.matmul(weights, b[book]));
        }
        let q = if chosen.len() == 1 {
            chosen[0]
        } else {
            g.concat_cols(&chosen)
        };
        Ok(QuantizerOutput { q, probs, indices })
    }

    /// Quantize a latent sequence without recording gradients.
    pub fn quantize(
        &self,
        store: &ParamStore,
        z: &Tensor,
        tau: f64,
        selection: Selection,
        rng: &mut Rng,
    ) -> Result<QuantizedSequence> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &b, zv, tau, selection, rng)?;
        Ok(QuantizedSequence {
            q: g.value(out.q).clone(),
            probs: out.probs.iter().map(|p| g.value(*p).clone()).collect(),
            indices: out.indices,
        })
    }
}

fn one_hot(idx: &[usize], v: usize) -> Tensor {
    let mut data = vec![0.0; idx.len() * v];
    for (r, &i) in idx.iter().enumerate() {
        data[r * v + i] = 1.0;
    }
    Tensor::from_parts(vec![idx.len(), v], data)
}

/// Average, minimum and maximum cosine similarity over all unordered pairs of
/// distinct codewords.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub avg: f64,
    pub min: f64,
    pub max: f64,
}

pub fn codebook_similarity_stats(codebook: &Tensor) -> Result<SimilarityStats> {
    let v = codebook.rows();
    if v < 2 {
        return Err(Error::InvalidArgument("similarity needs at least two codewords".into()));
    }
    if let Some(i) = (0..v).find(|&i| codebook.row(i).iter().all(|x| *x == 0.0)) {
        return Err(Error::Numeric(format!("codeword {i} has zero norm")));
    }
    let (mut sum, mut min, mut max, mut n) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0usize);
    for i in 0..v {
        for j in i + 1..v {
            let s = cosine_similarity(codebook.row(i), codebook.row(j))?;
            sum += s;
            min = min.min(s);
            max = max.max(s);
            n += 1;
        }
    }
    Ok(SimilarityStats {
        avg: sum / n as f64,
        min,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, perplexity, relative_error, Rng};
    use proptest::prelude::*;

    fn toy(store: &mut ParamStore, seed: u64) -> Quantizer {
        let cfg = QuantizerConfig {
            codebooks: 2,
            entries: 4,
            entry_dim: 3,
        };
        Quantizer::init(&cfg, 5, store, &mut Rng::new(seed))
    }

    #[test]
    fn canonical_vocabulary_size() {
        let c = QuantizerConfig::canonical();
        assert_eq!(c.combinations(), 102_400);
        assert_eq!(c.output_dim(), 256);
    }

    #[test]
    fn selection_copies_codeword_exactly() {
        let cfg = QuantizerConfig {
            codebooks: 1,
            entries: 2,
            entry_dim: 1,
        };
        let mut store = ParamStore::new();
        let quant = Quantizer::init(&cfg, 1, &mut store, &mut Rng::new(0));
        *store.get_mut(quant.weight) = Tensor::zeros(&[1, 2]);
        *store.get_mut(quant.bias) = Tensor::vector(vec![-100.0, 100.0]);
        *store.get_mut(quant.codebooks[0]) = Tensor::from_parts(vec![2, 1], vec![5.0, 9.0]);
        let z = Tensor::from_parts(vec![3, 1], vec![0.3, -1.0, 2.0]);
        let out = quant
            .quantize(&store, &z, 2.0, Selection::Gumbel, &mut Rng::new(1))
            .unwrap();
        assert_eq!(out.q.data(), &[9.0, 9.0, 9.0]);
    }

    #[test]
    fn temperature_schedule() {
        assert_eq!(temperature_at(0, 1000), 2.0);
        assert_eq!(temperature_at(1_000_000, 1000), 0.5);
        let mut prev = f64::INFINITY;
        for s in 0..1200 {
            let t = temperature_at(s, 1000);
            assert!(t <= prev && t >= 0.5);
            prev = t;
        }
        assert!((TempSchedule::for_run(1000, 0.75).at(750) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn soft_path_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let quant = toy(&mut store, 2);
        let mut rng = Rng::new(3);
        let z = Tensor::from_parts(vec![3, 5], (0..15).map(|_| rng.normal()).collect());
        let w: Vec<f64> = (0..18).map(|_| rng.normal()).collect();
        let objective = |s: &ParamStore| {
            let mut g = Graph::new();
            let b = s.bind(&mut g, |_| true);
            let zv = g.constant(z.clone());
            let out = quant
                .forward(&mut g, &b, zv, 0.7, Selection::Soft, &mut Rng::new(4))
                .unwrap();
            let wv = g.constant(Tensor::from_parts(vec![3, 6], w.clone()));
            let p = g.mul(out.q, wv);
            let loss = g.sum_all(p);
            let mut grads = g.backward(loss);
            (g.scalar(loss), s.collect_grads(&mut grads, &b))
        };
        let (_, analytic) = objective(&store);
        for id in store.ids() {
            let numeric = finite_diff_grad(
                |p| {
                    let mut s = store.clone();
                    s.get_mut(id).data_mut().copy_from_slice(p);
                    Ok(objective(&s).0)
                },
                store.get(id).data(),
                1e-6,
            )
            .unwrap();
            let err = relative_error(analytic[id.index()].data(), &numeric, 1e-8);
            assert!(err < 1e-5, "{}: {err:e}", store.name(id));
        }
    }

    #[test]
    fn zero_logits_select_uniformly() {
        let cfg = QuantizerConfig {
            codebooks: 1,
            entries: 4,
            entry_dim: 2,
        };
        let mut store = ParamStore::new();
        let quant = Quantizer::init(&cfg, 3, &mut store, &mut Rng::new(0));
        *store.get_mut(quant.weight) = Tensor::zeros(&[3, 4]);
        *store.get_mut(quant.codebooks[0]) = Tensor::full(&[4, 2], 0.5);
        let z = Tensor::from_parts(vec![10_000, 3], vec![1.0; 30_000]);
        let out = quant
            .quantize(&store, &z, 1.0, Selection::Gumbel, &mut Rng::new(5))
            .unwrap();
        let mut counts = [0usize; 4];
        for &i in &out.indices[0] {
            counts[i] += 1;
        }
        // Binomial standard deviation at n = 10^4, p = 1/4 is about 43.
        for c in counts {
            assert!((c as f64 - 2500.0).abs() < 5.0 * 43.3, "{counts:?}");
        }
    }

    #[test]
    fn similarity_stats_examples() {
        let same = Tensor::from_parts(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = codebook_similarity_stats(&same).unwrap();
        for v in [s.avg, s.min, s.max] {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let orth = Tensor::from_parts(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]);
        assert_eq!(
            codebook_similarity_stats(&orth).unwrap(),
            SimilarityStats {
                avg: 0.0,
                min: 0.0,
                max: 0.0
            }
        );
        // Pairs of (1,0), (0,1), (1,1): cosines 0, 1/sqrt2, 1/sqrt2.
        let three = Tensor::from_parts(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let s = codebook_similarity_stats(&three).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.avg - 2.0 * r / 3.0).abs() < 1e-12);
        assert!(s.min.abs() < 1e-12 && (s.max - r).abs() < 1e-12);
        let zero = Tensor::from_parts(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        assert!(codebook_similarity_stats(&zero).is_err());
    }

    proptest! {
        #[test]
        fn forward_is_exact_codeword_concatenation(seed in 0u64..1000, tau in 0.1f64..3.0) {
            let mut store = ParamStore::new();
            let quant = toy(&mut store, seed);
            let mut rng = Rng::new(seed + 1);
            let z = Tensor::from_parts(vec![4, 5], (0..20).map(|_| rng.normal()).collect());
            let out = quant.quantize(&store, &z, tau, Selection::Gumbel, &mut rng).unwrap();
            for t in 0..4 {
                for (c, id) in quant.codebooks.iter().enumerate() {
                    let entry = store.get(*id).row(out.indices[c][t]);
                    prop_assert_eq!(&out.q.row(t)[c * 3..(c + 1) * 3], entry);
                }
                for p in &out.probs {
                    let row = p.row(t);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    let ppl = perplexity(row);
                    prop_assert!((1.0 - 1e-9..=4.0 + 1e-9).contains(&ppl));
                }
            }
        }

        #[test]
        fn similarity_stats_are_ordered(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let cb = Tensor::from_parts(vec![5, 3], (0..15).map(|_| rng.normal()).collect());
            let s = codebook_similarity_stats(&cb).unwrap();
            prop_assert!(-1.0 - 1e-12 <= s.min && s.min <= s.avg + 1e-12);
            prop_assert!(s.avg <= s.max + 1e-12 && s.max <= 1.0 + 1e-12);
        }
    }
}
