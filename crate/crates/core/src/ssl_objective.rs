//! Contrastive, diversity and feature-penalty losses, distractor sampling
//! and the monitoring metrics computed alongside them.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

pub const DIVERSITY_WEIGHT: f64 = 0.1;
pub const PENALTY_WEIGHT: f64 = 10.0;
pub const CONTRASTIVE_TEMPERATURE: f64 = 0.1;

/// Loss values and metrics for one batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub diversity: f64,
    pub penalty: f64,
    pub total: f64,
    pub masked_steps: usize,
    /// Masked steps whose target outscored every distractor.
    pub correct: usize,
    /// Perplexity of the batch-averaged selection distribution, per codebook.
    pub perplexities: Vec<f64>,
}

impl LossBreakdown {
    pub fn accuracy(&self) -> f64 {
        if self.masked_steps == 0 {
            0.0
        } else {
            self.correct as f64 / self.masked_steps as f64
        }
    }

    /// Contrastive loss per masked step.
    pub fn contrastive_per_step(&self) -> f64 {
        if self.masked_steps == 0 {
            0.0
        } else {
            self.contrastive / self.masked_steps as f64
        }
    }
}

/// `L_c + 0.1 L_d + 10 L_p`.
pub fn combine(contrastive: f64, diversity: f64, penalty: f64) -> f64 {
    contrastive + DIVERSITY_WEIGHT * diversity + PENALTY_WEIGHT * penalty
}

/// Graph version of [`combine`].
pub fn combine_graph(g: &mut Graph, contrastive: Var, diversity: Var, penalty: Var) -> Var {
    let d = g.scale(diversity, DIVERSITY_WEIGHT);
    let p = g.scale(penalty, PENALTY_WEIGHT);
    let s = g.add(contrastive, d);
    g.add(s, p)
}

/// For each of `m` masked steps, `k` distractor positions drawn uniformly
/// from the other `m - 1`; without replacement when possible.
pub fn sample_distractors(m: usize, k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two masked steps to draw distractors, got {m}"
        )));
    }
    let others = m - 1;
    let skip = |i: usize, j: usize| if j >= i { j + 1 } else { j };
    Ok((0..m)
        .map(|i| {
            if others >= k {
                index::sample(rng, others, k).into_iter().map(|j| skip(i, j)).collect()
            } else {
                (0..k).map(|_| skip(i, rng.below(others))).collect()
            }
        })
        .collect())
}

/// Contrastive loss over masked steps.
///
/// `context` and `targets` are `[m, d]` projections at the masked steps;
/// `distractors[i]` lists the rows of `targets` competing with row `i`.
/// Returns the summed loss and the number of steps whose target has the
/// strictly highest similarity.
pub fn contrastive_loss(
    g: &mut Graph,
    context: Var,
    targets: Var,
    distractors: &[Vec<usize>],
    temperature: f64,
) -> Result<(Var, usize)> {
    let m = g.shape(context)[0];
    if m == 0 || distractors.len() != m || g.shape(targets)[0] != m {
        return Err(Error::Shape(format!(
            "contrastive loss needs matching nonempty step counts, got {m} context rows, {} target rows, {} distractor lists",
            g.shape(targets)[0],
            distractors.len()
        )));
    }
    let c = g.row_normalize(context)?;
    let q = g.row_normalize(targets)?;
    let sim = g.matmul_t(c, q, false, true);
    let sim = g.scale(sim, 1.0 / temperature);
    let candidates: Vec<Vec<usize>> = distractors
        .iter()
        .enumerate()
        .map(|(i, d)| std::iter::once(i).chain(d.iter().copied()).collect())
        .collect();
    let s = g.value(sim);
    let correct = candidates
        .iter()
        .enumerate()
        .filter(|(i, cand)| {
            let target = s.get2(*i, cand[0]);
            cand[1..].iter().all(|&j| s.get2(*i, j) < target)
        })
        .count();
    Ok((g.contrastive_ce(sim, &candidates), correct))
}

/// Diversity loss `sum over codebooks of (V - perplexity(mean p))` where each
/// entry of `probs` holds one codebook's `[n, V]` selection probabilities
/// for every frame of the batch. Also returns the perplexities.
pub fn diversity_loss(g: &mut Graph, probs: &[Var]) -> (Var, Vec<f64>) {
    let mut total: Option<Var> = None;
    let mut ppl = Vec::with_capacity(probs.len());
    for &p in probs {
        let v = g.shape(p)[1] as f64;
        let mean = g.mean_rows(p);
        let neg_entropy = g.xlogx_sum(mean);
        let entropy = g.scale(neg_entropy, -1.0);
        let perplexity = g.exp(entropy);
        ppl.push(g.scalar(perplexity));
        let term = g.scale(perplexity, -1.0);
        let vc = g.constant(Tensor::scalar(v));
        let term = g.add(term, vc);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    (total, ppl)
}

/// Mean of squared latent components over the valid frames `z: [T, d]`.
pub fn l2_penalty(g: &mut Graph, z: Var) -> Var {
    let sq = g.mul(z, z);
    g.mean_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn eval_contrastive(c: &[f64], q: &[f64], d: usize, dist: &[Vec<usize>]) -> (f64, usize) {
        let m = c.len() / d;
        let mut g = Graph::new();
        let cv = g.constant(Tensor::from_parts(vec![m, d], c.to_vec()));
        let qv = g.constant(Tensor::from_parts(vec![m, d], q.to_vec()));
        let (l, acc) = contrastive_loss(&mut g, cv, qv, dist, CONTRASTIVE_TEMPERATURE).unwrap();
        (g.scalar(l), acc)
    }

    #[test]
    fn distractor_examples() {
        let mut rng = Rng::new(0);
        assert_eq!(sample_distractors(2, 1, &mut rng).unwrap(), vec![vec![1], vec![0]]);
        let d = sample_distractors(101, 100, &mut rng).unwrap();
        for (i, di) in d.iter().enumerate() {
            let mut s = di.clone();
            s.sort_unstable();
            let expected: Vec<usize> = (0..101).filter(|&j| j != i).collect();
            assert_eq!(s, expected);
        }
        assert!(sample_distractors(1, 1, &mut rng).is_err());
        let forced = sample_distractors(3, 5, &mut rng).unwrap();
        for (i, di) in forced.iter().enumerate() {
            assert_eq!(di.len(), 5);
            assert!(!di.contains(&i));
        }
    }

    #[test]
    fn distractors_are_uniform() {
        let mut rng = Rng::new(1);
        let mut counts = [0usize; 6];
        for _ in 0..10_000 {
            let d = sample_distractors(6, 2, &mut rng).unwrap();
            for &j in &d[0] {
                counts[j] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        // Each of 5 candidates is expected 4000 times; binomial sd is about 40.
        for &c in &counts[1..] {
            assert!((c as f64 - 4000.0).abs() < 200.0, "{counts:?}");
        }
    }

    #[test]
    fn uniform_similarity_gives_log_k_plus_one() {
        // Identical vectors everywhere: every similarity equals 1.
        let c = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let dist = vec![vec![1, 2], vec![0, 2], vec![1, 0]];
        let (l, acc) = eval_contrastive(&c, &c, 2, &dist);
        assert!((l - 3.0 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(acc, 0);
    }

    #[test]
    fn closed_form_with_opposed_distractors() {
        // Each target has similarity 1 with its context, each distractor -1.
        for k in [1usize, 3] {
            let m = k + 1;
            let mut c = vec![0.0; m * 2];
            let mut q = vec![0.0; m * 2];
            c[0] = 1.0;
            q[0] = 1.0;
            for i in 1..m {
                c[2 * i] = -1.0;
                q[2 * i] = -1.0;
            }
            let dist: Vec<Vec<usize>> = vec![(1..m).collect()];
            let mut g = Graph::new();
            let cv = g.constant(Tensor::from_parts(vec![m, 2], c));
            let qv = g.constant(Tensor::from_parts(vec![m, 2], q));
            let c0 = g.slice_rows(cv, 0, 1);
            let cand = vec![std::iter::once(0).chain(dist[0].iter().copied()).collect()];
            let cn = g.row_normalize(c0).unwrap();
            let qn = g.row_normalize(qv).unwrap();
            let sim = g.matmul_t(cn, qn, false, true);
            let sim = g.scale(sim, 1.0 / CONTRASTIVE_TEMPERATURE);
            let l = g.contrastive_ce(sim, &cand);
            let expected = (1.0 + k as f64 * (-20f64).exp()).ln();
            let got = g.scalar(l);
            assert!((got - expected).abs() <= 1e-6 * expected, "k={k}: {got:e} vs {expected:e}");
        }
        let (l, acc) = eval_contrastive(&[1.0, 0.0, -1.0, 0.0], &[1.0, 0.0, -1.0, 0.0], 2, &[vec![1], vec![0]]);
        let expected = 2.0 * (1.0 + (-20f64).exp()).ln();
        assert!((l - expected).abs() <= 1e-6 * expected);
        assert_eq!(acc, 2);
    }

    #[test]
    fn no_distractors_means_zero_loss() {
        let (l, acc) = eval_contrastive(&[1.0, 0.5, -0.3, 2.0], &[0.2, 0.1, 1.0, 1.0], 2, &[vec![], vec![]]);
        assert_eq!(l, 0.0);
        assert_eq!(acc, 2);
    }

    #[test]
    fn diversity_examples() {
        let run = |p: Vec<f64>, v: usize| {
            let mut g = Graph::new();
            let n = p.len() / v;
            let pv = g.constant(Tensor::from_parts(vec![n, v], p));
            let (l, ppl) = diversity_loss(&mut g, &[pv]);
            (g.scalar(l), ppl[0])
        };
        let (l, ppl) = run(vec![0.25; 8], 4);
        assert!(l.abs() < 1e-12 && (ppl - 4.0).abs() < 1e-12);
        let (l, _) = run(vec![0.0, 1.0, 0.0, 0.0], 4);
        assert!((l - 3.0).abs() < 1e-12);
        let (l, ppl) = run(vec![0.5, 0.5, 0.0, 0.0], 4);
        assert!((l - 2.0).abs() < 1e-12 && (ppl - 2.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_examples() {
        let run = |z: Vec<f64>, d: usize| {
            let mut g = Graph::new();
            let zv = g.constant(Tensor::from_parts(vec![z.len() / d, d], z));
            let l = l2_penalty(&mut g, zv);
            g.scalar(l)
        };
        assert_eq!(run(vec![0.0; 6], 3), 0.0);
        assert_eq!(run(vec![1.0; 6], 3), 1.0);
        assert!((run(vec![3.0, 4.0], 2) - 12.5).abs() < 1e-12);
    }

    #[test]
    fn combine_examples() {
        assert!((combine(1.0, 1.0, 1.0) - 11.1).abs() < 1e-12);
        assert_eq!(combine(0.0, 0.0, 0.0), 0.0);
        assert!((combine(2.0, 0.5, 0.01) - 2.15).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(2);
        let (m, d, v) = (5, 3, 4);
        let c: Vec<f64> = (0..m * d).map(|_| rng.normal()).collect();
        let q: Vec<f64> = (0..m * d).map(|_| rng.normal()).collect();
        let logits: Vec<f64> = (0..m * v).map(|_| rng.normal()).collect();
        let dist = sample_distractors(m, 3, &mut rng).unwrap();
        let f = |c: &[f64], q: &[f64], logits: &[f64], which: usize| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let cv = g.variable(Tensor::from_parts(vec![m, d], c.to_vec()));
            let qv = g.variable(Tensor::from_parts(vec![m, d], q.to_vec()));
            let lv = g.variable(Tensor::from_parts(vec![m, v], logits.to_vec()));
            let out = match which {
                0 => contrastive_loss(&mut g, cv, qv, &dist, CONTRASTIVE_TEMPERATURE).unwrap().0,
                1 => {
                    let p = g.softmax_rows(lv);
                    diversity_loss(&mut g, &[p]).0
                }
                _ => l2_penalty(&mut g, cv),
            };
            let grads = g.backward(out);
            let get = |x: Var| grads.get(x).map(|t| t.data().to_vec()).unwrap_or_default();
            (g.scalar(out), vec![get(cv), get(qv), get(lv)])
        };
        for which in 0..3 {
            let (_, analytic) = f(&c, &q, &logits, which);
            let inputs = [&c, &q, &logits];
            for (k, input) in inputs.iter().enumerate() {
                if analytic[k].is_empty() {
                    continue;
                }
                let numeric = finite_diff_grad(
                    |p| {
                        let mut a = [c.clone(), q.clone(), logits.clone()];
                        a[k] = p.to_vec();
                        Ok(f(&a[0], &a[1], &a[2], which).0)
                    },
                    input,
                    1e-6,
                )
                .unwrap();
                let err = relative_error(&analytic[k], &numeric, 1e-8);
                assert!(err < 1e-5, "loss {which} input {k}: {err:e}");
            }
        }
    }
}
