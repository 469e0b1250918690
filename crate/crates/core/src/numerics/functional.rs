//! Plain forward versions of the elementary operations.
//!
//! The autodiff graph uses the same kernels; these entry points exist for
//! evaluation code and tests that do not need gradients.

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance stabilizer for layer and group normalization.
pub const NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// GELU with the tanh approximation, elementwise.
pub fn gelu_tanh(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Normalize `x` to zero mean and unit variance, then apply `gain` and `bias`
/// per component.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "layer_norm needs a vector of length >= 2".into(),
        ));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape("layer_norm gain/bias length mismatch".into()));
    }
    let (mean, rstd) = moments(x.iter().copied());
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * rstd * g + b)
        .collect())
}

/// Group normalization of a `channels x time` tensor; each group spans
/// `channels / groups` whole channels and is normalized over all its entries.
pub fn group_norm(x: &Tensor, groups: usize, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::Shape("group_norm expects channels x time".into()));
    }
    let (c, t) = (x.rows(), x.cols());
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "{c} channels are not divisible into {groups} groups"
        )));
    }
    if gain.len() != c || bias.len() != c {
        return Err(Error::Shape("group_norm gain/bias must have one entry per channel".into()));
    }
    let per = c / groups;
    let mut out = vec![0.0; c * t];
    for g in 0..groups {
        let block = &x.data()[g * per * t..(g + 1) * per * t];
        let (mean, rstd) = moments(block.iter().copied());
        for ch in g * per..(g + 1) * per {
            for i in 0..t {
                out[ch * t + i] = (x.data()[ch * t + i] - mean) * rstd * gain[ch] + bias[ch];
            }
        }
    }
    Tensor::new(vec![c, t], out)
}

/// Mean and reciprocal standard deviation (population variance plus [`NORM_EPS`]).
pub(crate) fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One gumbel-softmax draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelDraw {
    /// One-hot vector at the argmax of the perturbed logits.
    pub hard: Vec<f64>,
    /// Softmax of the perturbed logits divided by the temperature.
    pub soft: Vec<f64>,
    pub index: usize,
}

pub fn gumbel_softmax(logits: &[f64], tau: f64, rng: &mut Rng) -> Result<GumbelDraw> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let perturbed: Vec<f64> = logits.iter().map(|l| (l + rng.gumbel()) / tau).collect();
    Ok(gumbel_from_perturbed(&perturbed))
}

pub(crate) fn gumbel_from_perturbed(perturbed: &[f64]) -> GumbelDraw {
    let index = argmax(perturbed);
    let mut hard = vec![0.0; perturbed.len()];
    hard[index] = 1.0;
    GumbelDraw {
        hard,
        soft: softmax(perturbed),
        index,
    }
}

/// Weight-normalized kernel: each output channel `o` of `direction`
/// (`out x ...`) becomes `magnitude[o] * v_o / |v_o|`.
pub fn weight_norm(direction: &Tensor, magnitude: &[f64]) -> Result<Tensor> {
    let out = direction.shape()[0];
    if magnitude.len() != out {
        return Err(Error::Shape("weight_norm needs one magnitude per output channel".into()));
    }
    let per = direction.numel() / out;
    let mut data = direction.data().to_vec();
    for (o, chunk) in data.chunks_mut(per).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric(format!(
                "weight_norm direction of output channel {o} has zero norm"
            )));
        }
        for v in chunk.iter_mut() {
            *v *= magnitude[o] / norm;
        }
    }
    Tensor::new(direction.shape().to_vec(), data)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `exp` of the Shannon entropy (natural log) of a distribution.
pub fn perplexity(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
        // Closed form evaluated independently with the constants spelled out.
        let x = 1.0f64;
        let expected =
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        assert!((gelu_scalar(1.0) - expected).abs() < 1e-15);
        // 40-digit mpmath evaluation of the closed form.
        assert!((gelu_scalar(1.0) - 0.841_191_990_608_276_7).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[4.0, 4.0, 4.0], &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]).unwrap();
        // variance 1 plus eps
        let s = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y[0] - s).abs() < 1e-12 && (y[1] + s).abs() < 1e-12);
        assert!((y[0] - 1.0).abs() < 1e-5);
        let y = layer_norm(&[0.3, 2.0, -5.0, 1.0], &[1.0; 4], &[0.7; 4]).unwrap();
        assert!((y.iter().sum::<f64>() / 4.0 - 0.7).abs() < 1e-12);
        assert!(layer_norm(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn group_norm_examples() {
        let x = Tensor::matrix(2, 2, vec![1.0, 3.0, 0.0, 0.0]).unwrap();
        let y = group_norm(&x, 2, &[1.0; 2], &[0.0; 2]).unwrap();
        let s = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-12);
        assert!((y.data()[1] - s).abs() < 1e-12);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);

        let x = Tensor::matrix(3, 4, vec![1.0, 2.0, 0.5, -1.0, 3.0, 3.0, 3.0, 3.0, 0.1, 0.2, 0.3, 0.9]).unwrap();
        let gain = [1.5, 0.5, 2.0];
        let bias = [0.1, -0.2, 0.3];
        let y = group_norm(&x, 3, &gain, &bias).unwrap();
        for c in 0..3 {
            let row = layer_norm(x.row(c), &[gain[c]; 4], &[bias[c]; 4]).unwrap();
            for (t, v) in row.iter().enumerate() {
                assert!((v - y.get2(c, t)).abs() < 1e-14);
            }
        }
        assert!(group_norm(&x, 2, &gain, &bias).is_err());
    }

    #[test]
    fn gumbel_hard_is_one_hot() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let d = gumbel_softmax(&[0.3, -1.0, 2.0, 0.0], 0.7, &mut rng).unwrap();
            assert_eq!(d.hard.iter().sum::<f64>(), 1.0);
            assert_eq!(d.hard.iter().filter(|&&h| h == 1.0).count(), 1);
            assert!((d.soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gumbel_softmax(&[1.0], 0.0, &mut rng).is_err());
    }

    #[test]
    fn gumbel_monte_carlo() {
        let mut rng = Rng::new(11);
        let n = 10_000;
        let mut first = 0;
        for _ in 0..n {
            if gumbel_softmax(&[100.0, 0.0, 0.0], 0.5, &mut rng).unwrap().index == 0 {
                first += 1;
            }
        }
        assert_eq!(first, n);

        let mut mean = vec![0.0; 4];
        for _ in 0..n {
            let d = gumbel_softmax(&[0.0; 4], 1000.0, &mut rng).unwrap();
            for (m, s) in mean.iter_mut().zip(&d.soft) {
                *m += s / n as f64;
            }
        }
        assert!(mean.iter().all(|m| (m - 0.25).abs() < 1e-2), "{mean:?}");
    }

    #[test]
    fn weight_norm_examples() {
        let v = Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
        assert_eq!(weight_norm(&v, &[1.0]).unwrap().data(), v.data());
        let v7 = v.map(|x| 7.0 * x);
        let a = weight_norm(&v, &[2.5]).unwrap();
        let b = weight_norm(&v7, &[2.5]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(weight_norm(&v, &[0.0]).unwrap().data().iter().all(|x| *x == 0.0));
        assert!(weight_norm(&Tensor::zeros(&[1, 3]), &[1.0]).is_err());
    }

    #[test]
    fn softmax_is_distribution() {
        let p = softmax(&[1000.0, -3.0, 2.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
