//! Convolutional feature encoder: raw 16 kHz audio to latent vectors at 50 Hz.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{conv_out_len, Graph, Tensor, Var};
use crate::params::{self, Bound, Builder, ParamId, ParamStore};

/// Samples per latent frame.
pub const SAMPLES_PER_FRAME: usize = 320;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub paddings: Vec<usize>,
    pub grad_scale: f64,
}

impl EncoderConfig {
    pub fn canonical() -> Self {
        EncoderConfig {
            channels: 512,
            kernels: vec![10, 3, 3, 3, 3, 2, 2],
            strides: vec![5, 2, 2, 2, 2, 2, 2],
            paddings: vec![3, 1, 1, 1, 1, 0, 0],
            grad_scale: 0.1,
        }
    }

    pub fn toy() -> Self {
        EncoderConfig {
            channels: 32,
            ..Self::canonical()
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.channels == 0 {
            errs.push("encoder channels must be positive".to_string());
        }
        let n = self.kernels.len();
        if n == 0 || self.strides.len() != n || self.paddings.len() != n {
            errs.push("encoder kernels, strides and paddings must have equal nonzero length".into());
        }
        if self.strides.iter().product::<usize>() != SAMPLES_PER_FRAME {
            errs.push(format!("encoder strides must multiply to {SAMPLES_PER_FRAME}"));
        }
        if !(self.grad_scale > 0.0 && self.grad_scale <= 1.0) {
            errs.push("encoder grad_scale must lie in (0, 1]".into());
        }
        errs
    }

    /// Length produced by the stacked convolutions before trimming, or `None`
    /// when some layer receives fewer samples than its kernel.
    pub fn conv_output_len(&self, samples: usize) -> Option<usize> {
        let mut t = samples;
        for ((k, s), p) in self.kernels.iter().zip(&self.strides).zip(&self.paddings) {
            t = conv_out_len(t, *k, *s, *p)?;
        }
        Some(t)
    }
}

/// Number of latent frames for `samples` input samples.
pub fn num_frames(samples: usize) -> usize {
    samples / SAMPLES_PER_FRAME
}

/// Latent vectors of one utterance, time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    /// `T x channels`.
    pub vectors: Tensor,
    /// Frames that come from real audio rather than batch padding.
    pub valid_len: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    cfg: EncoderConfig,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    norm_gain: ParamId,
    norm_bias: ParamId,
}

impl FeatureEncoder {
    pub const PREFIX: &'static str = "encoder.";

    pub(crate) fn build(cfg: &EncoderConfig, b: &mut Builder) -> Self {
        let c = cfg.channels;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 1;
        for (i, &k) in cfg.kernels.iter().enumerate() {
            let fan_in = (cin * k) as f64;
            weights.push(b.param(
                &format!("encoder.conv{i}.weight"),
                &[c, cin, k],
                params::normal((2.0 / fan_in).sqrt()),
            ));
            biases.push(b.param(&format!("encoder.conv{i}.bias"), &[c], params::zeros));
            cin = c;
        }
        FeatureEncoder {
            cfg: cfg.clone(),
            weights,
            biases,
            norm_gain: b.param("encoder.norm.gain", &[c], params::ones),
            norm_bias: b.param("encoder.norm.bias", &[c], params::zeros),
        }
    }

    pub fn init(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut crate::Rng) -> Self {
        Self::build(cfg, &mut Builder::init(store, rng))
    }

    pub fn attach(cfg: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        let mut b = Builder::attach(store);
        let enc = Self::build(cfg, &mut b);
        b.finish()?;
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Latent sequence `[floor(r / 320), channels]` for `r` samples, passed
    /// through the gradient-scaling layer.
    pub fn forward(&self, g: &mut Graph, b: &Bound, wave: &[f64]) -> Result<Var> {
        let r = wave.len();
        if r < SAMPLES_PER_FRAME {
            return Err(Error::InvalidArgument(format!(
                "waveform has {r} samples; at least {SAMPLES_PER_FRAME} are needed for one frame"
            )));
        }
        let frames = num_frames(r);
        match self.cfg.conv_output_len(r) {
            Some(t) if t >= frames => {}
            other => {
                return Err(Error::Shape(format!(
                    "convolution stack yields {other:?} frames for {r} samples, need {frames}"
                )))
            }
        }
        let mut x = g.constant(Tensor::from_parts(vec![1, r], wave.to_vec()));
        for i in 0..self.weights.len() {
            x = g.conv1d(
                x,
                b[self.weights[i]],
                Some(b[self.biases[i]]),
                self.cfg.strides[i],
                self.cfg.paddings[i],
                1,
            );
            if i == 0 {
                x = g.group_norm(x, self.cfg.channels, b[self.norm_gain], b[self.norm_bias]);
            }
            x = g.gelu(x);
        }
        let x = g.slice_cols(x, 0, frames);
        let z = g.transpose(x);
        Ok(g.grad_scale(z, self.cfg.grad_scale))
    }

    /// Evaluate the encoder without recording gradients.
    pub fn encode(&self, store: &ParamStore, wave: &[f64]) -> Result<LatentSequence> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let z = self.forward(&mut g, &b, wave)?;
        Ok(LatentSequence {
            vectors: g.value(z).clone(),
            valid_len: num_frames(wave.len()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, Rng};

    #[test]
    fn frame_counts() {
        let cfg = EncoderConfig::canonical();
        for (r, t) in [(16000, 50), (320, 1), (13280, 41)] {
            assert_eq!(num_frames(r), t);
            let conv = cfg.conv_output_len(r).unwrap();
            assert!(conv == t || conv == t + 1, "r={r}: conv gives {conv}");
        }
    }

    #[test]
    fn encode_produces_floor_frames() {
        let cfg = EncoderConfig {
            channels: 4,
            ..EncoderConfig::canonical()
        };
        let mut store = ParamStore::new();
        let enc = FeatureEncoder::init(&cfg, &mut store, &mut Rng::new(0));
        let mut rng = Rng::new(1);
        for r in [320, 639, 640, 13280, 16000] {
            let wave: Vec<f64> = (0..r).map(|_| rng.normal() * 0.1).collect();
            let z = enc.encode(&store, &wave).unwrap();
            assert_eq!(z.vectors.shape(), &[r / 320, 4]);
        }
        assert!(enc.encode(&store, &[0.0; 319]).is_err());
    }

    #[test]
    fn gradient_scale_factor() {
        let cfg = EncoderConfig {
            channels: 2,
            ..EncoderConfig::canonical()
        };
        let mut store = ParamStore::new();
        let enc = FeatureEncoder::init(&cfg, &mut store, &mut Rng::new(3));
        let unscaled = FeatureEncoder {
            cfg: EncoderConfig {
                grad_scale: 1.0,
                ..cfg.clone()
            },
            ..enc.clone()
        };
        let mut rng = Rng::new(4);
        let wave: Vec<f64> = (0..700).map(|_| rng.normal()).collect();
        let grad = |e: &FeatureEncoder| {
            let mut g = Graph::new();
            let b = store.bind(&mut g, |_| true);
            let z = e.forward(&mut g, &b, &wave).unwrap();
            let s = g.sum_all(z);
            let mut grads = g.backward(s);
            store.collect_grads(&mut grads, &b)
        };
        let (a, u) = (grad(&enc), grad(&unscaled));
        for (x, y) in a.iter().zip(&u) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - 0.1 * q).abs() <= 1e-12 * q.abs().max(1.0));
            }
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let cfg = EncoderConfig {
            channels: 2,
            grad_scale: 1.0,
            ..EncoderConfig::canonical()
        };
        let mut store = ParamStore::new();
        let enc = FeatureEncoder::init(&cfg, &mut store, &mut Rng::new(5));
        let mut rng = Rng::new(6);
        let wave: Vec<f64> = (0..960).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let objective = |s: &ParamStore| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let b = s.bind(&mut g, |_| true);
            let z = enc.forward(&mut g, &b, &wave).unwrap();
            let wv = g.constant(Tensor::from_parts(vec![3, 2], w.clone()));
            let p = g.mul(z, wv);
            let out = g.sum_all(p);
            let mut grads = g.backward(out);
            (g.scalar(out), s.collect_grads(&mut grads, &b))
        };
        let (_, analytic) = objective(&store);
        let analytic: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
        let mut numeric = Vec::new();
        for id in store.ids() {
            numeric.extend(
                finite_diff_grad(
                    |p| {
                        let mut s = store.clone();
                        s.get_mut(id).data_mut().copy_from_slice(p);
                        Ok(objective(&s).0)
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
