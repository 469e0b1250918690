//! Span masking, convolutional relative positional embedding and the
//! post-LN transformer that turns masked latents into contextual vectors.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::params::{self, Bound, Builder, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub pos_kernel: usize,
    pub pos_groups: usize,
}

impl ContextConfig {
    pub fn canonical() -> Self {
        ContextConfig {
            dim: 768,
            layers: 12,
            heads: 12,
            ffn_dim: 2048,
            dropout: 0.1,
            pos_kernel: 128,
            pos_groups: 16,
        }
    }

    pub fn toy() -> Self {
        ContextConfig {
            dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 64,
            dropout: 0.1,
            pos_kernel: 128,
            pos_groups: 16,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            errs.push(format!("context dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.pos_groups == 0 || !self.dim.is_multiple_of(self.pos_groups) {
            errs.push(format!("context dim {} must be divisible by pos_groups {}", self.dim, self.pos_groups));
        }
        if self.pos_kernel == 0 {
            errs.push("pos_kernel must be positive".into());
        }
        if self.ffn_dim == 0 {
            errs.push("ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        errs
    }
}

/// Masked time steps of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// Span start positions, in draw order.
    pub starts: Vec<usize>,
    /// Sorted, distinct masked positions.
    pub indices: Vec<usize>,
}

impl MaskSpec {
    pub fn num_spans(&self) -> usize {
        self.starts.len()
    }

    /// No span could be placed, so the utterance has nothing to contrast.
    pub fn skip(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Number of mask spans `floor(T * p_m / L_m)` for a sequence of `valid_len` frames.
pub fn num_spans(valid_len: usize, p_m: f64, span: usize) -> usize {
    // The small offset keeps products such as 200 * 0.05 / 10 from flooring to 0.
    let n = (valid_len as f64 * p_m / span as f64 + 1e-9).floor() as usize;
    n.min(valid_len)
}

/// Draw `floor(T * p_m / L_m)` distinct span starts uniformly from the valid
/// frames and mask `L_m` frames from each, clipped at the sequence end.
pub fn sample_mask(valid_len: usize, p_m: f64, span: usize, rng: &mut Rng) -> Result<MaskSpec> {
    if valid_len == 0 {
        return Err(Error::InvalidArgument("cannot mask an empty sequence".into()));
    }
    if span == 0 || !(0.0..=1.0).contains(&p_m) {
        return Err(Error::InvalidArgument(format!(
            "mask span must be positive and p_m in [0, 1], got {span} and {p_m}"
        )));
    }
    let n = num_spans(valid_len, p_m, span);
    let starts = index::sample(rng, valid_len, n).into_vec();
    let mut hit = vec![false; valid_len];
    for &s in &starts {
        for slot in &mut hit[s..(s + span).min(valid_len)] {
            *slot = true;
        }
    }
    let indices = (0..valid_len).filter(|&i| hit[i]).collect();
    Ok(MaskSpec { starts, indices })
}

/// Replace the masked rows of `x` with the learned mask vector.
pub fn apply_mask(g: &mut Graph, x: Var, mask: &MaskSpec, mask_vector: Var) -> Var {
    if mask.indices.is_empty() {
        x
    } else {
        g.replace_rows(x, mask_vector, &mask.indices)
    }
}

/// Dropout masks come from this stream; `None` evaluates deterministically.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        if self.rate == 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let n: usize = g.shape(x).iter().product();
        let data = (0..n)
            .map(|_| if self.rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::from_parts(g.shape(x).to_vec(), data));
        g.mul(x, m)
    }
}

fn maybe_drop(drop: &mut Option<Dropout>, g: &mut Graph, x: Var) -> Var {
    match drop {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub(crate) fn build(name: &str, din: usize, dout: usize, b: &mut Builder) -> Self {
        Linear {
            w: b.param(&format!("{name}.weight"), &[din, dout], params::truncated_normal(0.02)),
            b: b.param(&format!("{name}.bias"), &[dout], params::zeros),
        }
    }

    pub(crate) fn apply(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        g.linear(x, bound[self.w], bound[self.b])
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    pub(crate) fn build(name: &str, dim: usize, b: &mut Builder) -> Self {
        Norm {
            gain: b.param(&format!("{name}.gain"), &[dim], params::ones),
            bias: b.param(&format!("{name}.bias"), &[dim], params::zeros),
        }
    }

    pub(crate) fn apply(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        g.layer_norm_rows(x, bound[self.gain], bound[self.bias])
    }
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    attn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: Norm,
}

/// Graph handles from [`ContextNetwork::forward`].
#[derive(Debug, Clone)]
pub struct ContextOutput {
    /// `T x dim`; rows past the valid length are padding.
    pub c: Var,
    /// Attention probabilities per layer and head, each `T x T`.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct ContextNetwork {
    cfg: ContextConfig,
    pos_direction: ParamId,
    pos_magnitude: ParamId,
    pos_bias: ParamId,
    norm: Norm,
    blocks: Vec<Block>,
}

impl ContextNetwork {
    pub const PREFIX: &'static str = "context.";

    pub(crate) fn build(cfg: &ContextConfig, b: &mut Builder) -> Self {
        let d = cfg.dim;
        let per_group = d / cfg.pos_groups;
        let std = (4.0 / (cfg.pos_kernel * d) as f64).sqrt();
        let fan = ((per_group * cfg.pos_kernel) as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("context.layer{i}");
                Block {
                    q: Linear::build(&format!("{p}.attn.q"), d, d, b),
                    k: Linear::build(&format!("{p}.attn.k"), d, d, b),
                    v: Linear::build(&format!("{p}.attn.v"), d, d, b),
                    out: Linear::build(&format!("{p}.attn.out"), d, d, b),
                    attn_norm: Norm::build(&format!("{p}.attn_norm"), d, b),
                    ffn_in: Linear::build(&format!("{p}.ffn.in"), d, cfg.ffn_dim, b),
                    ffn_out: Linear::build(&format!("{p}.ffn.out"), cfg.ffn_dim, d, b),
                    ffn_norm: Norm::build(&format!("{p}.ffn_norm"), d, b),
                }
            })
            .collect();
        ContextNetwork {
            cfg: cfg.clone(),
            pos_direction: b.param(
                "context.pos_conv.direction",
                &[d, per_group, cfg.pos_kernel],
                params::normal(std),
            ),
            pos_magnitude: b.param("context.pos_conv.magnitude", &[d], move |_, n| {
                vec![std * fan; n]
            }),
            pos_bias: b.param("context.pos_conv.bias", &[d], params::zeros),
            norm: Norm::build("context.norm", d, b),
            blocks,
        }
    }

    pub fn init(cfg: &ContextConfig, store: &mut ParamStore, rng: &mut Rng) -> Self {
        Self::build(cfg, &mut Builder::init(store, rng))
    }

    pub fn attach(cfg: &ContextConfig, store: &ParamStore) -> Result<Self> {
        let mut b = Builder::attach(store);
        let n = Self::build(cfg, &mut b);
        b.finish()?;
        Ok(n)
    }

    pub fn config(&self) -> &ContextConfig {
        &self.cfg
    }

    /// Convolutional positional embedding of `x: [T, dim]`, same length as `x`.
    pub fn positional_embedding(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let w = g.weight_norm(b[self.pos_direction], b[self.pos_magnitude])?;
        let xt = g.transpose(x);
        let k = self.cfg.pos_kernel;
        let y = g.conv1d(xt, w, Some(b[self.pos_bias]), 1, k / 2, self.cfg.pos_groups);
        let y = g.slice_cols(y, 0, t);
        let y = g.gelu(y);
        Ok(g.transpose(y))
    }

    /// Contextualize `x: [T, dim]` whose first `valid_len` rows are real frames.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        valid_len: usize,
        mut dropout: Option<Dropout>,
    ) -> Result<ContextOutput> {
        let t = g.shape(x)[0];
        let d = self.cfg.dim;
        if valid_len == 0 {
            return Err(Error::InvalidArgument("every frame of the input is padding".into()));
        }
        if valid_len > t {
            return Err(Error::Shape(format!("valid length {valid_len} exceeds {t} frames")));
        }
        let x = if valid_len < t {
            let head = g.slice_rows(x, 0, valid_len);
            let pad = g.constant(Tensor::zeros(&[t - valid_len, d]));
            g.concat_rows(&[head, pad])
        } else {
            x
        };
        let pos = self.positional_embedding(g, b, x)?;
        let h = g.add(x, pos);
        let mut h = self.norm.apply(g, b, h);

        let key_mask = (valid_len < t).then(|| {
            let mut m = vec![0.0; t * t];
            for row in m.chunks_mut(t) {
                for v in &mut row[valid_len..] {
                    *v = f64::NEG_INFINITY;
                }
            }
            g.constant(Tensor::from_parts(vec![t, t], m))
        });
        let heads = self.cfg.heads;
        let dh = d / heads;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let q = blk.q.apply(g, b, h);
            let q = g.scale(q, 1.0 / (dh as f64).sqrt());
            let k = blk.k.apply(g, b, h);
            let v = blk.v.apply(g, b, h);
            let mut outs = Vec::with_capacity(heads);
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh);
                let kh = g.slice_cols(k, hd * dh, dh);
                let vh = g.slice_cols(v, hd * dh, dh);
                let mut s = g.matmul_t(qh, kh, false, true);
                if let Some(m) = key_mask {
                    s = g.add(s, m);
                }
                let a = g.softmax_rows(s);
                probs.push(a);
                let a = maybe_drop(&mut dropout, g, a);
                outs.push(g.matmul(a, vh));
            }
            attention.push(probs);
            let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
            let o = blk.out.apply(g, b, o);
            let o = maybe_drop(&mut dropout, g, o);
            let r = g.add(h, o);
            h = blk.attn_norm.apply(g, b, r);

            let f = blk.ffn_in.apply(g, b, h);
            let f = g.gelu(f);
            let f = blk.ffn_out.apply(g, b, f);
            let f = maybe_drop(&mut dropout, g, f);
            let r = g.add(h, f);
            h = blk.ffn_norm.apply(g, b, r);
        }
        Ok(ContextOutput { c: h, attention })
    }

    /// Evaluate without dropout or gradient tracking.
    pub fn contextualize(&self, store: &ParamStore, x: &Tensor, valid_len: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &b, xv, valid_len, None)?;
        Ok(g.value(out.c).clone())
    }
}
