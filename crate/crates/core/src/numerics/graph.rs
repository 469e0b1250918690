//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its value. Calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`] for
//! every node that depends on a gradient-requiring leaf.
//!
//! Shape mismatches are programming errors and panic. Data-dependent failures
//! (zero-norm vectors, infeasible alignments) are reported as `Err`.

use super::functional::{gelu_grad_scalar, gelu_scalar, log_sum_exp};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    GradScale(Var, f64),
    StraightThrough(Var),
    ReplaceRows {
        x: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    WeightNorm {
        v: Var,
        g: Var,
        norms: Vec<f64>,
    },
    XLogXSum(Var),
    ContrastiveCe {
        sim: Var,
        candidates: Vec<Vec<usize>>,
    },
    Ctc {
        logp: Var,
        gamma: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    tin: usize,
    tout: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Output length of a 1-d convolution.
pub fn conv_out_len(tin: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = tin + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{name}: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary_same(a, b, "add", |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary_same(a, b, "sub", |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary_same(a, b, "mul", |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// `[n, d] + [d]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        let d = vx.cols();
        assert_eq!(vr.numel(), d, "add_row: width mismatch");
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (a, b) in chunk.iter_mut().zip(vr.data()) {
                *a += b;
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let ng = self.ng(x) || self.ng(row);
        self.push(t, Op::AddRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product of `a` (transposed if `ta`) and `b` (transposed if `tb`).
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = if ta { (va.cols(), va.rows()) } else { (va.rows(), va.cols()) };
        let (k2, n) = if tb { (vb.cols(), vb.rows()) } else { (vb.rows(), vb.cols()) };
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, va.data(), ta, vb.data(), tb, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    /// `x w + b` for `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(t, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_scalar);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(t, Op::Exp(x), ng)
    }

    /// Row-wise softmax of a matrix. Entries of `-inf` get probability zero.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(t, Op::LogSoftmaxRows(x), ng)
    }

    /// Layer normalization over the last dimension of `x: [n, d]`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.cols();
        assert!(vg.numel() == d && vb.numel() == d, "layer_norm: affine width mismatch");
        let n = vx.rows();
        let mut xhat = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in vx.data().chunks(d) {
            let (mean, r) = super::functional::moments(row.iter().copied());
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let t = Tensor::from_parts(vx.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            t,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Group normalization of `x: [channels, time]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (c, t) = (vx.rows(), vx.cols());
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        assert!(vg.numel() == c && vb.numel() == c, "group_norm: affine width mismatch");
        let block = (c / groups) * t;
        let mut xhat = Vec::with_capacity(c * t);
        let mut rstd = Vec::with_capacity(groups);
        let mut out = Vec::with_capacity(c * t);
        for (g, chunk) in vx.data().chunks(block).enumerate() {
            let (mean, r) = super::functional::moments(chunk.iter().copied());
            rstd.push(r);
            for (i, v) in chunk.iter().enumerate() {
                let ch = g * (c / groups) + i / t;
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[ch] + vb.data()[ch]);
            }
        }
        let tt = Tensor::from_parts(vec![c, t], out);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            tt,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// 1-d convolution of `x: [c_in, t]` with `w: [c_out, c_in / groups, k]`,
    /// zero padding `pad` on both sides.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (cin, tin) = (vx.rows(), vx.cols());
        let ws = vw.shape();
        assert_eq!(ws.len(), 3, "conv1d: kernel must be [c_out, c_in/groups, k]");
        let (cout, cin_g, kernel) = (ws[0], ws[1], ws[2]);
        assert!(groups > 0 && cin % groups == 0 && cout % groups == 0, "conv1d: bad groups");
        assert_eq!(cin_g, cin / groups, "conv1d: kernel input channels");
        let tout = conv_out_len(tin, kernel, stride, pad)
            .unwrap_or_else(|| panic!("conv1d: input length {tin} too short for kernel {kernel}"));
        let geom = ConvGeometry {
            cin,
            cout,
            kernel,
            stride,
            pad,
            groups,
            tin,
            tout,
        };
        let cols = im2col(vx.data(), &geom);
        let cout_g = cout / groups;
        let rows_g = cin_g * kernel;
        let mut out = vec![0.0; cout * tout];
        for g in 0..groups {
            gemm(
                cout_g,
                rows_g,
                tout,
                1.0,
                &vw.data()[g * cout_g * rows_g..(g + 1) * cout_g * rows_g],
                false,
                &cols[g * rows_g * tout..(g + 1) * rows_g * tout],
                false,
                0.0,
                &mut out[g * cout_g * tout..(g + 1) * cout_g * tout],
            );
        }
        let mut ng = self.ng(x) || self.ng(w);
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.numel(), cout, "conv1d: bias width");
            for (o, chunk) in out.chunks_mut(tout).enumerate() {
                let bo = vb.data()[o];
                for v in chunk {
                    *v += bo;
                }
            }
            ng |= self.ng(b);
        }
        self.push(
            Tensor::from_parts(vec![cout, tout], out),
            Op::Conv1d { x, w, b, geom, cols },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        assert!(start + len <= vx.rows(), "slice_rows out of range");
        let t = Tensor::from_parts(vec![len, d], vx.data()[start * d..(start + len) * d].to_vec());
        let ng = self.ng(x);
        self.push(t, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (n, d) = (vx.rows(), vx.cols());
        assert!(start + len <= d, "slice_cols out of range");
        let mut data = Vec::with_capacity(n * len);
        for row in vx.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, len], data), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), d, "concat_rows: width mismatch");
            data.extend_from_slice(v.data());
            n += v.rows();
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_parts(vec![n, d], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = self.value(*p);
                assert_eq!(v.rows(), n, "concat_cols: height mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_parts(vec![n, total], data), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rows `x[idx[0]], x[idx[1]], ...`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(vx.row(i));
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![idx.len(), d], data),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(t, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        let ng = self.ng(x);
        self.push(t, Op::MeanAll(x), ng)
    }

    /// Column means of `x: [n, d]`, shape `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        let mut out = vec![0.0; d];
        for row in v.data().chunks(d) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let ng = self.ng(x);
        self.push(Tensor::vector(out), Op::MeanRows(x), ng)
    }

    /// Scale every row of `x` to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.cols();
        let mut norms = Vec::with_capacity(v.rows());
        let mut data = Vec::with_capacity(v.numel());
        for (i, row) in v.data().chunks(d).enumerate() {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Numeric(format!("row {i} has zero norm")));
            }
            norms.push(n);
            data.extend(row.iter().map(|a| a / n));
        }
        let ng = self.ng(x);
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(t, Op::RowNormalize { x, norms }, ng))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `c`.
    pub fn grad_scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).clone();
        let ng = self.ng(x);
        self.push(t, Op::GradScale(x, c), ng)
    }

    /// Takes the value `hard` on the forward pass and routes the incoming
    /// gradient unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Var {
        assert_eq!(hard.shape(), self.shape(soft), "straight_through: shape mismatch");
        let ng = self.ng(soft);
        self.push(hard, Op::StraightThrough(soft), ng)
    }

    /// Copy of `x: [n, d]` where each row listed in `rows` is replaced by `fill: [d]`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, rows: &[usize]) -> Var {
        let (vx, vf) = (self.value(x), self.value(fill));
        let d = vx.cols();
        assert_eq!(vf.numel(), d, "replace_rows: fill width");
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let mut data = vx.data().to_vec();
        for &r in &rows {
            data[r * d..(r + 1) * d].copy_from_slice(vf.data());
        }
        let ng = self.ng(x) || self.ng(fill);
        self.push(
            Tensor::from_parts(vx.shape().to_vec(), data),
            Op::ReplaceRows { x, fill, rows },
            ng,
        )
    }

    /// `g[o] * v[o] / |v[o]|` for each leading index `o` of `v`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (vv, vg) = (self.value(v), self.value(g));
        let out = vv.shape()[0];
        assert_eq!(vg.numel(), out, "weight_norm: magnitude per output channel");
        let per = vv.numel() / out;
        let mut norms = Vec::with_capacity(out);
        let mut data = Vec::with_capacity(vv.numel());
        for (o, chunk) in vv.data().chunks(per).enumerate() {
            let n = chunk.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Numeric(format!(
                    "weight_norm direction of output channel {o} has zero norm"
                )));
            }
            norms.push(n);
            let s = vg.data()[o] / n;
            data.extend(chunk.iter().map(|a| a * s));
        }
        let ng = self.ng(v) || self.ng(g);
        let t = Tensor::from_parts(vv.shape().to_vec(), data);
        Ok(self.push(t, Op::WeightNorm { v, g, norms }, ng))
    }

    /// `sum x ln x` over all entries, with `0 ln 0 = 0`.
    pub fn xlogx_sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::XLogXSum(x), ng)
    }

    /// Sum over rows `i` of the cross entropy of picking column
    /// `candidates[i][0]` among columns `candidates[i]` of `sim`.
    /// Duplicate candidates each count in the denominator.
    pub fn contrastive_ce(&mut self, sim: Var, candidates: &[Vec<usize>]) -> Var {
        let vs = self.value(sim);
        assert_eq!(vs.rows(), candidates.len(), "contrastive_ce: one candidate list per row");
        let mut total = 0.0;
        let mut buf = Vec::new();
        for (i, cand) in candidates.iter().enumerate() {
            buf.clear();
            buf.extend(cand.iter().map(|&j| vs.get2(i, j)));
            total += log_sum_exp(&buf) - buf[0];
        }
        let ng = self.ng(sim);
        self.push(
            Tensor::scalar(total),
            Op::ContrastiveCe {
                sim,
                candidates: candidates.to_vec(),
            },
            ng,
        )
    }

    /// Connectionist temporal classification loss `-ln p(target | x)` from
    /// per-frame log-probabilities `logp: [t, classes]`.
    pub fn ctc_loss(&mut self, logp: Var, target: &[usize], blank: usize) -> Result<Var> {
        let v = self.value(logp);
        let (nll, gamma) = ctc_forward_backward(v.data(), v.rows(), v.cols(), target, blank)?;
        let ng = self.ng(logp);
        Ok(self.push(Tensor::scalar(nll), Op::Ctc { logp, gamma }, ng))
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(gy, vb, |g, x| g * x));
                acc(*b, zip_map(gy, va, |g, x| g * x));
            }
            Op::AddRow(x, r) => {
                acc(*x, gy.clone());
                let d = gy.cols();
                let mut gr = vec![0.0; d];
                for row in gy.data().chunks(d) {
                    for (o, v) in gr.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let shape = self.shape(*r).to_vec();
                acc(*r, Tensor::from_parts(shape, gr));
            }
            Op::Scale(x, c) => acc(*x, gy.map(|v| v * c)),
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (gy.rows(), gy.cols());
                let k = if *ta { va.rows() } else { va.cols() };
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    if *ta {
                        gemm(k, n, m, 1.0, vb.data(), *tb, gy.data(), true, 0.0, &mut ga);
                    } else {
                        gemm(m, n, k, 1.0, gy.data(), false, vb.data(), !*tb, 0.0, &mut ga);
                    }
                    acc(*a, Tensor::from_parts(va.shape().to_vec(), ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    if *tb {
                        gemm(n, m, k, 1.0, gy.data(), true, va.data(), *ta, 0.0, &mut gb);
                    } else {
                        gemm(k, m, n, 1.0, va.data(), !*ta, gy.data(), false, 0.0, &mut gb);
                    }
                    acc(*b, Tensor::from_parts(vb.shape().to_vec(), gb));
                }
            }
            Op::Transpose(x) => acc(*x, gy.transpose()),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, Tensor::from_parts(shape, gy.data().to_vec()));
            }
            Op::Gelu(x) => acc(*x, zip_map(gy, self.value(*x), |g, v| g * gelu_grad_scalar(v))),
            Op::Exp(x) => acc(*x, zip_map(gy, y, |g, v| g * v)),
            Op::SoftmaxRows(x) => {
                let d = y.cols();
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(gy.data().chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(p, g)| p * (g - dot)));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::LogSoftmaxRows(x) => {
                let d = y.cols();
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(gy.data().chunks(d)) {
                    let s: f64 = gr.iter().sum();
                    gx.extend(yr.iter().zip(gr).map(|(l, g)| g - l.exp() * s));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = y.cols();
                let vg = self.value(*gain).data();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = Vec::with_capacity(y.numel());
                for ((gr, hr), r) in gy.data().chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    norm_backward(gr, hr, |j| vg[j], *r, &mut gx);
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
                acc(*gain, Tensor::from_parts(self.shape(*gain).to_vec(), gg));
                acc(*bias, Tensor::from_parts(self.shape(*bias).to_vec(), gb));
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                rstd,
            } => {
                let (c, t) = (y.rows(), y.cols());
                let per = c / groups;
                let vg = self.value(*gain).data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    for k in 0..t {
                        gg[ch] += gy.data()[ch * t + k] * xhat[ch * t + k];
                        gb[ch] += gy.data()[ch * t + k];
                    }
                }
                let block = per * t;
                let mut gx = Vec::with_capacity(c * t);
                for g in 0..*groups {
                    let range = g * block..(g + 1) * block;
                    norm_backward(
                        &gy.data()[range.clone()],
                        &xhat[range],
                        |j| vg[g * per + j / t],
                        rstd[g],
                        &mut gx,
                    );
                }
                acc(*x, Tensor::from_parts(vec![c, t], gx));
                acc(*gain, Tensor::from_parts(self.shape(*gain).to_vec(), gg));
                acc(*bias, Tensor::from_parts(self.shape(*bias).to_vec(), gb));
            }
            Op::Conv1d { x, w, b, geom, cols } => {
                let g = *geom;
                let cin_g = g.cin / g.groups;
                let cout_g = g.cout / g.groups;
                let rows_g = cin_g * g.kernel;
                let vw = self.value(*w);
                if self.ng(*w) {
                    let mut gw = vec![0.0; vw.numel()];
                    for grp in 0..g.groups {
                        gemm(
                            cout_g,
                            g.tout,
                            rows_g,
                            1.0,
                            &gy.data()[grp * cout_g * g.tout..(grp + 1) * cout_g * g.tout],
                            false,
                            &cols[grp * rows_g * g.tout..(grp + 1) * rows_g * g.tout],
                            true,
                            0.0,
                            &mut gw[grp * cout_g * rows_g..(grp + 1) * cout_g * rows_g],
                        );
                    }
                    acc(*w, Tensor::from_parts(vw.shape().to_vec(), gw));
                }
                if self.ng(*x) {
                    let mut gcols = vec![0.0; cols.len()];
                    for grp in 0..g.groups {
                        gemm(
                            rows_g,
                            cout_g,
                            g.tout,
                            1.0,
                            &vw.data()[grp * cout_g * rows_g..(grp + 1) * cout_g * rows_g],
                            true,
                            &gy.data()[grp * cout_g * g.tout..(grp + 1) * cout_g * g.tout],
                            false,
                            0.0,
                            &mut gcols[grp * rows_g * g.tout..(grp + 1) * rows_g * g.tout],
                        );
                    }
                    acc(*x, Tensor::from_parts(vec![g.cin, g.tin], col2im(&gcols, &g)));
                }
                if let Some(b) = b {
                    let gb: Vec<f64> = gy.data().chunks(g.tout).map(|r| r.iter().sum()).collect();
                    acc(*b, Tensor::from_parts(self.shape(*b).to_vec(), gb));
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let d = vx.cols();
                let mut gx = vec![0.0; vx.numel()];
                gx[start * d..start * d + gy.numel()].copy_from_slice(gy.data());
                acc(*x, Tensor::from_parts(vx.shape().to_vec(), gx));
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let (d, len) = (vx.cols(), gy.cols());
                let mut gx = vec![0.0; vx.numel()];
                for (i, row) in gy.data().chunks(len).enumerate() {
                    gx[i * d + start..i * d + start + len].copy_from_slice(row);
                }
                acc(*x, Tensor::from_parts(vx.shape().to_vec(), gx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    let shape = self.shape(*p).to_vec();
                    acc(*p, Tensor::from_parts(shape, gy.data()[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = gy.cols();
                let mut off = 0;
                for p in parts {
                    let v = self.value(*p);
                    let w = v.cols();
                    let mut gp = Vec::with_capacity(v.numel());
                    for row in gy.data().chunks(total) {
                        gp.extend_from_slice(&row[off..off + w]);
                    }
                    acc(*p, Tensor::from_parts(v.shape().to_vec(), gp));
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let vx = self.value(*x);
                let d = vx.cols();
                let mut gx = vec![0.0; vx.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += gy.data()[k * d + j];
                    }
                }
                acc(*x, Tensor::from_parts(vx.shape().to_vec(), gx));
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                acc(*x, Tensor::full(&shape, gy.item()));
            }
            Op::MeanAll(x) => {
                let v = self.value(*x);
                acc(*x, Tensor::full(v.shape(), gy.item() / v.numel() as f64));
            }
            Op::MeanRows(x) => {
                let v = self.value(*x);
                let n = v.rows() as f64;
                let mut gx = Vec::with_capacity(v.numel());
                for _ in 0..v.rows() {
                    gx.extend(gy.data().iter().map(|g| g / n));
                }
                acc(*x, Tensor::from_parts(v.shape().to_vec(), gx));
            }
            Op::RowNormalize { x, norms } => {
                let d = y.cols();
                let mut gx = Vec::with_capacity(y.numel());
                for ((yr, gr), n) in y.data().chunks(d).zip(gy.data().chunks(d)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(u, g)| (g - u * dot) / n));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
            }
            Op::GradScale(x, c) => acc(*x, gy.map(|v| v * c)),
            Op::StraightThrough(soft) => acc(*soft, gy.clone()),
            Op::ReplaceRows { x, fill, rows } => {
                let d = y.cols();
                let mut gx = gy.data().to_vec();
                let mut gf = vec![0.0; d];
                for &r in rows {
                    for j in 0..d {
                        gf[j] += gx[r * d + j];
                        gx[r * d + j] = 0.0;
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
                acc(*fill, Tensor::from_parts(self.shape(*fill).to_vec(), gf));
            }
            Op::WeightNorm { v, g, norms } => {
                let vv = self.value(*v);
                let vg = self.value(*g);
                let per = vv.numel() / norms.len();
                let mut gv = Vec::with_capacity(vv.numel());
                let mut gg = Vec::with_capacity(norms.len());
                for (o, n) in norms.iter().enumerate() {
                    let vr = &vv.data()[o * per..(o + 1) * per];
                    let gr = &gy.data()[o * per..(o + 1) * per];
                    let dot: f64 = vr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    gg.push(dot);
                    let s = vg.data()[o] / n;
                    gv.extend(vr.iter().zip(gr).map(|(a, b)| s * (b - a / n * dot)));
                }
                acc(*v, Tensor::from_parts(vv.shape().to_vec(), gv));
                acc(*g, Tensor::from_parts(vg.shape().to_vec(), gg));
            }
            Op::XLogXSum(x) => {
                let g = gy.item();
                acc(*x, self.value(*x).map(|v| g * (v.max(1e-300).ln() + 1.0)));
            }
            Op::ContrastiveCe { sim, candidates } => {
                let vs = self.value(*sim);
                let g = gy.item();
                let mut gs = vec![0.0; vs.numel()];
                let d = vs.cols();
                let mut buf = Vec::new();
                for (i, cand) in candidates.iter().enumerate() {
                    buf.clear();
                    buf.extend(cand.iter().map(|&j| vs.get2(i, j)));
                    let lse = log_sum_exp(&buf);
                    for (k, &j) in cand.iter().enumerate() {
                        gs[i * d + j] += g * (buf[k] - lse).exp();
                    }
                    gs[i * d + cand[0]] -= g;
                }
                acc(*sim, Tensor::from_parts(vs.shape().to_vec(), gs));
            }
            Op::Ctc { logp, gamma } => {
                let g = gy.item();
                let shape = self.shape(*logp).to_vec();
                acc(*logp, Tensor::from_parts(shape, gamma.iter().map(|v| -g * v).collect()));
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

/// Shared normalization backward: `dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))`.
fn norm_backward(gy: &[f64], xhat: &[f64], gain: impl Fn(usize) -> f64, rstd: f64, out: &mut Vec<f64>) {
    let n = gy.len() as f64;
    let mut mean_d = 0.0;
    let mut mean_dh = 0.0;
    for (j, (g, h)) in gy.iter().zip(xhat).enumerate() {
        let d = g * gain(j);
        mean_d += d;
        mean_dh += d * h;
    }
    mean_d /= n;
    mean_dh /= n;
    for (j, (g, h)) in gy.iter().zip(xhat).enumerate() {
        out.push(rstd * (g * gain(j) - mean_d - h * mean_dh));
    }
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cin_g = g.cin / g.groups;
    let mut cols = vec![0.0; g.cin * g.kernel * g.tout];
    for ci in 0..g.cin {
        let xrow = &x[ci * g.tin..(ci + 1) * g.tin];
        let grp = ci / cin_g;
        let local = ci % cin_g;
        for k in 0..g.kernel {
            let row = (grp * cin_g + local) * g.kernel + k;
            let dst = &mut cols[row * g.tout..(row + 1) * g.tout];
            for (t, slot) in dst.iter_mut().enumerate() {
                let pos = (t * g.stride + k) as isize - g.pad as isize;
                if pos >= 0 && (pos as usize) < g.tin {
                    *slot = xrow[pos as usize];
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut x = vec![0.0; g.cin * g.tin];
    for ci in 0..g.cin {
        for k in 0..g.kernel {
            let row = ci * g.kernel + k;
            let src = &cols[row * g.tout..(row + 1) * g.tout];
            for (t, v) in src.iter().enumerate() {
                let pos = (t * g.stride + k) as isize - g.pad as isize;
                if pos >= 0 && (pos as usize) < g.tin {
                    x[ci * g.tin + pos as usize] += v;
                }
            }
        }
    }
    x
}

/// Minimum number of frames needed to emit `target` under CTC: one per label
/// plus one blank between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Log-space forward-backward. Returns the negative log-likelihood and the
/// posterior occupation `gamma[t, k]` (sum over extended states with label `k`).
pub(crate) fn ctc_forward_backward(
    logp: &[f64],
    frames: usize,
    classes: usize,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    if frames == 0 {
        return Err(Error::InvalidArgument("ctc: no frames".into()));
    }
    if let Some(bad) = target.iter().find(|&&k| k >= classes || k == blank) {
        return Err(Error::InvalidArgument(format!("ctc: invalid target label {bad}")));
    }
    let need = ctc_min_frames(target);
    if frames < need {
        return Err(Error::InvalidArgument(format!(
            "ctc: transcript needs at least {need} frames but only {frames} are available"
        )));
    }
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { target[s / 2] };
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && target[s / 2] != target[s / 2 - 1];
    let ninf = f64::NEG_INFINITY;
    let lp = |t: usize, k: usize| logp[t * classes + k];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, blank);
    if let Some(&first) = target.first() {
        alpha[1] = lp(0, first);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = [prev[s], ninf, ninf];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if can_skip(s) {
                terms[2] = prev[s - 2];
            }
            alpha[t * s_len + s] = log_sum_exp(&terms) + lp(t, label(s));
        }
    }
    // beta[t, s]: log-probability of emitting the rest after frame t given state s at t.
    let mut beta = vec![ninf; frames * s_len];
    // An empty target has the single all-blank path.
    let finals = if target.is_empty() { 1 } else { 2 };
    for s in s_len - finals..s_len {
        beta[(frames - 1) * s_len + s] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, label(s2));
            let mut terms = [next(s), ninf, ninf];
            if s + 1 < s_len {
                terms[1] = next(s + 1);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                terms[2] = next(s + 2);
            }
            beta[t * s_len + s] = log_sum_exp(&terms);
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_total = log_sum_exp(&last[s_len - finals..]);
    if !log_total.is_finite() {
        return Err(Error::Numeric("ctc: total path probability is zero".into()));
    }
    let mut gamma = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            if a > ninf {
                gamma[t * classes + label(s)] += (a - log_total).exp();
            }
        }
    }
    Ok((-log_total, gamma))
}
