//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value, so node order
//! is a topological order and [`Graph::backward`] is a single reverse sweep.
//! Operations are layer-sized (dense, conv, batch norm, losses) rather than
//! scalar-sized, each with a hand-written backward rule.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::loss::LossConfig;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Running statistics consumed and (in training) updated by batch norm.
pub struct BnStats<'a> {
    pub mean: &'a mut Tensor,
    pub var: &'a mut Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

enum Op {
    Input,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    WeightedBce {
        p: Var,
        labels: Vec<f64>,
        cfg: LossConfig,
    },
    BceLogits {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to a leaf or parameter.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => self
                    .grads
                    .get(i)
                    .and_then(|g| g.as_deref())
                    .map(|g| (id, g)),
                _ => None,
            })
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free variable whose gradient is retained after `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += y;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng, "scale")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= *v);
        let ng = self.needs(a);
        self.push(out, Op::Square(a), ng, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng, "mean")
    }

    /// `y[b, o] = sum_i w[o, i] x[b, i] + bias[o]`
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Dimension {
                op: "dense",
                left: xs,
                right: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(Error::Dimension {
                op: "dense bias",
                left: ws,
                right: bs,
            });
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut y = vec![0.0; batch * out];
        for r in 0..batch {
            let xr = &xv[r * inp..(r + 1) * inp];
            for o in 0..out {
                y[r * out + o] = kernels::dot(&wv[o * inp..(o + 1) * inp], xr) + bv[o];
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::new(vec![batch, out], y)?,
            Op::Dense { x, w, b },
            ng,
            "dense",
        )
    }

    /// Zero-padded cross-correlation over `[batch, in_ch, H, W]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                left: xs,
                right: ks,
            });
        }
        if self.value(b).shape() != [ks[0]] {
            return Err(Error::Dimension {
                op: "conv2d bias",
                left: ks,
                right: self.value(b).shape().to_vec(),
            });
        }
        if stride == 0 || ks[2] == 0 || ks[3] == 0 {
            return Err(Error::config("conv2d needs stride >= 1 and kernel >= 1"));
        }
        let oh = ConvGeom::out_extent(xs[2], ks[2], stride, pad);
        let ow = ConvGeom::out_extent(xs[3], ks[3], stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::config(format!(
                "conv2d output extent not positive for input {xs:?}, kernel {ks:?}, stride {stride}, pad {pad}"
            )));
        };
        let geom = ConvGeom {
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            oh,
            ow,
        };
        let batch = xs[0];
        let mut y = vec![0.0; batch * geom.out_len()];
        {
            let xv = self.value(x).data();
            let kv = self.value(k).data();
            let bv = self.value(b).data();
            let in_len = geom.in_len();
            self.exec
                .for_each_chunk_mut(&mut y, geom.out_len(), |n, out| {
                    kernels::conv_forward_sample(
                        &xv[n * in_len..(n + 1) * in_len],
                        kv,
                        bv,
                        &geom,
                        out,
                    );
                });
        }
        let ng = self.needs(x) || self.needs(k) || self.needs(b);
        let value = Tensor::new(vec![batch, geom.out_ch, oh, ow], y)?;
        self.push(value, Op::Conv2d { x, k, b, geom }, ng, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng, "sigmoid")
    }

    /// Per-channel normalization of `[batch, channels, ...]`.
    ///
    /// Training normalizes by batch statistics (biased variance) and folds
    /// them into `stats` with `running = momentum * running + (1 - momentum) * batch`
    /// (unbiased variance). Inference normalizes by `stats` unchanged.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        training: bool,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::Dimension {
                op: "batch_norm",
                left: xs,
                right: vec![],
            });
        }
        let (batch, ch) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [ch] {
                return Err(Error::Dimension {
                    op: if what == "gamma" {
                        "batch_norm gamma"
                    } else {
                        "batch_norm beta"
                    },
                    left: xs.clone(),
                    right: self.value(v).shape().to_vec(),
                });
            }
        }
        if stats.mean.shape() != [ch] || stats.var.shape() != [ch] {
            return Err(Error::Dimension {
                op: "batch_norm running stats",
                left: xs,
                right: stats.mean.shape().to_vec(),
            });
        }
        if training && batch < 2 {
            return Err(Error::usage(
                "batch norm in training mode needs a batch of at least 2",
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let m = (batch * spatial) as f64;
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        if training {
            for n in 0..batch {
                for c in 0..ch {
                    let s = &xv[(n * ch + c) * spatial..(n * ch + c + 1) * spatial];
                    mean[c] += s.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for n in 0..batch {
                for c in 0..ch {
                    let s = &xv[(n * ch + c) * spatial..(n * ch + c + 1) * spatial];
                    var[c] += s.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
        } else {
            mean.copy_from_slice(stats.mean.data());
            var.copy_from_slice(stats.var.data());
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + stats.epsilon).sqrt())
            .collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for n in 0..batch {
            for c in 0..ch {
                let base = (n * ch + c) * spatial;
                for i in base..base + spatial {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    y[i] = gv[c] * xhat[i] + bv[c];
                }
            }
        }
        if training {
            let mo = stats.momentum;
            let unbias = m / (m - 1.0);
            for c in 0..ch {
                let rm = &mut stats.mean.data_mut()[c];
                *rm = mo * *rm + (1.0 - mo) * mean[c];
                let rv = &mut stats.var.data_mut()[c];
                *rv = mo * *rv + (1.0 - mo) * var[c] * unbias;
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(xs, y)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            ng,
            "batch_norm",
        )
    }

    /// Inverted dropout: keep with probability `keep_prob`, scale kept values by `1 / keep_prob`.
    pub fn dropout<R: Rng>(&mut self, x: Var, keep_prob: f64, rng: &mut R) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::config(format!(
                "keep_prob {keep_prob} outside (0, 1]"
            )));
        }
        let scale = 1.0 / keep_prob;
        let n = self.value(x).len();
        let mask: Vec<f64> = if keep_prob >= 1.0 {
            vec![1.0; n]
        } else {
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < keep_prob {
                        scale
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, ng, "dropout")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng, "reshape")
    }

    /// Flattens `[batch, ...]` into `[batch, features]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.shape()[0], t.row_len()];
        self.reshape(x, shape)
    }

    /// Concatenates `[batch, d_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let batch = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != batch {
                return Err(Error::Dimension {
                    op: "concat",
                    left: self.value(*first).shape().to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for r in 0..batch {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(vec![batch, total], out)?,
            Op::Concat(parts.to_vec()),
            ng,
            "concat",
        )
    }

    /// Mean of squared differences against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Dimension {
                op: "mse",
                left: p.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let loss = super::loss::mse(p.data(), target.data());
        let ng = self.needs(pred);
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            ng,
            "mse",
        )
    }

    /// Class-weighted binary cross-entropy on probabilities, averaged over the batch.
    pub fn weighted_bce(&mut self, p: Var, labels: &[f64], cfg: LossConfig) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(Error::Dimension {
                op: "weighted_bce",
                left: pv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let loss = super::loss::weighted_bce_mean(&cfg, pv.data(), labels);
        let ng = self.needs(p);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                p,
                labels: labels.to_vec(),
                cfg,
            },
            ng,
            "weighted_bce",
        )
    }

    /// `sum_i weights[i] * bce(sigmoid(x[i]), targets[i])`, computed from logits.
    pub fn bce_logits(&mut self, x: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != targets.len() || xv.len() != weights.len() {
            return Err(Error::Dimension {
                op: "bce_logits",
                left: xv.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut loss = 0.0;
        for ((&z, &t), &w) in xv.data().iter().zip(targets).zip(weights) {
            if w != 0.0 {
                loss += w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
            "bce_logits",
        )
    }

    /// `sum_i weights[i] * smooth_l1(x[i] - targets[i])` with transition point `beta`.
    pub fn smooth_l1(
        &mut self,
        x: Var,
        targets: &[f64],
        weights: &[f64],
        beta: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != targets.len() || xv.len() != weights.len() {
            return Err(Error::Dimension {
                op: "smooth_l1",
                left: xv.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut loss = 0.0;
        for ((&z, &t), &w) in xv.data().iter().zip(targets).zip(weights) {
            if w != 0.0 {
                let d = (z - t).abs();
                loss += w * if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                };
            }
        }
        let ng = self.needs(x);
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                x,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                beta,
            },
            ng,
            "smooth_l1",
        )
    }

    /// Reverse sweep from a scalar node. Gradients of leaves and parameters are
    /// retained; intermediate gradients are released as soon as they are consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(gy);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |g| kernels::axpy(g, 1.0, gy));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * bv[j];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * av[j];
                    }
                });
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, |g| kernels::axpy(g, *f, gy)),
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for j in 0..g.len() {
                        g[j] += 2.0 * av[j] * gy[j];
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|v| *v += gy[0] / n));
            }
            Op::Dense { x, w, b } => {
                let xs = self.value(*x).shape();
                let (batch, inp) = (xs[0], xs[1]);
                let out = self.value(*w).shape()[0];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |g| {
                    for r in 0..batch {
                        let gr = &mut g[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let d = gy[r * out + o];
                            if d != 0.0 {
                                kernels::axpy(gr, d, &wv[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |g| {
                    for r in 0..batch {
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let d = gy[r * out + o];
                            if d != 0.0 {
                                kernels::axpy(&mut g[o * inp..(o + 1) * inp], d, xr);
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for r in 0..batch {
                        for o in 0..out {
                            g[o] += gy[r * out + o];
                        }
                    }
                });
            }
            Op::Conv2d { x, k, b, geom } => {
                let batch = self.value(*x).shape()[0];
                let (xv, kv) = (self.value(*x).data(), self.value(*k).data());
                let need_dx = self.needs(*x);
                let (in_len, out_len) = (geom.in_len(), geom.out_len());
                let per_sample = self.exec.map_range(batch, |n| {
                    kernels::conv_backward_sample(
                        &xv[n * in_len..(n + 1) * in_len],
                        kv,
                        &gy[n * out_len..(n + 1) * out_len],
                        geom,
                        need_dx,
                    )
                });
                self.accumulate(grads, *x, |g| {
                    for (n, s) in per_sample.iter().enumerate() {
                        if let Some(dx) = &s.dx {
                            kernels::axpy(&mut g[n * in_len..(n + 1) * in_len], 1.0, dx);
                        }
                    }
                });
                self.accumulate(grads, *k, |g| {
                    for s in &per_sample {
                        kernels::axpy(g, 1.0, &s.dkernel);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for s in &per_sample {
                        kernels::axpy(g, 1.0, &s.dbias);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            g[j] += gy[j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.accumulate(grads, *x, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[j] * yv[j] * (1.0 - yv[j]);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let xs = self.value(*x).shape();
                let (batch, ch) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for n in 0..batch {
                    for c in 0..ch {
                        let base = (n * ch + c) * spatial;
                        for j in base..base + spatial {
                            dgamma[c] += gy[j] * xhat[j];
                            dbeta[c] += gy[j];
                        }
                    }
                }
                self.accumulate(grads, *x, |g| {
                    let m = (batch * spatial) as f64;
                    for n in 0..batch {
                        for c in 0..ch {
                            let base = (n * ch + c) * spatial;
                            let k = gv[c] * inv_std[c];
                            for j in base..base + spatial {
                                g[j] += if *training {
                                    k * (gy[j] - dbeta[c] / m - xhat[j] * dgamma[c] / m)
                                } else {
                                    k * gy[j]
                                };
                            }
                        }
                    }
                });
                self.accumulate(grads, *gamma, |g| kernels::axpy(g, 1.0, &dgamma));
                self.accumulate(grads, *beta, |g| kernels::axpy(g, 1.0, &dbeta));
            }
            Op::Dropout { x, mask } => self.accumulate(grads, *x, |g| {
                for j in 0..g.len() {
                    g[j] += gy[j] * mask[j];
                }
            }),
            Op::Reshape(x) => self.accumulate(grads, *x, |g| kernels::axpy(g, 1.0, gy)),
            Op::Concat(parts) => {
                let batch = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.accumulate(grads, p, |g| {
                        for r in 0..batch {
                            kernels::axpy(
                                &mut g[r * w..(r + 1) * w],
                                1.0,
                                &gy[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let n = pv.len() as f64;
                self.accumulate(grads, *pred, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[0] * 2.0 * (pv[j] - target[j]) / n;
                    }
                });
            }
            Op::WeightedBce { p, labels, cfg } => {
                let pv = self.value(*p).data();
                let n = pv.len() as f64;
                self.accumulate(grads, *p, |g| {
                    for j in 0..g.len() {
                        g[j] += gy[0] * super::loss::weighted_bce_dp(cfg, pv[j], labels[j]) / n;
                    }
                });
            }
            Op::BceLogits {
                x,
                targets,
                weights,
            } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for j in 0..g.len() {
                        if weights[j] != 0.0 {
                            g[j] += gy[0] * weights[j] * (sigmoid(xv[j]) - targets[j]);
                        }
                    }
                });
            }
            Op::SmoothL1 {
                x,
                targets,
                weights,
                beta,
            } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for j in 0..g.len() {
                        if weights[j] != 0.0 {
                            let d = xv[j] - targets[j];
                            let dl = if d.abs() < *beta {
                                d / beta
                            } else {
                                d.signum()
                            };
                            g[j] += gy[0] * weights[j] * dl;
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
