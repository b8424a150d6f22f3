use std::collections::HashMap;

use super::kernels::{
    channel_layout, col2im3_acc, im2col3, log_softmax_rows, matmul_acc, matmul_nt_acc,
    matmul_tn_acc,
};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Blend coefficient: a constant, optionally multiplied by a scalar on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Coef {
    pub value: f64,
    pub scale: Option<Var>,
}

impl Coef {
    pub fn constant(value: f64) -> Self {
        Coef { value, scale: None }
    }

    pub fn scaled(value: f64, scale: Var) -> Self {
        Coef {
            value,
            scale: Some(scale),
        }
    }
}

impl From<f64> for Coef {
    fn from(value: f64) -> Self {
        Coef::constant(value)
    }
}

/// Per-channel batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Biased variance over the reduced axes.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel {
        x: Var,
        bias: Var,
    },
    ScaleAdd {
        base: Var,
        terms: Vec<(Coef, Var)>,
    },
    Relu(Var),
    Tanh(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Conv3x3 {
        x: Var,
        w: Var,
    },
    GlobalAvgPool(Var),
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; kept for leaves only.
    grad: Option<Vec<f64>>,
}

/// Eager reverse-mode recorder.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum of value buffer lengths currently held by the tape.
    pub fn retained_scalars(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.zero_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut t = store.get(id).tensor.clone();
        t.zero_grad();
        let v = self.push(t.with_requires_grad(true), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.nodes[v.0].grad.as_deref().map(|g| (*id, g)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| c * x);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1, or axis 0 for
    /// vectors).
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = channel_layout(&shape);
        if self.shape(bias) != [c] {
            return Err(Error::dim("add_channel", &shape, self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..outer {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += b[ch]);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddChannel { x, bias }, rg))
    }

    /// `base + Σ cᵢ·tᵢ`, differentiable in every tensor and in any scalar
    /// attached to a coefficient.
    pub fn scale_add(&mut self, base: Var, terms: &[(Coef, Var)]) -> Result<Var> {
        let mut out = self.value(base).clone();
        out.zero_grad();
        let mut rg = self.rg(base);
        for &(coef, t) in terms {
            self.same_shape("scale_add", base, t)?;
            let c = self.coef_value(coef)?;
            rg |= self.rg(t) || coef.scale.is_some_and(|s| self.rg(s));
            if c == 0.0 {
                continue;
            }
            for (o, v) in out.data_mut().iter_mut().zip(self.value(t).data()) {
                *o += c * v;
            }
        }
        let out = out.with_requires_grad(false);
        Ok(self.push(
            out,
            Op::ScaleAdd {
                base,
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    fn coef_value(&self, coef: Coef) -> Result<f64> {
        match coef.scale {
            None => Ok(coef.value),
            Some(s) => Ok(coef.value * self.value(s).item()?),
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Per-channel normalization.
    ///
    /// With `running = None` the statistics come from the batch and are
    /// returned so the caller can update its running estimates; otherwise the
    /// supplied `(mean, var)` are used as constants.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<NormStats>)> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = channel_layout(&shape);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("norm", &shape, self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let count = outer * inner;
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("norm", &shape, &[m.len()]));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for i in 0..outer {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let base = (i * c + ch) * inner;
                        *m += xs[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for i in 0..outer {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        var[ch] += xs[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..outer {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for s in base..base + inner {
                    xhat[s] = (xs[s] - mean[ch]) * inv_std[ch];
                    out[s] = g[ch] * xhat[s] + b[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = running.is_none();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        let stats = batch_stats.then_some(NormStats { mean, var, count });
        Ok((v, stats))
    }

    /// 3×3 convolution, stride 1, zero padding 1. `x: [n, cin, h, w]`,
    /// `w: [cout, cin, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::dim("conv3x3", &sx, &sw));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        let hw = h * wd;
        let mut out = vec![0.0; n * cout * hw];
        let mut cols = vec![0.0; cin * 9 * hw];
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        for i in 0..n {
            im2col3(&xs[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, &mut cols);
            matmul_acc(
                ws,
                &cols,
                &mut out[i * cout * hw..(i + 1) * cout * hw],
                cout,
                cin * 9,
                hw,
            );
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(vec![n, cout, h, wd], out)?,
            Op::Conv3x3 { x, w },
            rg,
        ))
    }

    /// Mean over all axes after the channel axis: `[n, c, ...] → [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::dim("global_avg_pool", &shape, &[]));
        }
        let (outer, c, inner) = channel_layout(&shape);
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().sum::<f64>() / inner as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![outer, c], out)?,
            Op::GlobalAvgPool(x),
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let logp = log_softmax_rows(self.value(logits).data(), k);
        let n = labels.len() as f64;
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| logp[i * k + l])
            .sum::<f64>()
            / n;
        let probs = logp.into_iter().map(f64::exp).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Err(Error::Contract(
                "loss is not connected to any differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| matmul_nt_acc(g, bv, ga, m, k, n));
                acc(*b, &mut |gb| matmul_tn_acc(av, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi)
            }),
            Op::AddChannel { x, bias } => {
                let (outer, c, inner) = channel_layout(nodes[x.0].value.shape());
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    for i in 0..outer {
                        for (ch, o) in gb.iter_mut().enumerate() {
                            let base = (i * c + ch) * inner;
                            *o += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::ScaleAdd { base, terms } => {
                acc(*base, &mut |gb| add_into(gb, g));
                for &(coef, t) in terms {
                    let c = self.coef_value(coef)?;
                    acc(t, &mut |gt| {
                        gt.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi)
                    });
                    if let Some(s) = coef.scale {
                        let dot: f64 = g
                            .iter()
                            .zip(nodes[t.0].value.data())
                            .map(|(a, b)| a * b)
                            .sum();
                        acc(s, &mut |gs| gs[0] += coef.value * dot);
                    }
                }
            }
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((o, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = nodes[idx].value.data();
                acc(*a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(yv) {
                        *o += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (outer, c, inner) = channel_layout(nodes[x.0].value.shape());
                let gam = nodes[gamma.0].value.data();
                let count = (outer * inner) as f64;
                acc(*gamma, &mut |gg| {
                    for i in 0..outer {
                        for (ch, o) in gg.iter_mut().enumerate() {
                            let base = (i * c + ch) * inner;
                            *o += (base..base + inner).map(|s| g[s] * xhat[s]).sum::<f64>();
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for i in 0..outer {
                        for (ch, o) in gb.iter_mut().enumerate() {
                            let base = (i * c + ch) * inner;
                            *o += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    if !batch_stats {
                        for i in 0..outer {
                            for ch in 0..c {
                                let base = (i * c + ch) * inner;
                                let k = gam[ch] * inv_std[ch];
                                for s in base..base + inner {
                                    gx[s] += g[s] * k;
                                }
                            }
                        }
                        return;
                    }
                    let mut sum1 = vec![0.0; c];
                    let mut sum2 = vec![0.0; c];
                    for i in 0..outer {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            for s in base..base + inner {
                                let d = g[s] * gam[ch];
                                sum1[ch] += d;
                                sum2[ch] += d * xhat[s];
                            }
                        }
                    }
                    for i in 0..outer {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            let k = inv_std[ch] / count;
                            for s in base..base + inner {
                                let d = g[s] * gam[ch];
                                gx[s] += k * (count * d - sum1[ch] - xhat[s] * sum2[ch]);
                            }
                        }
                    }
                });
            }
            Op::Conv3x3 { x, w } => {
                let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
                let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let cout = sw[0];
                let hw = h * wd;
                let (xs, ws) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                let mut cols = vec![0.0; cin * 9 * hw];
                acc(*w, &mut |gw| {
                    for i in 0..n {
                        im2col3(&xs[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, &mut cols);
                        let gi = &g[i * cout * hw..(i + 1) * cout * hw];
                        matmul_nt_acc(gi, &cols, gw, cout, cin * 9, hw);
                    }
                });
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        cols.iter_mut().for_each(|v| *v = 0.0);
                        let gi = &g[i * cout * hw..(i + 1) * cout * hw];
                        matmul_tn_acc(ws, gi, &mut cols, cout, cin * 9, hw);
                        col2im3_acc(&cols, cin, h, wd, &mut gx[i * cin * hw..(i + 1) * cin * hw]);
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, inner) = channel_layout(nodes[x.0].value.shape());
                acc(*x, &mut |gx| {
                    for (chunk, gi) in gx.chunks_mut(inner).zip(g) {
                        chunk.iter_mut().for_each(|o| *o += gi / inner as f64);
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let k = nodes[logits.0].value.shape()[1];
                let n = labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[i * k + j] += g[0] * (probs[i * k + j] - onehot) / n;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}
