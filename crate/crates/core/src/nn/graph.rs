//! Reverse-mode differentiation over a per-batch tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the tape by name from a [`ParamSet`]; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients into that set.

use super::params::ParamSet;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Convolution padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad_left: usize,
        cols: Vec<f64>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Tanh(Var),
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        e: Var,
    },
    Broadcast {
        e: Var,
    },
    Reshape(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Operation tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, l] => Ok((b, c, l)),
        ref s => Err(Error::shape(op, format!("expected (batch, channels, length), got {s:?}"))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, f] => Ok((b, f)),
        ref s => Err(Error::shape(op, format!("expected (batch, features), got {s:?}"))),
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let value = params.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    /// 1D cross-correlation. `w` is `(out_ch, in_ch, k)`, `b` is `(out_ch)`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let (bs, cin, len) = dims3("conv1d", self.value(x))?;
        let (cout, wcin, k) = dims3("conv1d", self.value(w))?;
        if wcin != cin {
            return Err(Error::shape(
                "conv1d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be positive"));
        }
        let (lout, pad_left) = match pad {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::shape("conv1d", format!("same padding needs odd kernel, got {k}")));
                }
                let lout = len.div_ceil(stride);
                let total = ((lout - 1) * stride + k).saturating_sub(len);
                (lout, total / 2)
            }
            Padding::Valid => {
                if k > len {
                    return Err(Error::shape("conv1d", format!("kernel {k} longer than input {len}")));
                }
                ((len - k) / stride + 1, 0)
            }
        };
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias shape {:?}, expected [{cout}]", self.value(b).shape()),
                ));
            }
        }
        let n = bs * lout;
        let rows = cin * k;
        let xv = self.value(x).data();
        let mut cols = vec![0.0; rows * n];
        for ci in 0..cin {
            for kk in 0..k {
                let row = &mut cols[(ci * k + kk) * n..(ci * k + kk + 1) * n];
                for bi in 0..bs {
                    let src = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                    for o in 0..lout {
                        let pos = (o * stride + kk) as isize - pad_left as isize;
                        if pos >= 0 && (pos as usize) < len {
                            row[bi * lout + o] = src[pos as usize];
                        }
                    }
                }
            }
        }
        let mut ymat = vec![0.0; cout * n];
        gemm(cout, rows, n, self.value(w).data(), false, &cols, false, &mut ymat, 0.0);
        let mut out = vec![0.0; bs * cout * lout];
        let bias = b.map(|b| self.value(b).data());
        for co in 0..cout {
            let bval = bias.map_or(0.0, |bb| bb[co]);
            for bi in 0..bs {
                let dst = &mut out[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                let src = &ymat[co * n + bi * lout..co * n + (bi + 1) * lout];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bval;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![bs, cout, lout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
                cols,
            },
            rg,
        ))
    }

    /// Fully connected layer: `x (batch, in) * w^T (in, out) + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bs, fin) = dims2("dense", self.value(x))?;
        let (fout, wfin) = dims2("dense", self.value(w))?;
        if wfin != fin {
            return Err(Error::shape(
                "dense",
                format!("input has {fin} features, weight expects {wfin}"),
            ));
        }
        let mut out = vec![0.0; bs * fout];
        gemm(bs, fin, fout, self.value(x).data(), false, self.value(w).data(), true, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fout {
                return Err(Error::shape("dense", format!("bias length {}, expected {fout}", bv.len())));
            }
            for row in out.chunks_mut(fout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![bs, fout], out)?, Op::Dense { x, w, b }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Non-overlapping max pooling along length with window `factor`.
    pub fn maxpool1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (bs, c, len) = dims3("maxpool1d", self.value(x))?;
        if factor == 0 || len % factor != 0 {
            return Err(Error::shape("maxpool1d", format!("length {len} not divisible by {factor}")));
        }
        let lout = len / factor;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bs * c * lout);
        let mut argmax = Vec::with_capacity(bs * c * lout);
        for row in 0..bs * c {
            for o in 0..lout {
                let base = row * len + o * factor;
                let mut best = base;
                for j in base + 1..base + factor {
                    if xv[j] > xv[best] {
                        best = j;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![bs, c, lout], out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling along length.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (bs, c, len) = dims3("upsample_nearest", self.value(x))?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bs * c * len * factor);
        for &v in xv {
            out.extend(std::iter::repeat_n(v, factor));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![bs, c, len * factor], out)?, Op::Upsample { x, factor }, rg))
    }

    /// Concatenates along the channel (second) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let (ba, ca, la) = dims3("concat_channels", va)?;
        let (bb, cb, lb) = dims3("concat_channels", vb)?;
        if ba != bb || la != lb {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = Vec::with_capacity(ba * (ca + cb) * la);
        for i in 0..ba {
            out.extend_from_slice(va.item(i));
            out.extend_from_slice(vb.item(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![ba, ca + cb, la], out)?, Op::Concat { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut v = va.clone();
        v.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add { a, b }, rg))
    }

    /// Adds a per-(batch, channel) vector `e (batch, channels)` along length.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (bs, c, len) = dims3("add_channel", self.value(x))?;
        let (eb, ec) = dims2("add_channel", self.value(e))?;
        if eb != bs || ec != c {
            return Err(Error::shape("add_channel", format!("x ({bs}, {c}, _) vs e ({eb}, {ec})")));
        }
        let mut v = self.value(x).clone();
        let ev = self.value(e).data();
        for (row, chunk) in v.data_mut().chunks_mut(len).enumerate() {
            let add = ev[row];
            chunk.iter_mut().for_each(|a| *a += add);
        }
        let rg = self.rg(x) || self.rg(e);
        Ok(self.push(v, Op::AddChannel { x, e }, rg))
    }

    /// Repeats `e (batch, channels)` along a new length axis.
    pub fn broadcast_length(&mut self, e: Var, len: usize) -> Result<Var> {
        let (bs, c) = dims2("broadcast_length", self.value(e))?;
        let mut out = Vec::with_capacity(bs * c * len);
        for &v in self.value(e).data() {
            out.extend(std::iter::repeat_n(v, len));
        }
        let rg = self.rg(e);
        Ok(self.push(Tensor::new(vec![bs, c, len], out)?, Op::Broadcast { e }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = p.len().max(1) as f64;
        let loss = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg))
    }

    /// Mean softmax cross-entropy of `logits (batch, classes)` against labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (bs, nc) = dims2("softmax_ce", self.value(logits))?;
        if labels.len() != bs {
            return Err(Error::shape("softmax_ce", format!("{bs} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= nc) {
            return Err(Error::shape("softmax_ce", format!("label {bad} out of range for {nc} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), nc);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * nc + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / bs.max(1) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node; gradients for every node that
    /// requires one.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Graph(
                "backward called on a node that was not recorded by this graph".into(),
            ));
        };
        if node.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse pass and accumulates parameter gradients into
    /// `params`. Parameters not reachable from `loss` keep their gradient.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(name), Some(g)) = (&node.op, g) {
                params.get_mut(name)?.grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
                cols,
            } => {
                let xv = self.value(*x);
                let (bs, cin, len) = dims3("conv1d", xv)?;
                let wv = self.value(*w);
                let (cout, _, k) = dims3("conv1d", wv)?;
                let lout = node.value.shape()[2];
                let n = bs * lout;
                let rows = cin * k;
                let mut gmat = vec![0.0; cout * n];
                for co in 0..cout {
                    for bi in 0..bs {
                        gmat[co * n + bi * lout..co * n + (bi + 1) * lout]
                            .copy_from_slice(&gd[(bi * cout + co) * lout..(bi * cout + co + 1) * lout]);
                    }
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let gb: Vec<f64> = gmat.chunks(n).map(|r| r.iter().sum()).collect();
                    accumulate(&mut grads[b.0], Tensor::new(vec![cout], gb)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; cout * rows];
                    gemm(cout, n, rows, &gmat, false, cols, true, &mut gw, 0.0);
                    accumulate(&mut grads[w.0], Tensor::new(wv.shape().to_vec(), gw)?);
                }
                if self.rg(*x) {
                    let mut gcols = vec![0.0; rows * n];
                    gemm(rows, cout, n, wv.data(), true, &gmat, false, &mut gcols, 0.0);
                    let mut gx = vec![0.0; bs * cin * len];
                    for ci in 0..cin {
                        for kk in 0..k {
                            let row = &gcols[(ci * k + kk) * n..(ci * k + kk + 1) * n];
                            for bi in 0..bs {
                                let dst = &mut gx[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                                for o in 0..lout {
                                    let pos = (o * stride + kk) as isize - *pad_left as isize;
                                    if pos >= 0 && (pos as usize) < len {
                                        dst[pos as usize] += row[bi * lout + o];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vec![bs, cin, len], gx)?);
                }
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bs, fin) = dims2("dense", xv)?;
                let fout = wv.shape()[0];
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut gb = vec![0.0; fout];
                    for row in gd.chunks(fout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::new(vec![fout], gb)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; fout * fin];
                    gemm(fout, bs, fin, gd, true, xv.data(), false, &mut gw, 0.0);
                    accumulate(&mut grads[w.0], Tensor::new(vec![fout, fin], gw)?);
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; bs * fin];
                    gemm(bs, fout, fin, gd, false, wv.data(), false, &mut gx, 0.0);
                    accumulate(&mut grads[x.0], Tensor::new(vec![bs, fin], gx)?);
                }
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = node.value.data().iter().zip(gd).map(|(y, g)| g * (1.0 - y * y)).collect();
                accumulate(&mut grads[x.0], Tensor::new(node.value.shape().to_vec(), gx)?);
            }
            Op::Relu(x) => {
                let gx: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(a, g)| if *a > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], Tensor::new(node.value.shape().to_vec(), gx)?);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let d = gx.data_mut();
                for (&i, &gv) in argmax.iter().zip(gd) {
                    d[i] += gv;
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Upsample { x, factor } => {
                let gx: Vec<f64> = gd.chunks(*factor).map(|c| c.iter().sum()).collect();
                accumulate(&mut grads[x.0], Tensor::new(self.value(*x).shape().to_vec(), gx)?);
            }
            Op::Concat { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let bs = va.batch();
                let sa = va.len() / bs.max(1);
                let sb = vb.len() / bs.max(1);
                let mut ga = Vec::with_capacity(va.len());
                let mut gb = Vec::with_capacity(vb.len());
                for i in 0..bs {
                    let base = i * (sa + sb);
                    ga.extend_from_slice(&gd[base..base + sa]);
                    gb.extend_from_slice(&gd[base + sa..base + sa + sb]);
                }
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::AddChannel { x, e } => {
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if self.rg(*e) {
                    let len = node.value.shape()[2];
                    let ge: Vec<f64> = gd.chunks(len).map(|c| c.iter().sum()).collect();
                    accumulate(&mut grads[e.0], Tensor::new(self.value(*e).shape().to_vec(), ge)?);
                }
            }
            Op::Broadcast { e } => {
                let len = node.value.shape()[2];
                let ge: Vec<f64> = gd.chunks(len).map(|c| c.iter().sum()).collect();
                accumulate(&mut grads[e.0], Tensor::new(self.value(*e).shape().to_vec(), ge)?);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.value(*x).shape().to_vec())?;
                accumulate(&mut grads[x.0], gx);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let scale = 2.0 * gd[0] / p.len().max(1) as f64;
                let gp: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| scale * (a - b)).collect();
                if self.rg(*target) {
                    let gt = gp.iter().map(|v| -v).collect();
                    accumulate(&mut grads[target.0], Tensor::new(t.shape().to_vec(), gt)?);
                }
                if self.rg(*pred) {
                    accumulate(&mut grads[pred.0], Tensor::new(p.shape().to_vec(), gp)?);
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let shape = self.value(*logits).shape().to_vec();
                let (bs, nc) = (shape[0], shape[1]);
                let scale = gd[0] / bs.max(1) as f64;
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * nc + l] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                accumulate(&mut grads[logits.0], Tensor::new(shape, gl)?);
            }
        }
        Ok(())
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}
