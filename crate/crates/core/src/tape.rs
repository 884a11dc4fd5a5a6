//! Reverse-mode automatic differentiation on a flat, append-only tape.
//!
//! Every operation validates shapes, computes its value eagerly, and records
//! what backward needs. Inputs always precede their consumers on the tape, so
//! a single reverse sweep from the loss visits each node's gradient exactly
//! once per use. A tape is built per forward pass and discarded after
//! `backward`.

use crate::conv;
use crate::error::{Error, Result};
use crate::gemm::{par_gemm_nn, par_gemm_tn, transpose};
use crate::sbfm::{threshold_backward_ste, threshold_forward};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<S> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu {
        input: Var,
    },
    Abs {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Concat {
        lhs: Var,
        rhs: Var,
    },
    Flatten {
        input: Var,
    },
    Normalize {
        input: Var,
        inv_std: Vec<S>,
    },
    /// Per-channel relative-threshold binarization with a straight-through
    /// estimator as its gradient.
    ChannelThreshold {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
    Sum {
        input: Var,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only autodiff tape.
pub struct Tape<S = f64> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf tensor. Only leaves with `requires_grad` (and the ops
    /// reachable from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- operations -----------------------------------------------------

    /// Cross-correlation of `[B,C,H,W]` with `[F,C,K,K]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = conv::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.requires(input) || self.requires(kernel);
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = conv::maxpool2d_forward(self.value(input), window, stride)?;
        let rg = self.requires(input);
        Ok(self.push(y, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = self.value(input).map(|v| v.max(S::zero()));
        let rg = self.requires(input);
        self.push(y, Op::Relu { input }, rg)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let y = self.value(input).map(|v| v.abs());
        let rg = self.requires(input);
        self.push(y, Op::Abs { input }, rg)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut y = a.clone();
        for (yv, bv) in y.data_mut().iter_mut().zip(b.data()) {
            *yv += *bv;
        }
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(y, Op::Add { lhs, rhs }, rg))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut y = a.clone();
        for (yv, bv) in y.data_mut().iter_mut().zip(b.data()) {
            *yv *= *bv;
        }
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(y, Op::Mul { lhs, rhs }, rg))
    }

    /// `[B,D] @ [D,M] + [M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, d) = self.value(input).dims2()?;
        let (wd, m) = self.value(weight).dims2()?;
        if wd != d {
            return Err(Error::Shape(format!(
                "linear: input width {d} vs weight height {wd}"
            )));
        }
        if self.value(bias).shape() != [m] {
            return Err(Error::Shape(format!(
                "linear: bias shape {:?}, expected [{m}]",
                self.value(bias).shape()
            )));
        }
        let mut y = Tensor::zeros(vec![b, m]);
        par_gemm_nn(
            b,
            d,
            m,
            self.value(input).data(),
            self.value(weight).data(),
            y.data_mut(),
        );
        let bias_data = self.value(bias).data();
        for row in y.data_mut().chunks_mut(m) {
            for (v, &bv) in row.iter_mut().zip(bias_data) {
                *v += bv;
            }
        }
        let rg = self.requires(input) || self.requires(weight) || self.requires(bias);
        Ok(self.push(
            y,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Concatenates two `[B, *]` matrices along the feature axis.
    pub fn concat(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (ba, da) = self.value(lhs).dims2()?;
        let (bb, db) = self.value(rhs).dims2()?;
        if ba != bb {
            return Err(Error::Shape(format!("concat batch mismatch: {ba} vs {bb}")));
        }
        let mut y = Tensor::zeros(vec![ba, da + db]);
        {
            let (a, b) = (self.value(lhs).data(), self.value(rhs).data());
            let yd = y.data_mut();
            for i in 0..ba {
                yd[i * (da + db)..i * (da + db) + da].copy_from_slice(&a[i * da..(i + 1) * da]);
                yd[i * (da + db) + da..(i + 1) * (da + db)]
                    .copy_from_slice(&b[i * db..(i + 1) * db]);
            }
        }
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(y, Op::Concat { lhs, rhs }, rg))
    }

    /// `[B, d1, .., dn] -> [B, d1*..*dn]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "flatten needs rank >= 2, got {shape:?}"
            )));
        }
        let b = shape[0];
        let rest: usize = shape[1..].iter().product();
        let y = self.value(input).clone().reshaped(vec![b, rest])?;
        let rg = self.requires(input);
        Ok(self.push(y, Op::Flatten { input }, rg))
    }

    /// Per-channel standardization `(x - mean[c]) / std[c]` of `[B,C,H,W]`.
    pub fn normalize(&mut self, input: Var, mean: &[S], std: &[S]) -> Result<Var> {
        let (b, c, h, w) = self.value(input).dims4()?;
        if mean.len() != c || std.len() != c {
            return Err(Error::Config(format!(
                "normalize: {} channels, got {} means / {} stds",
                c,
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|s| *s <= S::zero()) {
            return Err(Error::Config("normalize: std must be positive".into()));
        }
        let inv_std: Vec<S> = std.iter().map(|&s| S::one() / s).collect();
        let mut y = self.value(input).clone();
        {
            let yd = y.data_mut();
            let plane = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for v in &mut yd[base..base + plane] {
                        *v = (*v - mean[ci]) * inv_std[ci];
                    }
                }
            }
        }
        let rg = self.requires(input);
        Ok(self.push(y, Op::Normalize { input, inv_std }, rg))
    }

    /// Relative-threshold binarization of `[B,N,P,Q]`: per channel, 1 where
    /// `x >= t * max(channel)`, else 0; all-zero output for channels whose
    /// maximum is below `1e-12`. Backward is the straight-through estimator.
    pub fn channel_threshold(&mut self, input: Var, t: f64) -> Result<Var> {
        self.value(input).dims4()?;
        let y = threshold_forward(self.value(input), t)?;
        let rg = self.requires(input);
        Ok(self.push(y, Op::ChannelThreshold { input }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "{} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range [0,{k})")));
        }
        let ld = self.value(logits).data();
        let mut probs = Tensor::zeros(vec![b, k]);
        let mut total = S::zero();
        {
            let pd = probs.data_mut();
            for bi in 0..b {
                let row = &ld[bi * k..(bi + 1) * k];
                let max = row.iter().copied().fold(row[0], S::max);
                let mut denom = S::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    pd[bi * k + j] = e;
                    denom += e;
                }
                for v in &mut pd[bi * k..(bi + 1) * k] {
                    *v /= denom;
                }
                // -log p[label] computed in log space for stability
                total += denom.ln() - (row[labels[bi]] - max);
            }
        }
        let loss = total / S::from_f64_lossy(b as f64);
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: S = self.value(input).data().iter().copied().sum();
        let rg = self.requires(input);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss; populates gradients of every
    /// `requires_grad` node reachable from it. One call per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![S::one()],
        )?);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<S>) -> Result<()> {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor<S>) -> Result<()> {
        // Ops are matched by value-copying the small metadata up front so the
        // borrow on self.nodes can end before accumulation.
        match &self.nodes[id].op {
            Op::Leaf => Ok(()),
            &Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                if self.requires(input) {
                    let dx = conv::conv2d_backward_input(
                        self.value(input).shape(),
                        self.value(kernel),
                        g,
                        stride,
                        padding,
                    )?;
                    self.accumulate(input, dx)?;
                }
                if self.requires(kernel) {
                    let dk = conv::conv2d_backward_kernel(
                        self.value(input),
                        self.value(kernel).shape(),
                        g,
                        stride,
                        padding,
                    )?;
                    self.accumulate(kernel, dk)?;
                }
                Ok(())
            }
            Op::MaxPool2d { input, argmax } => {
                let input = *input;
                if self.requires(input) {
                    let dx = conv::maxpool2d_backward(self.value(input).shape(), argmax, g)?;
                    self.accumulate(input, dx)?;
                }
                Ok(())
            }
            &Op::Relu { input } => {
                if self.requires(input) {
                    let x = self.value(input);
                    let mut dx = g.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        if xv <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    self.accumulate(input, dx)?;
                }
                Ok(())
            }
            &Op::Abs { input } => {
                if self.requires(input) {
                    let x = self.value(input);
                    let mut dx = g.clone();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        *d = *d * xv.signum() * if xv == S::zero() { S::zero() } else { S::one() };
                    }
                    self.accumulate(input, dx)?;
                }
                Ok(())
            }
            &Op::Add { lhs, rhs } => {
                if self.requires(lhs) {
                    self.accumulate(lhs, g.clone())?;
                }
                if self.requires(rhs) {
                    self.accumulate(rhs, g.clone())?;
                }
                Ok(())
            }
            &Op::Mul { lhs, rhs } => {
                if self.requires(lhs) {
                    let mut dl = g.clone();
                    for (d, &rv) in dl.data_mut().iter_mut().zip(self.value(rhs).data()) {
                        *d *= rv;
                    }
                    self.accumulate(lhs, dl)?;
                }
                if self.requires(rhs) {
                    let mut dr = g.clone();
                    for (d, &lv) in dr.data_mut().iter_mut().zip(self.value(lhs).data()) {
                        *d *= lv;
                    }
                    self.accumulate(rhs, dr)?;
                }
                Ok(())
            }
            &Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (b, d) = self.value(input).dims2()?;
                let (_, m) = self.value(weight).dims2()?;
                if self.requires(input) {
                    // dX = dY @ W^T
                    let mut wt = vec![S::zero(); d * m];
                    transpose(d, m, self.value(weight).data(), &mut wt);
                    let mut dx = Tensor::zeros(vec![b, d]);
                    par_gemm_nn(b, m, d, g.data(), &wt, dx.data_mut());
                    self.accumulate(input, dx)?;
                }
                if self.requires(weight) {
                    // dW = X^T @ dY
                    let mut dw = Tensor::zeros(vec![d, m]);
                    par_gemm_tn(d, b, m, self.value(input).data(), g.data(), dw.data_mut());
                    self.accumulate(weight, dw)?;
                }
                if self.requires(bias) {
                    let mut db = Tensor::zeros(vec![m]);
                    for row in g.data().chunks(m) {
                        for (dbv, &gv) in db.data_mut().iter_mut().zip(row) {
                            *dbv += gv;
                        }
                    }
                    self.accumulate(bias, db)?;
                }
                Ok(())
            }
            &Op::Concat { lhs, rhs } => {
                let (b, da) = self.value(lhs).dims2()?;
                let (_, db_) = self.value(rhs).dims2()?;
                let gd = g.data();
                if self.requires(lhs) {
                    let mut dl = Tensor::zeros(vec![b, da]);
                    for i in 0..b {
                        dl.data_mut()[i * da..(i + 1) * da]
                            .copy_from_slice(&gd[i * (da + db_)..i * (da + db_) + da]);
                    }
                    self.accumulate(lhs, dl)?;
                }
                if self.requires(rhs) {
                    let mut dr = Tensor::zeros(vec![b, db_]);
                    for i in 0..b {
                        dr.data_mut()[i * db_..(i + 1) * db_]
                            .copy_from_slice(&gd[i * (da + db_) + da..(i + 1) * (da + db_)]);
                    }
                    self.accumulate(rhs, dr)?;
                }
                Ok(())
            }
            &Op::Flatten { input } => {
                if self.requires(input) {
                    let dx = g.clone().reshaped(self.value(input).shape().to_vec())?;
                    self.accumulate(input, dx)?;
                }
                Ok(())
            }
            Op::Normalize { input, inv_std } => {
                let input = *input;
                if self.requires(input) {
                    let (_, c, h, w) = self.value(input).dims4()?;
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(h * w).enumerate() {
                        let scale = inv_std[i % c];
                        for v in chunk {
                            *v *= scale;
                        }
                    }
                    self.accumulate(input, dx)?;
                }
                Ok(())
            }
            &Op::ChannelThreshold { input } => {
                if self.requires(input) {
                    let dx = threshold_backward_ste(g, self.value(input))?;
                    self.accumulate(input, dx)?;
                }
                Ok(())
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                if self.requires(logits) {
                    let (b, k) = probs.dims2()?;
                    let scale = g.item()? / S::from_f64_lossy(b as f64);
                    let mut dl = probs.clone();
                    {
                        let dld = dl.data_mut();
                        for (bi, &label) in labels.iter().enumerate() {
                            dld[bi * k + label] -= S::one();
                        }
                        for v in dld.iter_mut() {
                            *v *= scale;
                        }
                    }
                    self.accumulate(logits, dl)?;
                }
                Ok(())
            }
            &Op::Sum { input } => {
                if self.requires(input) {
                    let grad = Tensor::full(self.value(input).shape().to_vec(), g.item()?);
                    self.accumulate(input, grad)?;
                }
                Ok(())
            }
        }
    }
}
