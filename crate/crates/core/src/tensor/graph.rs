//! Tape-based reverse-mode autodiff.
//!
//! Operations evaluate eagerly and record a node describing how each output
//! slot was produced. `backward` sweeps the tape once in reverse, visiting
//! every node exactly once and accumulating gradients additively, so a value
//! used twice receives the sum of both contributions.

use super::kernels;
use super::{Element, Tensor};
use crate::error::{CoreError, Result};
use crate::rng::SplitMix64;

/// Handle to a tensor slot inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Node<E: Element> {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    ScaleVar {
        alpha: Var,
        x: Var,
    },
    ScaleConst {
        x: Var,
        c: E,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        keep: Vec<E>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        softmax: Vec<E>,
    },
    SelectRows {
        x: Var,
        indices: Vec<usize>,
    },
    GroupMean {
        x: Var,
        group_size: usize,
    },
    Sum {
        x: Var,
    },
}

/// Recorded computation: one tensor slot plus one producing node per slot, in
/// execution order.
pub struct Graph<E: Element> {
    slots: Vec<Tensor<E>>,
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl<E: Element> Graph<E> {
    /// Graph that records backward information. `dropout_seed` anchors the
    /// counter-based stream every dropout call draws its mask from.
    pub fn new(dropout_seed: u64) -> Self {
        Self {
            slots: Vec::new(),
            nodes: Vec::new(),
            grad_enabled: true,
            dropout_seed,
            dropout_calls: 0,
        }
    }

    /// Forward-only graph; skips saved buffers, backward is unavailable.
    pub fn inference() -> Self {
        Self {
            slots: Vec::new(),
            nodes: Vec::new(),
            grad_enabled: false,
            dropout_seed: 0,
            dropout_calls: 0,
        }
    }

    fn push(&mut self, mut tensor: Tensor<E>, node: Node<E>, needs_grad: bool) -> Var {
        tensor.requires_grad = needs_grad && self.grad_enabled;
        tensor.grad = None;
        self.slots.push(tensor);
        if self.grad_enabled {
            self.nodes.push(node);
        } else {
            self.nodes.push(Node::Leaf);
        }
        Var(self.slots.len() - 1)
    }

    /// Insert a tensor as a leaf; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, tensor: Tensor<E>) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Node::Leaf, needs)
    }

    /// Insert a tensor that never needs a gradient.
    pub fn constant(&mut self, tensor: Tensor<E>) -> Var {
        self.push(tensor, Node::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.slots[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.slots[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.slots[a.0].shape() != self.slots[b.0].shape() {
            return Err(CoreError::ShapeMismatch {
                op,
                left: self.slots[a.0].shape().to_vec(),
                right: self.slots[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_new(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let (ta, tb) = (&self.slots[a.0], &self.slots[b.0]);
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape().to_vec(), data).expect("zip preserves volume")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_new(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Node::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_new(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Node::Sub { a, b }, needs))
    }

    /// Element-wise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let out = self.zip_new(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Node::Hadamard { a, b }, needs))
    }

    /// Multiply a tensor by a learnable scalar (shape `[1]`).
    pub fn scale_var(&mut self, alpha: Var, x: Var) -> Result<Var> {
        let ta = &self.slots[alpha.0];
        if !ta.is_scalar() {
            return Err(CoreError::ShapeMismatch {
                op: "scale_var",
                left: ta.shape().to_vec(),
                right: vec![1],
            });
        }
        let av = ta.item();
        let tx = &self.slots[x.0];
        let out = Tensor::from_vec(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| av * v).collect(),
        )
        .expect("scale preserves volume");
        let needs = self.needs(alpha) || self.needs(x);
        Ok(self.push(out, Node::ScaleVar { alpha, x }, needs))
    }

    /// Multiply by a fixed constant.
    pub fn scale_const(&mut self, x: Var, c: E) -> Var {
        let tx = &self.slots[x.0];
        let out = Tensor::from_vec(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| c * v).collect(),
        )
        .expect("scale preserves volume");
        let needs = self.needs(x);
        self.push(out, Node::ScaleConst { x, c }, needs)
    }

    /// 2-d cross-correlation. x: [n,ic,h,w], w: [oc,ic,kh,kw], optional bias
    /// [oc].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (n, ic, h, w_in) = self.slots[x.0].dims4()?;
        let (oc, wic, kh, kw) = self.slots[w.0].dims4()?;
        if ic != wic {
            return Err(CoreError::ChannelMismatch {
                op: "conv2d",
                got: ic,
                expected: wic,
            });
        }
        if kh > h + 2 * pad || kw > w_in + 2 * pad {
            return Err(CoreError::KernelTooLarge {
                kh,
                kw,
                h: h + 2 * pad,
                w: w_in + 2 * pad,
            });
        }
        if let Some(bv) = b {
            let tb = &self.slots[bv.0];
            if tb.shape() != [oc] {
                return Err(CoreError::ShapeMismatch {
                    op: "conv2d bias",
                    left: tb.shape().to_vec(),
                    right: vec![oc],
                });
            }
        }
        let oh = kernels::conv_out_extent(h, kh, stride, pad);
        let ow = kernels::conv_out_extent(w_in, kw, stride, pad);
        let mut out = vec![E::ZERO; n * oc * oh * ow];
        let mut col = vec![E::ZERO; ic * kh * kw * oh * ow];
        kernels::conv2d_forward(
            self.slots[x.0].data(),
            n,
            ic,
            h,
            w_in,
            self.slots[w.0].data(),
            oc,
            kh,
            kw,
            b.map(|bv| self.slots[bv.0].data()),
            stride,
            pad,
            &mut out,
            &mut col,
        );
        let tensor = Tensor::from_vec(vec![n, oc, oh, ow], out)?;
        let needs = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(tensor, Node::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Batch normalization over the channel axis of [n,c,h,w].
    ///
    /// Train mode normalizes by batch statistics and folds them into the
    /// running buffers with the given momentum; eval mode normalizes by the
    /// running buffers and leaves them untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [E],
        running_var: &mut [E],
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.slots[x.0].dims4()?;
        let hw = h * w;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let t = &self.slots[v.0];
            if t.shape() != [c] {
                return Err(CoreError::ShapeMismatch {
                    op: if name == "gamma" {
                        "batch_norm gamma"
                    } else {
                        "batch_norm beta"
                    },
                    left: t.shape().to_vec(),
                    right: vec![c],
                });
            }
        }
        if train && n * hw == 0 {
            return Err(CoreError::EmptyBatch { op: "batch_norm" });
        }
        let eps_e = E::from_f64(eps);
        let (mean, var): (Vec<E>, Vec<E>) = if train {
            let (mean, var) = kernels::channel_stats(self.slots[x.0].data(), n, c, hw);
            let m = E::from_f64(momentum);
            let inv_m = E::from_f64(1.0 - momentum);
            for ch in 0..c {
                running_mean[ch] = m * running_mean[ch] + inv_m * mean[ch];
                running_var[ch] = m * running_var[ch] + inv_m * var[ch];
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps_e).sqrt()).collect();
        let xd = self.slots[x.0].data();
        let gd = self.slots[gamma.0].data();
        let bd = self.slots[beta.0].data();
        let mut xhat = vec![E::ZERO; xd.len()];
        let mut out = vec![E::ZERO; xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (m, s, g, b) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for i in 0..hw {
                    let v = (xd[base + i] - m) * s;
                    xhat[base + i] = v;
                    out[base + i] = g * v + b;
                }
            }
        }
        let tensor = Tensor::from_vec(vec![n, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            tensor,
            Node::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = &self.slots[x.0];
        let out = Tensor::from_vec(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| v.maximum(E::ZERO)).collect(),
        )
        .expect("relu preserves volume");
        let needs = self.needs(x);
        self.push(out, Node::Relu { x }, needs)
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.slots[x.0].dims4()?;
        if k > h || k > w {
            return Err(CoreError::KernelTooLarge { kh: k, kw: k, h, w });
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = vec![E::ZERO; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        kernels::max_pool_forward(
            self.slots[x.0].data(),
            n,
            c,
            h,
            w,
            k,
            stride,
            &mut out,
            &mut argmax,
        );
        let tensor = Tensor::from_vec(vec![n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(tensor, Node::MaxPool { x, argmax }, needs))
    }

    /// [n,c,h,w] -> [n,c] spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.slots[x.0].dims4()?;
        let hw = h * w;
        let inv = E::from_f64(1.0 / hw as f64);
        let xd = self.slots[x.0].data();
        let mut out = vec![E::ZERO; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let plane = &xd[i * hw..(i + 1) * hw];
            let mut acc = E::ZERO;
            for &v in plane {
                acc += v;
            }
            *o = acc * inv;
        }
        let tensor = Tensor::from_vec(vec![n, c], out)?;
        let needs = self.needs(x);
        Ok(self.push(tensor, Node::GlobalAvgPool { x }, needs))
    }

    /// Fully connected layer. x: [n,in], w: [in,out], b: [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, xin) = self.slots[x.0].dims2()?;
        let (win, wout) = self.slots[w.0].dims2()?;
        if xin != win {
            return Err(CoreError::ShapeMismatch {
                op: "linear",
                left: self.slots[x.0].shape().to_vec(),
                right: self.slots[w.0].shape().to_vec(),
            });
        }
        let tb = &self.slots[b.0];
        if tb.shape() != [wout] {
            return Err(CoreError::ShapeMismatch {
                op: "linear bias",
                left: tb.shape().to_vec(),
                right: vec![wout],
            });
        }
        let mut out = vec![E::ZERO; n * wout];
        kernels::matmul_acc(
            self.slots[x.0].data(),
            self.slots[w.0].data(),
            &mut out,
            n,
            xin,
            wout,
        );
        let bd = self.slots[b.0].data();
        for row in 0..n {
            for j in 0..wout {
                out[row * wout + j] += bd[j];
            }
        }
        let tensor = Tensor::from_vec(vec![n, wout], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(tensor, Node::Linear { x, w, b }, needs))
    }

    /// Inverted dropout. Train mode zeroes elements with probability `p` and
    /// scales survivors by 1/(1-p); eval mode and p == 0 are the identity.
    ///
    /// The mask comes from a counter-based stream: call k of a graph seeded
    /// with s draws from `SplitMix64::derive(s, k)`, so a rebuilt graph with
    /// the same seed reproduces every mask.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::InvalidDropout { p });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = SplitMix64::derive(self.dropout_seed, self.dropout_calls);
        self.dropout_calls += 1;
        let scale = E::from_f64(1.0 / (1.0 - p));
        let tx = &self.slots[x.0];
        let keep: Vec<E> = (0..tx.numel())
            .map(|_| if rng.chance(p) { E::ZERO } else { scale })
            .collect();
        let out = Tensor::from_vec(
            tx.shape().to_vec(),
            tx.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect(),
        )
        .expect("dropout preserves volume");
        let needs = self.needs(x);
        Ok(self.push(out, Node::Dropout { x, keep }, needs))
    }

    /// Mean categorical cross-entropy of [n,classes] logits against labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.slots[logits.0].dims2()?;
        if labels.len() != n {
            return Err(CoreError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![labels.len()],
                right: vec![n],
            });
        }
        for &l in labels {
            if l >= c {
                return Err(CoreError::LabelOutOfRange { label: l, classes: c });
            }
        }
        let softmax = kernels::softmax_rows(self.slots[logits.0].data(), n, c);
        let mut loss = E::ZERO;
        for (row, &label) in labels.iter().enumerate() {
            loss += -(softmax[row * c + label].ln());
        }
        loss = loss / E::from_f64(n as f64);
        let tensor = Tensor::scalar(loss);
        let needs = self.needs(logits);
        Ok(self.push(
            tensor,
            Node::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                softmax,
            },
            needs,
        ))
    }

    /// Gather rows of a [n, ...] tensor; indices may repeat.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = &self.slots[x.0];
        if tx.shape().is_empty() || indices.is_empty() {
            return Err(CoreError::EmptyBatch { op: "select_rows" });
        }
        let n = tx.shape()[0];
        for &i in indices {
            assert!(i < n, "select_rows index {i} out of range {n}");
        }
        let row_elems = tx.numel() / n;
        let mut shape = tx.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row_elems);
        for &i in indices {
            data.extend_from_slice(&tx.data()[i * row_elems..(i + 1) * row_elems]);
        }
        let tensor = Tensor::from_vec(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(
            tensor,
            Node::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Mean over consecutive groups of rows: [g*s, ...] -> [g, ...].
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let tx = &self.slots[x.0];
        let n = tx.shape()[0];
        if groups == 0 || n % groups != 0 {
            return Err(CoreError::ShapeMismatch {
                op: "group_mean",
                left: vec![n],
                right: vec![groups],
            });
        }
        let group_size = n / groups;
        let row_elems = tx.numel() / n;
        let data = kernels::group_mean_rows(tx.data(), groups, group_size, row_elems);
        let mut shape = tx.shape().to_vec();
        shape[0] = groups;
        let tensor = Tensor::from_vec(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(tensor, Node::GroupMean { x, group_size }, needs))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in self.slots[x.0].data() {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), Node::Sum { x }, needs)
    }

    /// Populate gradients of every reachable slot that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(CoreError::GradUnavailable);
        }
        {
            let t = &self.slots[loss.0];
            if !t.is_scalar() {
                return Err(CoreError::LossNotScalar {
                    shape: t.shape().to_vec(),
                });
            }
        }
        self.slots[loss.0].grad = Some(vec![E::ONE]);
        for i in (0..=loss.0).rev() {
            let gout = match self.slots[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            if !self.slots[i].requires_grad {
                continue;
            }
            // Take the node out so slot borrows stay disjoint.
            let node = std::mem::replace(&mut self.nodes[i], Node::Leaf);
            self.backprop_node(&node, &gout);
            self.nodes[i] = node;
        }
        Ok(())
    }

    fn acc_into(&mut self, v: Var, delta: &[E]) {
        if self.slots[v.0].requires_grad {
            self.slots[v.0].accumulate_grad(delta);
        }
    }

    fn backprop_node(&mut self, node: &Node<E>, gout: &[E]) {
        match node {
            Node::Leaf => {}
            Node::Add { a, b } => {
                self.acc_into(*a, gout);
                self.acc_into(*b, gout);
            }
            Node::Sub { a, b } => {
                self.acc_into(*a, gout);
                let neg: Vec<E> = gout.iter().map(|&g| -g).collect();
                self.acc_into(*b, &neg);
            }
            Node::Hadamard { a, b } => {
                let ga: Vec<E> = gout
                    .iter()
                    .zip(self.slots[b.0].data())
                    .map(|(&g, &v)| g * v)
                    .collect();
                let gb: Vec<E> = gout
                    .iter()
                    .zip(self.slots[a.0].data())
                    .map(|(&g, &v)| g * v)
                    .collect();
                self.acc_into(*a, &ga);
                self.acc_into(*b, &gb);
            }
            Node::ScaleVar { alpha, x } => {
                let av = self.slots[alpha.0].item();
                let mut galpha = E::ZERO;
                for (&g, &v) in gout.iter().zip(self.slots[x.0].data()) {
                    galpha += g * v;
                }
                let gx: Vec<E> = gout.iter().map(|&g| g * av).collect();
                self.acc_into(*alpha, &[galpha]);
                self.acc_into(*x, &gx);
            }
            Node::ScaleConst { x, c } => {
                let gx: Vec<E> = gout.iter().map(|&g| g * *c).collect();
                self.acc_into(*x, &gx);
            }
            Node::Conv2d { x, w, b, stride, pad } => {
                let (n, ic, h, w_in) = self.slots[x.0].dims4().expect("checked at record");
                let (oc, _, kh, kw) = self.slots[w.0].dims4().expect("checked at record");
                let mut gx = vec![E::ZERO; n * ic * h * w_in];
                let mut gw = vec![E::ZERO; self.slots[w.0].numel()];
                let mut gb = b.map(|_| vec![E::ZERO; oc]);
                let oh = kernels::conv_out_extent(h, kh, *stride, *pad);
                let ow = kernels::conv_out_extent(w_in, kw, *stride, *pad);
                let mut col = vec![E::ZERO; ic * kh * kw * oh * ow];
                kernels::conv2d_backward(
                    self.slots[x.0].data(),
                    n,
                    ic,
                    h,
                    w_in,
                    self.slots[w.0].data(),
                    oc,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    gout,
                    &mut gx,
                    &mut gw,
                    gb.as_deref_mut(),
                    &mut col,
                );
                self.acc_into(*x, &gx);
                self.acc_into(*w, &gw);
                if let (Some(bv), Some(gb)) = (b, gb) {
                    self.acc_into(*bv, &gb);
                }
            }
            Node::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.slots[x.0].dims4().expect("checked at record");
                let hw = h * w;
                let gd = self.slots[gamma.0].data().to_vec();
                let mut dgamma = vec![E::ZERO; c];
                let mut dbeta = vec![E::ZERO; c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        for i in 0..hw {
                            dgamma[ch] += gout[base + i] * xhat[base + i];
                            dbeta[ch] += gout[base + i];
                        }
                    }
                }
                let mut gx = vec![E::ZERO; n * c * hw];
                if *train {
                    let count = E::from_f64((n * hw) as f64);
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let scale = gd[ch] * inv_std[ch] / count;
                            for i in 0..hw {
                                gx[base + i] = scale
                                    * (count * gout[base + i]
                                        - dbeta[ch]
                                        - xhat[base + i] * dgamma[ch]);
                            }
                        }
                    }
                } else {
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let scale = gd[ch] * inv_std[ch];
                            for i in 0..hw {
                                gx[base + i] = scale * gout[base + i];
                            }
                        }
                    }
                }
                self.acc_into(*x, &gx);
                self.acc_into(*gamma, &dgamma);
                self.acc_into(*beta, &dbeta);
            }
            Node::Relu { x } => {
                let gx: Vec<E> = gout
                    .iter()
                    .zip(self.slots[x.0].data())
                    .map(|(&g, &v)| if v > E::ZERO { g } else { E::ZERO })
                    .collect();
                self.acc_into(*x, &gx);
            }
            Node::MaxPool { x, argmax } => {
                let mut gx = vec![E::ZERO; self.slots[x.0].numel()];
                for (out_idx, &src) in argmax.iter().enumerate() {
                    gx[src] += gout[out_idx];
                }
                self.acc_into(*x, &gx);
            }
            Node::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.slots[x.0].dims4().expect("checked at record");
                let hw = h * w;
                let inv = E::from_f64(1.0 / hw as f64);
                let mut gx = vec![E::ZERO; self.slots[x.0].numel()];
                for (plane_idx, &g) in gout.iter().enumerate() {
                    let gv = g * inv;
                    for elem in &mut gx[plane_idx * hw..(plane_idx + 1) * hw] {
                        *elem = gv;
                    }
                }
                self.acc_into(*x, &gx);
            }
            Node::Linear { x, w, b } => {
                let (n, xin) = self.slots[x.0].dims2().expect("checked at record");
                let (_, wout) = self.slots[w.0].dims2().expect("checked at record");
                let mut gx = vec![E::ZERO; n * xin];
                kernels::matmul_abt_acc(gout, self.slots[w.0].data(), &mut gx, n, wout, xin);
                let mut gw = vec![E::ZERO; xin * wout];
                kernels::matmul_atb_acc(self.slots[x.0].data(), gout, &mut gw, n, xin, wout);
                let mut gb = vec![E::ZERO; wout];
                for row in 0..n {
                    for j in 0..wout {
                        gb[j] += gout[row * wout + j];
                    }
                }
                self.acc_into(*x, &gx);
                self.acc_into(*w, &gw);
                self.acc_into(*b, &gb);
            }
            Node::Dropout { x, keep } => {
                let gx: Vec<E> = gout.iter().zip(keep).map(|(&g, &k)| g * k).collect();
                self.acc_into(*x, &gx);
            }
            Node::SoftmaxCrossEntropy {
                logits,
                labels,
                softmax,
            } => {
                let (n, c) = self.slots[logits.0].dims2().expect("checked at record");
                let g = gout[0] / E::from_f64(n as f64);
                let mut gl = softmax.clone();
                for (row, &label) in labels.iter().enumerate() {
                    gl[row * c + label] -= E::ONE;
                }
                for v in gl.iter_mut() {
                    *v *= g;
                }
                self.acc_into(*logits, &gl);
            }
            Node::SelectRows { x, indices } => {
                let n = self.slots[x.0].shape()[0];
                let row_elems = self.slots[x.0].numel() / n;
                let mut gx = vec![E::ZERO; self.slots[x.0].numel()];
                for (out_row, &src_row) in indices.iter().enumerate() {
                    let src = &gout[out_row * row_elems..(out_row + 1) * row_elems];
                    let dst = &mut gx[src_row * row_elems..(src_row + 1) * row_elems];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.acc_into(*x, &gx);
            }
            Node::GroupMean { x, group_size } => {
                let total = self.slots[x.0].numel();
                let n = self.slots[x.0].shape()[0];
                let row_elems = total / n;
                let inv = E::from_f64(1.0 / *group_size as f64);
                let mut gx = vec![E::ZERO; total];
                for row in 0..n {
                    let group = row / group_size;
                    for j in 0..row_elems {
                        gx[row * row_elems + j] = gout[group * row_elems + j] * inv;
                    }
                }
                self.acc_into(*x, &gx);
            }
            Node::Sum { x } => {
                let gx = vec![gout[0]; self.slots[x.0].numel()];
                self.acc_into(*x, &gx);
            }
        }
    }
}
