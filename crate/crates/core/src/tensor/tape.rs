use super::kernels::{self, BatchNormState, BnSaved, ConvGeom};
use super::{gemm, Mat, MatMut, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter tensor in the slice handed to [`Tape::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    Scale(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can differentiate it.
///
/// Nodes are append-only and never mutated after creation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Constant | Op::Leaf | Op::Param(_)) || value.is_finite(),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Input whose gradient is kept on the tape; read it with [`Tape::grad`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; its gradient is accumulated into `params[id]` on backward.
    pub fn param(&mut self, id: ParamId, t: &Tensor<T>) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Param(id), true)
    }

    /// Gradient of a [`Tape::leaf`] after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.value(input).shape(), self.value(kernel).shape());
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects 4-d operands, got {xs:?} and {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {xs:?}, kernel {ks:?}"
            )));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d kernel must be odd-sized, got {ks:?}"
            )));
        }
        let ho = kernels::conv2d_output_size(xs[2], ks[2], stride, pad)?;
        let wo = kernels::conv2d_output_size(xs[3], ks[3], stride, pad)?;
        let geom = ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            ho,
            wo,
        };
        let (n, kout) = (xs[0], ks[0]);
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            self.value(kernel).data(),
            kout,
            &geom,
        );
        let value = Tensor::new(&[n, kout, ho, wo], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        train: bool,
    ) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::dim(format!(
                "batch_norm expects [N,C,...], got {xs:?}"
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        let plane: usize = xs[2..].iter().product();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || state.channels() != c
        {
            return Err(Error::dim(format!(
                "batch_norm parameters do not match {c} channels"
            )));
        }
        if train && n * plane < 2 {
            return Err(Error::config(
                "batch_norm in train mode needs at least 2 values per channel",
            ));
        }
        let (out, saved) = kernels::batch_norm_forward(
            self.value(input).data(),
            n,
            c,
            plane,
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            train,
        );
        let value = Tensor::new(&xs, out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Concatenates `[N,Da]` and `[N,Db]` along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "concat expects [N,Da] and [N,Db], got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (n, da, db) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            data.extend_from_slice(&ta.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&tb.data()[r * db..(r + 1) * db]);
        }
        let value = Tensor::new(&[n, da + db], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// `[N,C,m,m] -> [N,C]`, each map replaced by its spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.ndim() != 4 {
            return Err(Error::dim(format!(
                "global_avg_pool expects [N,C,H,W], got {:?}",
                t.shape()
            )));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let plane = t.shape()[2] * t.shape()[3];
        let inv = T::one() / T::from_f64(plane as f64);
        let data = t
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// `input [N,D] * weight[O,D]^T (+ bias[O])`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(input), self.value(weight));
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::dim(format!(
                "linear expects [N,D] x [O,D], got {:?} and {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (n, d, o) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(
            n,
            d,
            o,
            T::one(),
            Mat::rows(tx.data(), d),
            Mat::trans(tw.data(), d),
            T::zero(),
            MatMut::rows(&mut out, o),
        );
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.numel() != o {
                return Err(Error::dim(format!(
                    "linear bias has {} values, expected {o}",
                    tb.numel()
                )));
            }
            for row in out.chunks_exact_mut(o) {
                row.iter_mut().zip(tb.data()).for_each(|(v, &b)| *v += b);
            }
        }
        let value = Tensor::new(&[n, o], out)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross entropy expects [N,K] logits for {} labels, got {:?}",
                labels.len(),
                t.shape()
            )));
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::config(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let loss = kernels::cross_entropy(t.data(), k, labels);
        let probs = kernels::softmax_rows(t.data(), k);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(input);
        self.push(value, Op::Sum(input), rg)
    }

    /// `sum(input * weights)` with constant weights; handy for probing gradients.
    pub fn weighted_sum(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let t = self.value(input);
        if t.numel() != weights.len() {
            return Err(Error::dim(format!(
                "weighted_sum needs {} weights, got {}",
                t.numel(),
                weights.len()
            )));
        }
        let s = t.data().iter().zip(weights).map(|(&x, &w)| x * w).sum();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        let rg = self.rg(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Parameter gradients are added into `params[id]`; every parameter in
    /// `params` ends up with an allocated gradient buffer, so unreachable ones
    /// read as zeros. Calling this twice accumulates twice.
    pub fn backward(&mut self, loss: Var, params: &mut [Tensor<T>]) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for p in params.iter_mut() {
            p.grad_mut();
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Leaf => accumulate(&mut self.leaf_grads[i], &g),
                Op::Param(id) => {
                    let p = params.get_mut(id.0).ok_or_else(|| {
                        Error::dim(format!("parameter {} not supplied to backward", id.0))
                    })?;
                    p.grad_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geom,
                } => {
                    let (x, k) = (self.node(*input), self.node(*kernel));
                    let n = x.value.shape()[0];
                    let kout = k.value.shape()[0];
                    let mut dk = k.requires_grad.then(|| vec![T::zero(); k.value.numel()]);
                    let dx = kernels::conv2d_backward(
                        x.value.data(),
                        n,
                        k.value.data(),
                        kout,
                        geom,
                        &g,
                        x.requires_grad,
                        dk.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        add_into(&mut grads[input.0], dx);
                    }
                    if let Some(dk) = dk {
                        add_into(&mut grads[kernel.0], dk);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let shape = self.node(*input).value.shape();
                    let (n, c) = (shape[0], shape[1]);
                    let plane: usize = shape[2..].iter().product();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let dx = kernels::batch_norm_backward(
                        saved,
                        n,
                        c,
                        plane,
                        self.node(*gamma).value.data(),
                        &g,
                        self.rg(*input),
                        &mut dgamma,
                        &mut dbeta,
                    );
                    if let Some(dx) = dx {
                        add_into(&mut grads[input.0], dx);
                    }
                    if self.rg(*gamma) {
                        add_into(&mut grads[gamma.0], dgamma);
                    }
                    if self.rg(*beta) {
                        add_into(&mut grads[beta.0], dbeta);
                    }
                }
                Op::Relu(input) => {
                    let out = node.value.data();
                    let dx = g
                        .iter()
                        .zip(out)
                        .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                        .collect();
                    add_into(&mut grads[input.0], dx);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(b) {
                        add_into(&mut grads[b.0], g.clone());
                    }
                    if self.rg(a) {
                        add_into(&mut grads[a.0], g);
                    }
                }
                Op::Concat(a, b) => {
                    let da = self.node(*a).value.shape()[1];
                    let db = self.node(*b).value.shape()[1];
                    let (mut ga, mut gb) = (Vec::new(), Vec::new());
                    for row in g.chunks_exact(da + db) {
                        ga.extend_from_slice(&row[..da]);
                        gb.extend_from_slice(&row[da..]);
                    }
                    if self.rg(*a) {
                        add_into(&mut grads[a.0], ga);
                    }
                    if self.rg(*b) {
                        add_into(&mut grads[b.0], gb);
                    }
                }
                Op::GlobalAvgPool(input) => {
                    let shape = self.node(*input).value.shape();
                    let plane = shape[2] * shape[3];
                    let inv = T::one() / T::from_f64(plane as f64);
                    let mut dx = Vec::with_capacity(g.len() * plane);
                    for &d in &g {
                        dx.extend(std::iter::repeat_n(d * inv, plane));
                    }
                    add_into(&mut grads[input.0], dx);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, w) = (&self.node(*input).value, &self.node(*weight).value);
                    let (n, d, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                    if self.rg(*input) {
                        let mut dx = vec![T::zero(); n * d];
                        gemm(
                            n,
                            o,
                            d,
                            T::one(),
                            Mat::rows(&g, o),
                            Mat::rows(w.data(), d),
                            T::zero(),
                            MatMut::rows(&mut dx, d),
                        );
                        add_into(&mut grads[input.0], dx);
                    }
                    if self.rg(*weight) {
                        let mut dw = vec![T::zero(); o * d];
                        gemm(
                            o,
                            n,
                            d,
                            T::one(),
                            Mat::trans(&g, o),
                            Mat::rows(x.data(), d),
                            T::zero(),
                            MatMut::rows(&mut dw, d),
                        );
                        add_into(&mut grads[weight.0], dw);
                    }
                    if let Some(b) = bias.filter(|b| self.rg(*b)) {
                        let mut db = vec![T::zero(); o];
                        for row in g.chunks_exact(o) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        add_into(&mut grads[b.0], db);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let k = probs.len() / labels.len();
                    let scale = g[0] / T::from_f64(labels.len() as f64);
                    let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        dx[r * k + y] = dx[r * k + y] - scale;
                    }
                    add_into(&mut grads[logits.0], dx);
                }
                Op::Sum(input) => {
                    let n = self.node(*input).value.numel();
                    add_into(&mut grads[input.0], vec![g[0]; n]);
                }
                Op::WeightedSum { input, weights } => {
                    let dx = weights.iter().map(|&w| w * g[0]).collect();
                    add_into(&mut grads[input.0], dx);
                }
                Op::Scale(input, factor) => {
                    let f = *factor;
                    add_into(&mut grads[input.0], g.iter().map(|&v| v * f).collect());
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
