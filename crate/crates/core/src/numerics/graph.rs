//! Reverse-mode differentiation over an append-only tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! parameters (gradients requested) or constants. Every recorded operation
//! checks its result for NaN/Inf and fails with a numeric error instead of
//! propagating it.

use crate::error::{Error, Result};
use crate::numerics::conv::{self, ConvGeometry};
use crate::numerics::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-normalisation statistics observed during a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate, as used for running statistics.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry },
    ConvTranspose2d { input: Var, kernel: Var, geom: ConvGeometry },
    ChannelBias { input: Var, bias: Var },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    BatchNorm { input: Var, gamma: Var, beta: Var, x_hat: Vec<T>, inv_std: Vec<T>, train: bool },
    Elu { input: Var, alpha: T },
    Tanh { input: Var },
    Sigmoid { input: Var },
    Softmax { input: Var },
    AvgPool { input: Var, window: usize },
    Reshape { input: Var },
    Concat { inputs: Vec<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    AddScalar { input: Var },
    Abs { input: Var },
    Square { input: Var },
    LogEps { input: Var, eps: T },
    Mean { input: Var },
    Sum { input: Var },
    Gather { input: Var, indices: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient will be computed.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = self.needs(inputs);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::forward(self.shape(input), self.shape(kernel), stride, pad)?;
        let out = conv::conv_forward_raw(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::from_raw(geom.out_shape().to_vec(), out);
        self.push(value, Op::Conv2d { input, kernel, geom }, &[input, kernel], "conv2d")
    }

    pub fn conv2d_transpose(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::transpose(self.shape(input), self.shape(kernel), stride, pad)?;
        let out = conv::conv_adjoint_raw(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::from_raw(geom.in_shape().to_vec(), out);
        self.push(value, Op::ConvTranspose2d { input, kernel, geom }, &[input, kernel], "conv2d_transpose")
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let channels = *shape.get(1).ok_or_else(|| Error::dim("channel_bias needs rank >= 2"))?;
        if self.shape(bias) != [channels] {
            return Err(Error::dim(format!(
                "channel_bias: bias shape {:?} does not match {channels} channels",
                self.shape(bias)
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        self.push(Tensor::from_raw(shape, out), Op::ChannelBias { input, bias }, &[input, bias], "channel_bias")
    }

    /// `y = x W^T + b` for `x [N,I]`, `W [O,I]`, `b [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!("linear: input {xs:?} incompatible with weight {ws:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(input).data(),
            (i as isize, 1),
            self.value(weight).data(),
            (1, i as isize),
            T::zero(),
            &mut out,
            (o as isize, 1),
        );
        let mut inputs = vec![input, weight];
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::dim(format!("linear: bias shape {:?}, expected [{o}]", self.shape(b))));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
            inputs.push(b);
        }
        self.push(Tensor::from_raw(vec![n, o], out), Op::Linear { input, weight, bias }, &inputs, "linear")
    }

    /// Per-channel batch normalisation over all axes except 1.
    ///
    /// With `running = None` batch statistics are used (train mode) and
    /// returned; otherwise the given running `(mean, var)` are used.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batch_norm needs rank >= 2"));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!("batch_norm: affine parameters must have shape [{c}]")));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); x.len()];
        let m = n * inner;
        let mut stats = None;
        match running {
            None => {
                if n < 2 {
                    return Err(Error::Config(
                        "batch normalisation in train mode requires a batch of at least 2".into(),
                    ));
                }
                let mf = T::from_usize(m).unwrap();
                let mut means = vec![T::zero(); c];
                let mut vars = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..n {
                        s += x[(bi * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                    }
                    let mean = s / mf;
                    let mut v = T::zero();
                    for bi in 0..n {
                        for &xv in &x[(bi * c + ch) * inner..][..inner] {
                            v += (xv - mean) * (xv - mean);
                        }
                    }
                    let var = v / mf;
                    means[ch] = mean;
                    vars[ch] = v / T::from_usize(m - 1).unwrap();
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                }
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for k in base..base + inner {
                            x_hat[k] = (x[k] - means[ch]) * inv_std[ch];
                            out[k] = g[ch] * x_hat[k] + b[ch];
                        }
                    }
                }
                stats = Some(BatchStats { mean: means, var: vars });
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::dim("batch_norm: running statistics length mismatch"));
                }
                for ch in 0..c {
                    inv_std[ch] = T::one() / (rv[ch] + eps).sqrt();
                }
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for k in base..base + inner {
                            x_hat[k] = (x[k] - rm[ch]) * inv_std[ch];
                            out[k] = g[ch] * x_hat[k] + b[ch];
                        }
                    }
                }
            }
        }
        let train = running.is_none();
        let op = Op::BatchNorm { input, gamma, beta, x_hat, inv_std, train };
        let v = self.push(Tensor::from_raw(shape, out), op, &[input, gamma, beta], "batch_norm")?;
        Ok((v, stats))
    }

    pub fn elu(&mut self, input: Var, alpha: T) -> Result<Var> {
        let value = self.value(input).map(|x| if x > T::zero() { x } else { alpha * (x.exp() - T::one()) });
        self.push(value, Op::Elu { input, alpha }, &[input], "elu")
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| x.tanh());
        self.push(value, Op::Tanh { input }, &[input], "tanh")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(sigmoid);
        self.push(value, Op::Sigmoid { input }, &[input], "sigmoid")
    }

    /// Row-wise softmax of a `[N,K]` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("softmax expects [N,K], got {shape:?}")));
        }
        let k = shape[1];
        let mut out = self.value(input).data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        self.push(Tensor::from_raw(shape, out), Op::Softmax { input }, &[input], "softmax")
    }

    pub fn avg_pool(&mut self, input: Var, window: usize) -> Result<Var> {
        let value = conv::avg_pool(self.value(input), window)?;
        self.push(value, Op::AvgPool { input, window }, &[input], "avg_pool")
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push(value, Op::Reshape { input }, &[input], "reshape")
    }

    /// Concatenates `[N, d_i]` tensors along axis 1.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let n = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != n {
                return Err(Error::dim(format!("concat expects [{n}, d] tensors, got {s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[row * w..(row + 1) * w]);
            }
        }
        let op = Op::Concat { inputs: inputs.to_vec() };
        self.push(Tensor::from_raw(vec![n, total], out), op, inputs, "concat")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(value, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(value, Op::Sub { a, b }, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(value, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let value = self.value(input).map(|x| x * factor);
        self.push(value, Op::Scale { input, factor }, &[input], "scale")
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Result<Var> {
        let value = self.value(input).map(|x| x + c);
        self.push(value, Op::AddScalar { input }, &[input], "add_scalar")
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| x.abs());
        self.push(value, Op::Abs { input }, &[input], "abs")
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| x * x);
        self.push(value, Op::Square { input }, &[input], "square")
    }

    /// `ln(x + eps)`; fails if any `x + eps <= 0`.
    pub fn log_eps(&mut self, input: Var, eps: T) -> Result<Var> {
        if let Some(bad) = self.value(input).data().iter().find(|&&x| x + eps <= T::zero()) {
            return Err(Error::numeric(format!("log of non-positive value {bad} (eps {eps})")));
        }
        let value = self.value(input).map(|x| (x + eps).ln());
        self.push(value, Op::LogEps { input, eps }, &[input], "log")
    }

    /// Mean over all elements, producing a `[1]` scalar.
    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).mean());
        self.push(value, Op::Mean { input }, &[input], "mean")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum { input }, &[input], "sum")
    }

    /// Picks `x[n, indices[n]]` from a `[N,K]` tensor, producing `[N]`.
    pub fn gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 || shape[0] != indices.len() {
            return Err(Error::dim(format!(
                "gather: {} indices for tensor of shape {shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[1]) {
            return Err(Error::Range(format!("gather index {bad} out of range 0..{}", shape[1])));
        }
        let x = self.value(input).data();
        let out: Vec<T> = indices.iter().enumerate().map(|(n, &i)| x[n * shape[1] + i]).collect();
        let op = Op::Gather { input, indices: indices.to_vec() };
        self.push(Tensor::from_raw(vec![indices.len()], out), op, &[input], "gather")
    }

    /// Back-propagates from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            for (v, g) in self.local_grads(node, &dy)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                g.check_finite(&format!("gradient of node {i}"))?;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                if self.wants(*input) {
                    let dx = conv::conv_adjoint_raw(geom, dy.data(), self.value(*kernel).data());
                    out.push((*input, Tensor::from_raw(geom.in_shape().to_vec(), dx)));
                }
                if self.wants(*kernel) {
                    let dk = conv::conv_kernel_grad_raw(geom, self.value(*input).data(), dy.data());
                    out.push((*kernel, Tensor::from_raw(geom.kernel_shape().to_vec(), dk)));
                }
            }
            Op::ConvTranspose2d { input, kernel, geom } => {
                // y = A^T x where A is the forward convolution; dx = A dy.
                if self.wants(*input) {
                    let dx = conv::conv_forward_raw(geom, dy.data(), self.value(*kernel).data());
                    out.push((*input, Tensor::from_raw(geom.out_shape().to_vec(), dx)));
                }
                if self.wants(*kernel) {
                    let dk = conv::conv_kernel_grad_raw(geom, dy.data(), self.value(*input).data());
                    out.push((*kernel, Tensor::from_raw(geom.kernel_shape().to_vec(), dk)));
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.wants(*input) {
                    out.push((*input, dy.clone()));
                }
                if self.wants(*bias) {
                    let c = self.shape(*bias)[0];
                    let inner: usize = dy.shape()[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, &g) in dy.data().iter().enumerate() {
                        db[(i / inner) % c] += g;
                    }
                    out.push((*bias, Tensor::from_raw(vec![c], db)));
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, o) = (dy.shape()[0], dy.shape()[1]);
                let i = self.shape(*weight)[1];
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(
                        n,
                        o,
                        i,
                        T::one(),
                        dy.data(),
                        (o as isize, 1),
                        self.value(*weight).data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut dx,
                        (i as isize, 1),
                    );
                    out.push((*input, Tensor::from_raw(vec![n, i], dx)));
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(
                        o,
                        n,
                        i,
                        T::one(),
                        dy.data(),
                        (1, o as isize),
                        self.value(*input).data(),
                        (i as isize, 1),
                        T::zero(),
                        &mut dw,
                        (i as isize, 1),
                    );
                    out.push((*weight, Tensor::from_raw(vec![o, i], dw)));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in dy.data().chunks(o) {
                            for (acc, &g) in db.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                        out.push((*b, Tensor::from_raw(vec![o], db)));
                    }
                }
            }
            Op::BatchNorm { input, gamma, beta, x_hat, inv_std, train } => {
                let shape = dy.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * inner;
                        for k in base..base + inner {
                            dgamma[ch] += dy.data()[k] * x_hat[k];
                            dbeta[ch] += dy.data()[k];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); dy.len()];
                    let m = T::from_usize(n * inner).unwrap();
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * inner;
                            for k in base..base + inner {
                                dx[k] = if *train {
                                    g[ch] * inv_std[ch] / m
                                        * (m * dy.data()[k] - dbeta[ch] - x_hat[k] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * dy.data()[k]
                                };
                            }
                        }
                    }
                    out.push((*input, Tensor::from_raw(shape.to_vec(), dx)));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor::from_raw(vec![c], dgamma)));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor::from_raw(vec![c], dbeta)));
                }
            }
            Op::Elu { input, alpha } => {
                let x = self.value(*input);
                let dx = dy.zip_map(x, |g, xv| if xv > T::zero() { g } else { g * *alpha * xv.exp() })?;
                out.push((*input, dx));
            }
            Op::Tanh { input } => {
                out.push((*input, dy.zip_map(y, |g, t| g * (T::one() - t * t))?));
            }
            Op::Sigmoid { input } => {
                out.push((*input, dy.zip_map(y, |g, s| g * s * (T::one() - s))?));
            }
            Op::Softmax { input } => {
                let k = y.shape()[1];
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(k).zip(y.data().chunks(k)).zip(dy.data().chunks(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*input, Tensor::from_raw(y.shape().to_vec(), dx)));
            }
            Op::AvgPool { input, window } => {
                let in_shape = self.shape(*input).to_vec();
                let dx = conv::avg_pool_backward(&in_shape, *window, dy.data());
                out.push((*input, Tensor::from_raw(in_shape, dx)));
            }
            Op::Reshape { input } => {
                out.push((*input, dy.clone().reshape(self.shape(*input))?));
            }
            Op::Concat { inputs } => {
                let n = dy.shape()[0];
                let total = dy.shape()[1];
                let mut offset = 0;
                for &v in inputs {
                    let w = self.shape(v)[1];
                    if self.wants(v) {
                        let mut g = Vec::with_capacity(n * w);
                        for row in 0..n {
                            g.extend_from_slice(&dy.data()[row * total + offset..][..w]);
                        }
                        out.push((v, Tensor::from_raw(vec![n, w], g)));
                    }
                    offset += w;
                }
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.map(|g| -g)));
            }
            Op::Mul { a, b } => {
                out.push((*a, dy.zip_map(self.value(*b), |g, v| g * v)?));
                out.push((*b, dy.zip_map(self.value(*a), |g, v| g * v)?));
            }
            Op::Scale { input, factor } => {
                out.push((*input, dy.map(|g| g * *factor)));
            }
            Op::AddScalar { input } => {
                out.push((*input, dy.clone()));
            }
            Op::Abs { input } => {
                let x = self.value(*input);
                out.push((*input, dy.zip_map(x, |g, v| g * sign(v))?));
            }
            Op::Square { input } => {
                let x = self.value(*input);
                out.push((*input, dy.zip_map(x, |g, v| g * (v + v))?));
            }
            Op::LogEps { input, eps } => {
                let x = self.value(*input);
                out.push((*input, dy.zip_map(x, |g, v| g / (v + *eps))?));
            }
            Op::Mean { input } => {
                let x = self.value(*input);
                let g = dy.item() / T::from_usize(x.len()).unwrap();
                out.push((*input, Tensor::full(x.shape(), g)));
            }
            Op::Sum { input } => {
                out.push((*input, Tensor::full(self.shape(*input), dy.item())));
            }
            Op::Gather { input, indices } => {
                let shape = self.shape(*input).to_vec();
                let mut dx = vec![T::zero(); shape[0] * shape[1]];
                for (n, &i) in indices.iter().enumerate() {
                    dx[n * shape[1] + i] = dy.data()[n];
                }
                out.push((*input, Tensor::from_raw(shape, dx)));
            }
        }
        Ok(out)
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let t = g.tanh(x).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert!(g.value(t).data().iter().all(|&v| v == 0.0));
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn tanh_stays_strictly_inside_unit_interval() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[4], &[-5.0, -0.3, 0.3, 5.0]).unwrap());
        let t = g.tanh(x).unwrap();
        assert!(g.value(t).data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn elu_matches_piecewise_formula() {
        let points: Vec<f64> = (0..100).map(|i| -5.0 + 10.0 * i as f64 / 99.0).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[100], &points).unwrap());
        let y = g.elu(x, 1.0).unwrap();
        for (&p, &v) in points.iter().zip(g.value(y).data()) {
            let expected = if p > 0.0 { p } else { p.exp() - 1.0 };
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_fixed_point_and_batch_of_one() {
        // channel already zero-mean with unit (biased) variance
        let vals = [1.0, -1.0, 1.0, -1.0];
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[4, 1], &vals).unwrap());
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::zeros(&[1]));
        let (y, stats) = g.batch_norm(x, gamma, beta, None, 1e-12).unwrap();
        for (a, b) in g.value(y).data().iter().zip(vals) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(stats.unwrap().mean, vec![0.0]);

        let one = g.constant(Tensor::ones(&[1, 1]));
        let err = g.batch_norm(one, gamma, beta, None, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // eval mode accepts a single sample
        assert!(g.batch_norm(one, gamma, beta, Some((&[0.0], &[1.0])), 1e-5).is_ok());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2], 1e300));
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::Numeric(_))));
        let z = g.constant(Tensor::full(&[1], -1.0));
        assert!(g.log_eps(z, 1e-7).is_err());
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2]));
        let c = g.constant(Tensor::ones(&[2]));
        let y = g.mul(x, c).unwrap();
        let s = g.mean(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5]);
    }
}
