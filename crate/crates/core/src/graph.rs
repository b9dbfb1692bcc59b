//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node (or [`Graph::backward_with`] on any
//! node, given the upstream gradient) walks the tape in reverse and returns
//! gradients for every leaf that was created with `requires_grad`.
//!
//! Nodes that do not depend on any gradient-requiring leaf are skipped during
//! the backward pass, so frozen networks cost only their forward compute plus
//! the input-gradient path.

use crate::kernels::{self, ConvGeom};
use crate::tensor::{gemm, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    LeakyRelu(Var, F),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    MaxPool2 {
        x: Var,
        arg: Vec<u32>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddChannelBias(Var, Var),
    Reshape(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<F>,
    },
    Mse(Var, Var),
    GaussianKl {
        mu: Var,
        log_sigma: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf.
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Convolution with square kernel `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], cin, "conv input channels {cin} != weight {}", ws[1]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let mut y = vec![F::ZERO; n * geom.cout * ho * wo];
        kernels::conv2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut y,
        );
        let out = Tensor::from_vec([n, geom.cout, ho, wo], y);
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(out, Op::Conv2d { x, w, b, geom }, &ins)
    }

    /// `y = x w^T + b` with `x: [n, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.value(x).dims2();
        let (dout, win) = self.value(w).dims2();
        assert_eq!(din, win, "linear input width {din} != weight {win}");
        let mut y = vec![F::ZERO; n * dout];
        gemm(
            false,
            true,
            n,
            dout,
            din,
            F::ONE,
            self.value(x).data(),
            self.value(w).data(),
            F::ZERO,
            &mut y,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(Tensor::from_vec([n, dout], y), Op::Linear { x, w, b }, &ins)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(F::ZERO));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        let y = self.value(x).map(|v| if v > F::ZERO { v } else { v * slope });
        self.push(y, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push(y, Op::Silu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        self.push(y, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.exp());
        self.push(y, Op::Exp(x), &[x])
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut y = vec![F::ZERO; n * c * (h / 2) * (w / 2)];
        let arg = kernels::maxpool2(n * c, h, w, self.value(x).data(), &mut y);
        self.push(Tensor::from_vec([n, c, h / 2, w / 2], y), Op::MaxPool2 { x, arg }, &[x])
    }

    pub fn avgpool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut y = vec![F::ZERO; n * c * (h / 2) * (w / 2)];
        kernels::avgpool2(n * c, h, w, self.value(x).data(), &mut y);
        self.push(Tensor::from_vec([n, c, h / 2, w / 2], y), Op::AvgPool2(x), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut y = vec![F::ZERO; n * c * h * w * 4];
        kernels::upsample2(n * c, h, w, self.value(x).data(), &mut y);
        self.push(Tensor::from_vec([n, c, 2 * h, 2 * w], y), Op::Upsample2(x), &[x])
    }

    /// Concatenate two NCHW tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut y = Vec::with_capacity(n * (pa + pb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..n {
            y.extend_from_slice(&da[i * pa..(i + 1) * pa]);
            y.extend_from_slice(&db[i * pb..(i + 1) * pb]);
        }
        self.push(
            Tensor::from_vec([n, ca + cb, h, w], y),
            Op::ConcatChannels(a, b),
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).add(self.value(b));
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).sub(self.value(b));
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale(x, s), &[x])
    }

    /// Add a per-(item, channel) value `v: [n, c]` to every pixel of `x`.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(v).shape(), &[n, c], "channel bias shape");
        let mut y = self.value(x).clone();
        let bias = self.value(v).data().to_vec();
        for (plane, &b) in y.data_mut().chunks_mut(h * w).zip(&bias) {
            plane.iter_mut().for_each(|p| *p += b);
        }
        self.push(y, Op::AddChannelBias(x, v), &[x, v])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let y = self.value(x).reshape(shape);
        self.push(y, Op::Reshape(x), &[x])
    }

    /// Flatten everything but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Var {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product::<usize>();
        self.reshape(x, [n, rest])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[target]`, computed with
    /// the max-shift so large logits stay finite.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (n, c) = self.value(logits).dims2();
        assert_eq!(n, targets.len(), "one target per row");
        let data = self.value(logits).data();
        let mut probs = vec![F::ZERO; n * c];
        let mut loss = F::ZERO;
        for i in 0..n {
            let row = &data[i * c..(i + 1) * c];
            assert!(targets[i] < c, "target {} out of {c} classes", targets[i]);
            let lse = log_sum_exp(row);
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[targets[i]];
        }
        let loss = loss / F::of(n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[F]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.len(), targets.len(), "one target per logit");
        let mut loss = F::ZERO;
        for (&z, &t) in x.data().iter().zip(targets) {
            // max(z,0) - z t + log(1 + e^{-|z|})
            loss += z.max(F::ZERO) - z * t + (F::ONE + (-z.abs()).exp()).ln();
        }
        let loss = loss / F::of(targets.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let s: F = va.data().iter().zip(vb.data()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let m = s / F::of(va.len() as f64);
        self.push(Tensor::scalar(m), Op::Mse(a, b), &[a, b])
    }

    /// `KL(N(mu, diag(sigma^2)) || N(0, I))`, summed over latent dims and
    /// averaged over the batch.
    pub fn gaussian_kl(&mut self, mu: Var, log_sigma: Var) -> Var {
        let (n, _) = self.value(mu).dims2();
        assert_eq!(self.value(mu).shape(), self.value(log_sigma).shape());
        let s: F = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(log_sigma).data())
            .map(|(&m, &ls)| m * m + (ls + ls).exp() - F::ONE - ls - ls)
            .sum();
        let kl = s * F::of(0.5) / F::of(n as f64);
        self.push(Tensor::scalar(kl), Op::GaussianKl { mu, log_sigma }, &[mu, log_sigma])
    }

    /// Gradients of the scalar node `root` with respect to all leaves.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.value(root).len(), 1, "backward() needs a scalar root");
        let seed = Tensor::full(self.value(root).shape().to_vec(), F::ONE);
        self.backward_with(root, seed)
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `root`) back to
    /// the leaves.
    pub fn backward_with(&self, root: Var, seed: Tensor<F>) -> Grads<F> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Grads { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn unary(&self, grads: &mut [Option<Tensor<F>>], x: Var, g: &Tensor<F>, f: impl Fn(F, F, F) -> F, y: &Tensor<F>) {
        if !self.wants(x) {
            return;
        }
        let xv = self.value(x);
        let data: Vec<F> = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(y.data())
            .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
            .collect();
        Self::accumulate(grads, x, Tensor::from_vec(xv.shape().to_vec(), data));
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let mut dx = self.wants(*x).then(|| vec![F::ZERO; self.value(*x).len()]);
                let mut dw = self.wants(*w).then(|| vec![F::ZERO; self.value(*w).len()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![F::ZERO; geom.cout]);
                kernels::conv2d_backward(
                    geom,
                    n,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape().to_vec(), dx));
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, Tensor::from_vec(self.value(*w).shape().to_vec(), dw));
                }
                if let (Some(db), Some(b)) = (db, b) {
                    Self::accumulate(grads, *b, Tensor::from_vec([geom.cout], db));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2();
                let (dout, _) = self.value(*w).dims2();
                if self.wants(*x) {
                    let mut dx = vec![F::ZERO; n * din];
                    gemm(
                        false,
                        false,
                        n,
                        din,
                        dout,
                        F::ONE,
                        g.data(),
                        self.value(*w).data(),
                        F::ZERO,
                        &mut dx,
                    );
                    Self::accumulate(grads, *x, Tensor::from_vec([n, din], dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![F::ZERO; dout * din];
                    gemm(
                        true,
                        false,
                        dout,
                        din,
                        n,
                        F::ONE,
                        g.data(),
                        self.value(*x).data(),
                        F::ZERO,
                        &mut dw,
                    );
                    Self::accumulate(grads, *w, Tensor::from_vec([dout, din], dw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![F::ZERO; dout];
                    for row in g.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    Self::accumulate(grads, b, Tensor::from_vec([dout], db));
                }
            }
            Op::Relu(x) => self.unary(grads, *x, g, |gi, xi, _| if xi > F::ZERO { gi } else { F::ZERO }, y),
            Op::LeakyRelu(x, s) => {
                let s = *s;
                self.unary(grads, *x, g, move |gi, xi, _| if xi > F::ZERO { gi } else { gi * s }, y)
            }
            Op::Silu(x) => self.unary(
                grads,
                *x,
                g,
                |gi, xi, _| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (F::ONE - s))
                },
                y,
            ),
            Op::Tanh(x) => self.unary(grads, *x, g, |gi, _, yi| gi * (F::ONE - yi * yi), y),
            Op::Sigmoid(x) => self.unary(grads, *x, g, |gi, _, yi| gi * yi * (F::ONE - yi), y),
            Op::Exp(x) => self.unary(grads, *x, g, |gi, _, yi| gi * yi, y),
            Op::MaxPool2 { x, arg } => {
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                    let d = dx.data_mut();
                    for (&a, &gi) in arg.iter().zip(g.data()) {
                        d[a as usize] += gi;
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::AvgPool2(x) => {
                if self.wants(*x) {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    kernels::avgpool2_backward(n * c, h, w, g.data(), dx.data_mut());
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Upsample2(x) => {
                if self.wants(*x) {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    kernels::upsample2_backward(n * c, h, w, g.data(), dx.data_mut());
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                let gd = g.data();
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(n * pa);
                    for i in 0..n {
                        da.extend_from_slice(&gd[i * (pa + pb)..i * (pa + pb) + pa]);
                    }
                    Self::accumulate(grads, *a, Tensor::from_vec([n, ca, h, w], da));
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(n * pb);
                    for i in 0..n {
                        db.extend_from_slice(&gd[i * (pa + pb) + pa..(i + 1) * (pa + pb)]);
                    }
                    Self::accumulate(grads, *b, Tensor::from_vec([n, cb, h, w], db));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.scale(-F::ONE));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.zip_map(self.value(*b), |p, q| p * q));
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.zip_map(self.value(*a), |p, q| p * q));
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, g.scale(*s));
                }
            }
            Op::AddChannelBias(x, v) => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, g.clone());
                }
                if self.wants(*v) {
                    let (n, c, h, w) = g.dims4();
                    let dv: Vec<F> = g.data().chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                    Self::accumulate(grads, *v, Tensor::from_vec([n, c], dv));
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, g.reshape(self.value(*x).shape().to_vec()));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let v = g.item() / F::of(xv.len() as f64);
                    Self::accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), v));
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let (n, c) = self.value(*logits).dims2();
                    let s = g.item() / F::of(n as f64);
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[i * c + t] -= F::ONE;
                    }
                    d.iter_mut().for_each(|v| *v *= s);
                    Self::accumulate(grads, *logits, Tensor::from_vec([n, c], d));
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if self.wants(*logits) {
                    let xv = self.value(*logits);
                    let s = g.item() / F::of(targets.len() as f64);
                    let d: Vec<F> = xv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| (sigmoid(z) - t) * s)
                        .collect();
                    Self::accumulate(grads, *logits, Tensor::from_vec(xv.shape().to_vec(), d));
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = g.item() * F::of(2.0) / F::of(va.len() as f64);
                let diff = va.zip_map(vb, |p, q| (p - q) * s);
                if self.wants(*b) {
                    Self::accumulate(grads, *b, diff.scale(-F::ONE));
                }
                if self.wants(*a) {
                    Self::accumulate(grads, *a, diff);
                }
            }
            Op::GaussianKl { mu, log_sigma } => {
                let n = self.value(*mu).shape()[0];
                let s = g.item() / F::of(n as f64);
                if self.wants(*mu) {
                    Self::accumulate(grads, *mu, self.value(*mu).scale(s));
                }
                if self.wants(*log_sigma) {
                    let d = self.value(*log_sigma).map(|ls| ((ls + ls).exp() - F::ONE) * s);
                    Self::accumulate(grads, *log_sigma, d);
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<F: Float>(v: F) -> F {
    F::ONE / (F::ONE + (-v).exp())
}

pub fn log_sum_exp<F: Float>(row: &[F]) -> F {
    let m = row.iter().copied().fold(row[0], F::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln()
}

/// Softmax of each row of a `[n, c]` logit matrix.
pub fn softmax_rows<F: Float>(logits: &Tensor<F>) -> Tensor<F> {
    let (_, c) = logits.dims2();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite differences of `f` at `x`, the oracle for every op.
    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
        let h = 1e-6;
        let mut g = vec![0.0; x.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            *gi = (f(&p) - f(&m)) / (2.0 * h);
        }
        Tensor::from_vec(x.shape().to_vec(), g)
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.sub(b).norm() / b.norm().max(1e-12)
    }

    /// Check d loss / d input for a graph built by `build` from leaf inputs.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |xs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let out = build(&mut g, &vs);
            (g, vs, out)
        };
        let (g, vs, out) = eval(&inputs);
        let grads = g.backward(out);
        for (k, v) in vs.iter().enumerate() {
            let analytic = grads.get(*v).expect("leaf gradient").clone();
            let f = |t: &Tensor<f64>| {
                let mut xs = inputs.clone();
                xs[k] = t.clone();
                let (g, _, out) = eval(&xs);
                g.value(out).item()
            };
            let numeric = numeric_grad(&inputs[k], &f);
            let e = rel_err(&analytic, &numeric);
            assert!(e < 1e-6, "input {k}: relative error {e}");
        }
    }

    /// Reduce any tensor to a scalar through a fixed random projection so
    /// every output element contributes a distinct weight.
    fn project(g: &mut Graph<f64>, v: Var) -> Var {
        let shape = g.value(v).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::from_vec(shape, (0..n).map(|i| ((i as f64) * 0.618).sin()).collect());
        let c = g.constant(w);
        let m = g.mul(v, c);
        g.mean(m)
    }

    #[test]
    fn conv_linear_and_activations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1);
            let y = g.silu(y);
            project(g, y)
        });
        check(vec![x.clone(), w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 0);
            let y = g.tanh(y);
            project(g, y)
        });
        let lx = rand_tensor(&mut rng, &[3, 5]);
        let lw = rand_tensor(&mut rng, &[4, 5]);
        let lb = rand_tensor(&mut rng, &[4]);
        check(vec![lx, lw, lb], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let y = g.sigmoid(y);
            let y = g.exp(y);
            project(g, y)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let b = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let v = rand_tensor(&mut rng, &[2, 2]);
        check(vec![a.clone(), b.clone(), v], |g, x| {
            let c = g.concat_channels(x[0], x[1]);
            let p = g.avgpool2(c);
            let u = g.upsample2(p);
            let m = g.maxpool2(u);
            let s = g.scale(m, 1.7);
            let r = g.reshape(s, [2, 20]);
            let r = g.reshape(r, [2, 5, 2, 2]);
            let a2 = g.add_channel_bias(x[0], x[2]);
            let a2 = g.maxpool2(a2);
            let flat_a = g.flatten(a2);
            let flat_r = g.flatten(r);
            let o1 = project(g, flat_a);
            let o2 = project(g, flat_r);
            let l = g.sub(o1, o2);
            let l2 = g.mul(l, l);
            let l3 = g.add(l2, o1);
            let l3 = g.leaky_relu(l3, 0.2);
            g.relu(l3)
        });
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = rand_tensor(&mut rng, &[3, 5]).scale(3.0);
        check(vec![logits.clone()], |g, v| g.softmax_cross_entropy(v[0], &[0, 4, 2]));
        check(vec![logits.reshape([15])], |g, v| {
            let t: Vec<f64> = (0..15).map(|i| (i % 2) as f64).collect();
            g.bce_with_logits(v[0], &t)
        });
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]);
        check(vec![a.clone(), b.clone()], |g, v| g.mse(v[0], v[1]));
        check(vec![a, b], |g, v| g.gaussian_kl(v[0], v[1]));
    }

    #[test]
    fn uniform_logits_give_ln_c_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([1, 40]));
        let l = g.softmax_cross_entropy(z, &[7]);
        assert!((g.value(l).item() - 40f64.ln()).abs() < 1e-12);
        let p = softmax_rows(g.value(z));
        assert!(p.data().iter().all(|&v| (v - 0.025).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let mut g = Graph::<f32>::new();
        let z = g.leaf(Tensor::from_vec([1, 3], vec![1000.0, -1000.0, 0.0]), true);
        let l = g.softmax_cross_entropy(z, &[1]);
        assert!(g.value(l).item().is_finite());
        let gr = g.backward(l);
        assert!(gr.get(z).unwrap().all_finite());
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full([1, 2], 1.0), true);
        let w = g.leaf(Tensor::full([3, 2], 0.5), false);
        let y = g.linear(x, w, None);
        let l = g.mean(y);
        let gr = g.backward(l);
        assert!(gr.get(w).is_none());
        assert_eq!(gr.get(x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn backward_with_seed_is_a_vjp() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([2], vec![1.0, 2.0]), true);
        let y = g.scale(x, 3.0);
        let gr = g.backward_with(y, Tensor::from_vec([2], vec![1.0, -1.0]));
        assert_eq!(gr.get(x).unwrap().data(), &[3.0, -3.0]);
    }
}
