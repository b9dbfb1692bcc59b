//! Parameter storage, layer helpers and optimizers shared by every network.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.tensors[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Add every parameter to `g` as a leaf; the returned handles are
    /// indexed like the set.
    pub fn bind(&self, g: &mut Graph<F>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect()
    }

    /// Collect gradients for bound handles, zero-filling unused ones.
    pub fn collect_grads(&self, grads: &mut crate::graph::Grads<F>, handles: &[Var]) -> Vec<Tensor<F>> {
        handles
            .iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn write_into(&self, ck: &mut Checkpoint) {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ck.insert(
                n,
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_f64() as f32).collect(),
            );
        }
    }

    /// Overwrite every parameter from `ck`. Names and shapes must match
    /// exactly; extra entries in the checkpoint are an error too.
    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.params.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.names.len(),
                ck.params.len()
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let p = ck
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            if p.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    p.shape,
                    t.shape()
                )));
            }
            *t = Tensor::from_vec(p.shape.clone(), p.data.iter().map(|&v| F::of(v as f64)).collect());
        }
        Ok(())
    }

    /// Fingerprint of all parameter values.
    pub fn checksum(&self) -> String {
        let parts: Vec<String> = self.tensors.iter().map(Tensor::checksum).collect();
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(parts.join("").as_bytes())[..16])
    }
}

fn he_normal<F: Float>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<F> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Square-kernel convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    w: usize,
    b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// "Same" 3x3 convolution.
    pub fn same3<F: Float>(ps: &mut ParamSet<F>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(ps, rng, name, cin, cout, 3, 1, 1, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let w = ps.push(
            format!("{name}.weight"),
            he_normal(rng, &[cout, cin, k, k], cin * k * k, gain),
        );
        let b = ps.push(format!("{name}.bias"), Tensor::zeros([cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

/// Fully connected layer.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new<F: Float>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Self {
        let w = ps.push(format!("{name}.weight"), he_normal(rng, &[dout, din], din, gain));
        let b = ps.push(format!("{name}.bias"), Tensor::zeros([dout]));
        Self { w, b }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.w], Some(p[self.b]))
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::adam()),
            "gan-adam" => Ok(OptimizerKind::Adam {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            }),
            "sgd" => Ok(OptimizerKind::Sgd { momentum: 0.9 }),
            _ => Err(Error::Config(format!("unknown optimizer '{s}' (adam, gan-adam, sgd)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Adam { beta1, .. } if *beta1 < 0.8 => "gan-adam",
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd { .. } => "sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// L2 penalty added to the gradient of every weight tensor (biases are
    /// exempt).
    pub weight_decay: f64,
    /// Rescale the full gradient when its norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::adam(),
            lr,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

pub struct Optimizer<F> {
    cfg: OptimizerConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    t: u64,
}

impl<F: Float> Optimizer<F> {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet<F>) -> Self {
        let zeros = |ps: &ParamSet<F>| ps.tensors().iter().map(|t| vec![F::ZERO; t.len()]).collect();
        Self {
            cfg,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Tensor<F>]) {
        assert_eq!(grads.len(), params.len());
        self.t += 1;
        let scale = match self.cfg.clip_norm {
            Some(c) => {
                let norm: f64 = grads.iter().map(|g| g.dot(g).to_f64()).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = self.cfg.lr;
        let wd = self.cfg.weight_decay;
        for (i, grad) in grads.iter().enumerate().take(params.len()) {
            let decay = if params.get(i).shape().len() > 1 { wd } else { 0.0 };
            let g = grad.data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(i).data_mut();
            match self.cfg.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    let (b1, b2) = (F::of(beta1), F::of(beta2));
                    let step = F::of(lr / bc1);
                    let inv_bc2 = F::of(1.0 / bc2);
                    let (eps, decay, scale) = (F::of(eps), F::of(decay), F::of(scale));
                    for j in 0..p.len() {
                        let gj = g[j] * scale + decay * p[j];
                        m[j] = b1 * m[j] + (F::ONE - b1) * gj;
                        v[j] = b2 * v[j] + (F::ONE - b2) * gj * gj;
                        p[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let (mu, lr, decay, scale) = (F::of(momentum), F::of(lr), F::of(decay), F::of(scale));
                    for j in 0..p.len() {
                        let gj = g[j] * scale + decay * p[j];
                        m[j] = mu * m[j] + gj;
                        p[j] -= lr * m[j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_round_trip_through_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f32>::new();
        Conv::same3(&mut ps, &mut rng, "c", 2, 3);
        Dense::new(&mut ps, &mut rng, "d", 4, 5, 1.0);
        let mut ck = Checkpoint::new();
        ps.write_into(&mut ck);
        let mut other = ps.clone();
        other.get_mut(0).data_mut()[0] = 42.0;
        other.load_from(&ck).unwrap();
        assert_eq!(other.checksum(), ps.checksum());
        ck.params.get_mut("d.bias").unwrap().shape = vec![4];
        assert!(other.load_from(&ck).is_err());
    }

    #[test]
    fn optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::adam(), OptimizerKind::Sgd { momentum: 0.9 }] {
            let mut ps = ParamSet::<f64>::new();
            ps.push("x", Tensor::from_vec([2], vec![3.0, -2.0]));
            let cfg = OptimizerConfig {
                kind,
                lr: 0.05,
                weight_decay: 0.0,
                clip_norm: Some(10.0),
            };
            let mut opt = Optimizer::new(cfg, &ps);
            for _ in 0..500 {
                let g = ps.get(0).scale(2.0);
                opt.step(&mut ps, &[g]);
            }
            assert!(ps.get(0).norm() < 1e-2, "{kind:?}: {:?}", ps.get(0));
        }
    }
}
