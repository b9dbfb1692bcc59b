use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::VarianceSchedule;
use super::unet::UNet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// All randomness of one ancestral sampling run: the start `x_T` and the
/// injected noise `z_t` for every step.
#[derive(Debug, Clone)]
pub struct NoisePath<F> {
    pub x_t: Tensor<F>,
    /// `z[t - 1]` is used by the step from `t` to `t - 1`.
    pub z: Vec<Tensor<F>>,
    pub seed: u64,
}

fn gaussian<F: Float>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            F::of(v)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

impl<F: Float> PartialEq for NoisePath<F> {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.x_t == other.x_t && self.z == other.z
    }
}

impl<F: Float> NoisePath<F> {
    /// Draw `x_T`, then `z_T` down to `z_1`, from one seeded stream. With
    /// `zero_last` the final injection `z_1` is zero.
    pub fn from_seed(seed: u64, steps: usize, shape: &[usize], zero_last: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_t = gaussian(&mut rng, shape);
        let mut z: Vec<Tensor<F>> = (0..steps).map(|_| gaussian(&mut rng, shape)).collect();
        z.reverse();
        if zero_last && steps > 0 {
            z[0] = Tensor::zeros(shape.to_vec());
        }
        Self { x_t, z, seed }
    }

    /// Same start, different injected noise.
    pub fn with_fresh_z(&self, seed: u64, zero_last: bool) -> Self {
        let other = Self::from_seed(seed, self.z.len(), self.x_t.shape(), zero_last);
        Self {
            x_t: self.x_t.clone(),
            z: other.z,
            seed,
        }
    }

    pub fn steps(&self) -> usize {
        self.z.len()
    }

    pub fn cast<G: Float>(&self) -> NoisePath<G> {
        NoisePath {
            x_t: self.x_t.cast(),
            z: self.z.iter().map(Tensor::cast).collect(),
            seed: self.seed,
        }
    }

    pub fn check(&self, sched: &VarianceSchedule) -> Result<()> {
        if self.steps() != sched.steps() {
            return Err(Error::Config(format!(
                "noise path has {} steps, schedule {}",
                self.steps(),
                sched.steps()
            )));
        }
        if let Some(bad) = self.z.iter().find(|z| z.shape() != self.x_t.shape()) {
            return Err(Error::Shape(format!(
                "injected noise {:?} vs start {:?}",
                bad.shape(),
                self.x_t.shape()
            )));
        }
        Ok(())
    }
}

/// Coefficients `(c_x, c_eps, c_z)` of `x_{t-1} = c_x x_t + c_eps eps + c_z z`.
pub fn update_coefficients(alpha: f64, alpha_bar: f64, sigma: f64) -> (f64, f64, f64) {
    let inv = 1.0 / alpha.sqrt();
    (inv, -inv * (1.0 - alpha) / (1.0 - alpha_bar).sqrt(), sigma)
}

fn step_coefficients(sched: &VarianceSchedule, t: usize) -> (f64, f64, f64) {
    update_coefficients(sched.alpha(t), sched.alpha_bar(t), sched.sigma(t))
}

/// One denoising step on the graph. `z` may be a constant or a leaf.
pub fn denoise_step_graph<F: Float>(
    g: &mut Graph<F>,
    net: &UNet<F>,
    p: &[Var],
    x: Var,
    z: Var,
    t: usize,
    sched: &VarianceSchedule,
) -> Var {
    let n = g.value(x).shape()[0];
    let eps = net.forward(g, p, x, Some(&vec![t; n]));
    let (cx, ce, s) = step_coefficients(sched, t);
    let a = g.scale(x, F::of(cx));
    let b = g.scale(eps, F::of(ce));
    let mean = g.add(a, b);
    let noise = g.scale(z, F::of(s));
    g.add(mean, noise)
}

/// Value-only denoising step.
pub fn denoise_step<F: Float>(
    x_t: &Tensor<F>,
    t: usize,
    z: &Tensor<F>,
    net: &UNet<F>,
    sched: &VarianceSchedule,
) -> Result<Tensor<F>> {
    sched.check_step(t)?;
    net.check_input(x_t.shape())?;
    if z.shape() != x_t.shape() {
        return Err(Error::Shape(format!(
            "noise {:?} vs image {:?}",
            z.shape(),
            x_t.shape()
        )));
    }
    let n = x_t.shape()[0];
    let eps = net.predict(x_t, Some(&vec![t; n]));
    Ok(apply_step(x_t, &eps, z, t, sched))
}

/// The closed-form update given a noise prediction.
pub fn apply_step<F: Float>(
    x_t: &Tensor<F>,
    eps: &Tensor<F>,
    z: &Tensor<F>,
    t: usize,
    sched: &VarianceSchedule,
) -> Tensor<F> {
    let (cx, ce, s) = step_coefficients(sched, t);
    let (cx, ce, s) = (F::of(cx), F::of(ce), F::of(s));
    let mut out = x_t.zip_map(eps, |x, e| cx * x + ce * e);
    out.axpy(s, z);
    out
}

/// Run steps `from` down to `to` (inclusive) starting at `x`.
pub fn run_steps<F: Float>(
    net: &UNet<F>,
    sched: &VarianceSchedule,
    path: &NoisePath<F>,
    mut x: Tensor<F>,
    from: usize,
    to: usize,
) -> Result<Tensor<F>> {
    for t in (to..=from).rev() {
        x = denoise_step(&x, t, &path.z[t - 1], net, sched)?;
        if !x.all_finite() {
            return Err(Error::Diverged {
                what: "sampling".into(),
                step: t,
                trace: Vec::new(),
            });
        }
    }
    Ok(x)
}

/// Fold the denoising step from `T` down to 1 along `path`. Deterministic;
/// no clamping.
pub fn sample<F: Float>(net: &UNet<F>, sched: &VarianceSchedule, path: &NoisePath<F>) -> Result<Tensor<F>> {
    path.check(sched)?;
    net.check_input(path.x_t.shape())?;
    run_steps(net, sched, path, path.x_t.clone(), sched.steps(), 1)
}
