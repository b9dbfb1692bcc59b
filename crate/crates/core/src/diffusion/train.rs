use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::{noise_with_alpha_bar, VarianceSchedule};
use super::unet::{UNet, UNetConfig};
use crate::checkpoint::Checkpoint;
use crate::data::FaceDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTrainConfig {
    pub unet_base: usize,
    /// Optimizer updates.
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            unet_base: 32,
            iterations: 4000,
            batch_size: 16,
            optimizer: OptimizerConfig {
                clip_norm: Some(1.0),
                ..OptimizerConfig::adam(5e-4)
            },
        }
    }
}

/// A trained noise predictor together with the schedule it was trained on.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    pub net: UNet<f32>,
    pub schedule: VarianceSchedule,
}

impl NoisePredictor {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.net.to_checkpoint().with_meta("role", "noise_predictor");
        self.schedule.write_meta(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("role") != Some("noise_predictor") {
            return Err(Error::Checkpoint("not a noise-predictor checkpoint".into()));
        }
        Ok(Self {
            net: UNet::from_checkpoint(ck)?,
            schedule: VarianceSchedule::read_meta(ck)?,
        })
    }
}

/// Per-pixel MSE between true and predicted noise on a batch noised at the
/// given steps.
pub fn denoising_loss(
    net: &UNet<f32>,
    sched: &VarianceSchedule,
    x0: &Tensor<f32>,
    steps: &[usize],
    eps: &Tensor<f32>,
) -> Result<f64> {
    let xt = noise_batch(x0, steps, eps, sched)?;
    let pred = net.predict(&xt, Some(steps));
    let se: f64 = pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&p, &e)| ((p - e) as f64).powi(2))
        .sum();
    Ok(se / eps.len() as f64)
}

fn noise_batch(x0: &Tensor<f32>, steps: &[usize], eps: &Tensor<f32>, sched: &VarianceSchedule) -> Result<Tensor<f32>> {
    let n = x0.shape()[0];
    if steps.len() != n || eps.shape() != x0.shape() {
        return Err(Error::Shape("batch, steps and noise must agree".into()));
    }
    let parts: Vec<Tensor<f32>> = (0..n)
        .map(|i| {
            sched.check_step(steps[i])?;
            noise_with_alpha_bar(&x0.batch_item(i), &eps.batch_item(i), sched.alpha_bar(steps[i]))
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&parts))
}

/// Draw a training batch: images with replacement, uniform steps, noise.
pub fn draw_batch(
    rng: &mut impl Rng,
    pool: &FaceDataset,
    sched: &VarianceSchedule,
    n: usize,
) -> (Tensor<f32>, Vec<usize>, Tensor<f32>) {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..pool.len())).collect();
    let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let x0 = pool.images().select(&idx);
    let eps: Vec<f32> = (0..x0.len())
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    let eps = Tensor::from_vec(x0.shape().to_vec(), eps);
    (x0, steps, eps)
}

/// Fit the noise predictor with unit weighting over uniformly drawn steps.
/// Returns the predictor and the per-update loss trace.
pub fn train_diffusion(
    pool: &FaceDataset,
    sched: &VarianceSchedule,
    cfg: &DiffusionTrainConfig,
    seed: u64,
) -> Result<(NoisePredictor, Vec<f64>)> {
    if pool.is_empty() {
        return Err(Error::Dataset("empty training pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = UNet::<f32>::new(UNetConfig::noise_predictor(cfg.unet_base), &mut rng);
    net.check_input(pool.images().shape())?;
    let mut opt = Optimizer::new(cfg.optimizer, net.params());
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (x0, steps, eps) = draw_batch(&mut rng, pool, sched, cfg.batch_size);
        let xt = noise_batch(&x0, &steps, &eps, sched)?;
        let mut g = Graph::new();
        let p = net.params().bind(&mut g, true);
        let xv = g.constant(xt);
        let target = g.constant(eps);
        let pred = net.forward(&mut g, &p, xv, Some(&steps));
        let loss = g.mse(pred, target);
        let lv = g.value(loss).item() as f64;
        trace.push(lv);
        if !lv.is_finite() {
            return Err(Error::Diverged {
                what: "diffusion training".into(),
                step: it,
                trace,
            });
        }
        let mut grads = g.backward(loss);
        let grads = net.params().collect_grads(&mut grads, &p);
        opt.step(net.params_mut(), &grads);
        if it % 100 == 0 {
            log::debug!("diffusion iteration {it}: loss {lv:.4}");
        }
    }
    Ok((
        NoisePredictor {
            net,
            schedule: sched.clone(),
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> FaceDataset {
        let n = 6;
        let data: Vec<f32> = (0..n * 64).map(|i| if (i % 64) / 8 < 4 { 0.8 } else { -0.6 }).collect();
        FaceDataset::new(Tensor::from_vec([n, 1, 8, 8], data), vec![0; n], 1).unwrap()
    }

    #[test]
    fn untrained_zero_output_has_unit_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = UNet::<f32>::new(UNetConfig::noise_predictor(2), &mut rng);
        for i in 0..net.params().len() {
            let t = net.params_mut().get_mut(i);
            t.data_mut().fill(0.0);
        }
        let sched = VarianceSchedule::linear(50).unwrap();
        let (x0, steps, eps) = draw_batch(&mut rng, &pool(), &sched, 64);
        let l = denoising_loss(&net, &sched, &x0, &steps, &eps).unwrap();
        assert!((l - 1.0).abs() < 0.1, "{l}");
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let sched = VarianceSchedule::linear(50).unwrap();
        let cfg = DiffusionTrainConfig {
            unet_base: 4,
            iterations: 150,
            batch_size: 8,
            optimizer: OptimizerConfig::adam(2e-3),
        };
        let (a, ta) = train_diffusion(&pool(), &sched, &cfg, 1).unwrap();
        let (_, tb) = train_diffusion(&pool(), &sched, &cfg, 1).unwrap();
        assert_eq!(ta, tb);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (x0, steps, eps) = draw_batch(&mut rng, &pool(), &sched, 64);
        let l = denoising_loss(&a.net, &sched, &x0, &steps, &eps).unwrap();
        assert!(l < 1.0, "{l}");
        let ck = Checkpoint::from_bytes(&a.to_checkpoint().to_bytes()).unwrap();
        let back = NoisePredictor::from_checkpoint(&ck).unwrap();
        assert_eq!(back.schedule, a.schedule);
    }
}
