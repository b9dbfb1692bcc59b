//! Convolutional VAE fitted to the visible pool, and the latent attack that
//! tunes a code so its decoding scores on the target class.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::classifier::Classifier;
use crate::data::FaceDataset;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::nn::{Conv, Dense, Optimizer, OptimizerConfig, ParamSet};
use crate::optim::{descend, DescentConfig, Eval, StopReason};
use crate::result::{AttackResult, Method};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeSpec {
    pub latent: usize,
    /// Channels of the two conv stages; the decoder mirrors them.
    pub channels: (usize, usize),
    /// Weight of the per-image KL against the per-pixel squared error.
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for VaeSpec {
    fn default() -> Self {
        Self {
            latent: 64,
            channels: (32, 64),
            kl_weight: 5e-4,
            epochs: 150,
            batch_size: 20,
            optimizer: OptimizerConfig::adam(1e-3),
        }
    }
}

impl VaeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.channels.0 == 0 || self.channels.1 == 0 || self.batch_size == 0 {
            return Err(Error::Config("VAE sizes must be positive".into()));
        }
        if self.kl_weight.is_nan() || self.kl_weight < 0.0 {
            return Err(Error::Config("KL weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Vae<F> {
    height: usize,
    width: usize,
    latent: usize,
    channels: (usize, usize),
    params: ParamSet<F>,
    enc1: Conv,
    enc2: Conv,
    mu: Dense,
    log_sigma: Dense,
    dec_fc: Dense,
    dec1: Conv,
    dec2: Conv,
}

impl<F: Float> Vae<F> {
    pub fn new(
        height: usize,
        width: usize,
        latent: usize,
        channels: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !height.is_multiple_of(4) || !width.is_multiple_of(4) || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "VAE needs image sides divisible by 4, got {height}x{width}"
            )));
        }
        if latent == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let (c1, c2) = channels;
        let cells = (height / 4) * (width / 4);
        let mut ps = ParamSet::new();
        let enc1 = Conv::same3(&mut ps, rng, "enc1", 1, c1);
        let enc2 = Conv::same3(&mut ps, rng, "enc2", c1, c2);
        let mu = Dense::new(&mut ps, rng, "mu", c2 * cells, latent, 1.0);
        let log_sigma = Dense::new(&mut ps, rng, "log_sigma", c2 * cells, latent, 0.1);
        let dec_fc = Dense::new(&mut ps, rng, "dec_fc", latent, c2 * cells, 1.0);
        let dec1 = Conv::same3(&mut ps, rng, "dec1", c2, c1);
        let dec2 = Conv::same3(&mut ps, rng, "dec2", c1, 1);
        Ok(Self {
            height,
            width,
            latent,
            channels,
            params: ps,
            enc1,
            enc2,
            mu,
            log_sigma,
            dec_fc,
            dec1,
            dec2,
        })
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn cast<G: Float>(&self) -> Vae<G> {
        Vae {
            height: self.height,
            width: self.width,
            latent: self.latent,
            channels: self.channels,
            params: self.params.cast(),
            enc1: self.enc1,
            enc2: self.enc2,
            mu: self.mu,
            log_sigma: self.log_sigma,
            dec_fc: self.dec_fc,
            dec1: self.dec1,
            dec2: self.dec2,
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.height || shape[3] != self.width {
            return Err(Error::Shape(format!(
                "VAE expects [n, 1, {}, {}], got {shape:?}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> (Var, Var) {
        let h = self.enc1.forward(g, p, x);
        let h = g.relu(h);
        let h = g.maxpool2(h);
        let h = self.enc2.forward(g, p, h);
        let h = g.relu(h);
        let h = g.maxpool2(h);
        let h = g.flatten(h);
        (self.mu.forward(g, p, h), self.log_sigma.forward(g, p, h))
    }

    pub fn decode_graph(&self, g: &mut Graph<F>, p: &[Var], z: Var) -> Var {
        let n = g.value(z).shape()[0];
        let h = self.dec_fc.forward(g, p, z);
        let h = g.relu(h);
        let h = g.reshape(h, [n, self.channels.1, self.height / 4, self.width / 4]);
        let h = g.upsample2(h);
        let h = self.dec1.forward(g, p, h);
        let h = g.relu(h);
        let h = g.upsample2(h);
        let h = self.dec2.forward(g, p, h);
        g.tanh(h)
    }

    /// `(mu, log_sigma)`, each `[n, latent]`.
    pub fn encode(&self, x: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (mu, ls) = self.encode_graph(&mut g, &p, xv);
        Ok((g.value(mu).clone(), g.value(ls).clone()))
    }

    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        if z.shape().len() != 2 || z.shape()[1] != self.latent {
            return Err(Error::Shape(format!(
                "VAE latent is [n, {}], got {:?}",
                self.latent,
                z.shape()
            )));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let y = self.decode_graph(&mut g, &p, zv);
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new()
            .with_meta("kind", "vae")
            .with_meta("height", self.height)
            .with_meta("width", self.width)
            .with_meta("latent", self.latent)
            .with_meta("channels.0", self.channels.0)
            .with_meta("channels.1", self.channels.1);
        self.params.write_into(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("vae") {
            return Err(Error::Checkpoint("not a VAE checkpoint".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut vae = Self::new(
            ck.meta_parse("height")?,
            ck.meta_parse("width")?,
            ck.meta_parse("latent")?,
            (ck.meta_parse("channels.0")?, ck.meta_parse("channels.1")?),
            &mut rng,
        )?;
        vae.params.load_from(ck)?;
        Ok(vae)
    }
}

/// `mu + exp(log_sigma) * eps`.
pub fn reparameterize<F: Float>(mu: &Tensor<F>, log_sigma: &Tensor<F>, eps: &Tensor<F>) -> Tensor<F> {
    let s = log_sigma.map(|v| v.exp());
    mu.zip_map(&s.zip_map(eps, |a, b| a * b), |a, b| a + b)
}

/// Per-epoch mean of each objective term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeEpoch {
    pub reconstruction: f64,
    pub kl: f64,
}

/// Fit on `pool`, minimizing per-pixel squared error plus `kl_weight`
/// times the per-image KL to the unit Gaussian.
pub fn train_vae(pool: &FaceDataset, spec: &VaeSpec, seed: u64) -> Result<(Vae<f32>, Vec<VaeEpoch>)> {
    spec.validate()?;
    if pool.is_empty() {
        return Err(Error::Dataset("empty VAE training pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vae = Vae::<f32>::new(pool.height(), pool.width(), spec.latent, spec.channels, &mut rng)?;
    let mut opt = Optimizer::new(spec.optimizer, &vae.params);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut history = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let (mut rec, mut kl, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(spec.batch_size) {
            let mut g = Graph::new();
            let p = vae.params.bind(&mut g, true);
            let x = g.constant(pool.images().select(chunk));
            let (mu, ls) = vae.encode_graph(&mut g, &p, x);
            let eps: Vec<f32> = (0..chunk.len() * spec.latent)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect();
            let eps = g.constant(Tensor::from_vec([chunk.len(), spec.latent], eps));
            let sigma = g.exp(ls);
            let noise = g.mul(sigma, eps);
            let z = g.add(mu, noise);
            let y = vae.decode_graph(&mut g, &p, z);
            let mse = g.mse(y, x);
            let kv = g.gaussian_kl(mu, ls);
            let wk = g.scale(kv, spec.kl_weight as f32);
            let loss = g.add(mse, wk);
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    what: "VAE training".into(),
                    step: epoch,
                    trace: history.iter().map(|e: &VaeEpoch| e.reconstruction).collect(),
                });
            }
            rec += g.value(mse).item() as f64;
            kl += g.value(kv).item() as f64;
            batches += 1;
            let mut grads = g.backward(loss);
            let grads = vae.params.collect_grads(&mut grads, &p);
            opt.step(&mut vae.params, &grads);
        }
        let e = VaeEpoch {
            reconstruction: rec / batches as f64,
            kl: kl / batches as f64,
        };
        log::debug!("vae epoch {epoch}: mse {:.5} kl {:.3}", e.reconstruction, e.kl);
        history.push(e);
    }
    Ok((vae, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentInit {
    /// Encoding mean of a random visible-pool image.
    Pool,
    /// A draw from the unit Gaussian.
    Prior,
}

impl fmt::Display for LatentInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentInit::Pool => "pool",
            LatentInit::Prior => "prior",
        })
    }
}

impl FromStr for LatentInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" => Ok(LatentInit::Pool),
            "prior" => Ok(LatentInit::Prior),
            _ => Err(Error::Config(format!("unknown latent init '{s}' (pool, prior)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentAttackConfig {
    pub target: usize,
    pub lr: f64,
    pub max_iters: usize,
    pub stop_loss: f64,
    pub init: LatentInit,
    pub seed: u64,
}

impl LatentAttackConfig {
    pub fn new(target: usize, seed: u64) -> Self {
        Self {
            target,
            lr: 0.1,
            max_iters: 200,
            stop_loss: 0.05,
            init: LatentInit::Pool,
            seed,
        }
    }
}

/// Starting code for the latent attack.
pub fn initial_latent(vae: &Vae<f32>, pool: &FaceDataset, init: LatentInit, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        LatentInit::Pool => {
            if pool.is_empty() {
                return Err(Error::Dataset("empty pool for latent initialization".into()));
            }
            let i = rng.random_range(0..pool.len());
            Ok(vae.encode(&pool.image(i))?.0)
        }
        LatentInit::Prior => {
            let data = (0..vae.latent)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v as f32
                })
                .collect();
            Ok(Tensor::from_vec([1, vae.latent], data))
        }
    }
}

/// Gradient descent on the code only, with decoder and classifier frozen.
pub fn latent_attack(
    vae: &Vae<f32>,
    clf: &Classifier<f32>,
    pool: &FaceDataset,
    cfg: &LatentAttackConfig,
) -> Result<AttackResult> {
    clf.check_input(&[1, 1, vae.height, vae.width])?;
    if cfg.target >= clf.classes() {
        return Err(Error::Config(format!("target {} out of range", cfg.target)));
    }
    let z0 = initial_latent(vae, pool, cfg.init, cfg.seed)?;
    let dcfg = DescentConfig {
        lr: cfg.lr,
        max_iters: cfg.max_iters,
        stop_loss: cfg.stop_loss,
        backtracking: true,
    };
    let d = descend(z0, &dcfg, |z| {
        let mut g = Graph::new();
        let p = vae.params.bind(&mut g, false);
        let pc = clf.params().bind(&mut g, false);
        let zv = g.leaf(z.clone(), true);
        let x = vae.decode_graph(&mut g, &p, zv);
        let logits = clf.forward(&mut g, &pc, x);
        let loss = g.softmax_cross_entropy(logits, &[cfg.target]);
        let confidence = softmax_rows(g.value(logits)).data()[cfg.target] as f64;
        let lv = g.value(loss).item() as f64;
        let grad = g.backward(loss).take(zv).expect("latent gradient");
        Ok(Eval {
            loss: lv,
            grad,
            confidence,
        })
    })?;
    Ok(AttackResult {
        method: Method::Vae,
        target: cfg.target,
        image: vae.decode(&d.x)?,
        attacked_confidence: *d.confidence_trace.last().unwrap(),
        iterations_run: d.iterations,
        diverged: d.stop == StopReason::NonFinite,
        loss_trace: d.loss_trace,
        confidence_trace: d.confidence_trace,
        transfer_confidence: None,
        seeds: BTreeMap::from([("attack".to_string(), cfg.seed)]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Arch;
    use proptest::prelude::{prop_assert, proptest};

    fn pool() -> FaceDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for i in 0..8 {
            let phase = Rng::random::<f64>(&mut rng) * 6.0;
            for p in 0..64 {
                data.push((0.7 * ((p as f64) * 0.2 + phase + i as f64).sin()) as f32);
            }
        }
        FaceDataset::new(Tensor::from_vec([8, 1, 8, 8], data), vec![1; 8], 2).unwrap()
    }

    #[test]
    fn shapes_and_degenerate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vae = Vae::<f32>::new(8, 8, 5, (2, 3), &mut rng).unwrap();
        let (mu, ls) = vae.encode(&pool().images().clone()).unwrap();
        assert_eq!((mu.shape(), ls.shape()), (&[8, 5][..], &[8, 5][..]));
        assert!(mu.all_finite() && ls.all_finite());
        let z = reparameterize(&mu, &ls, &Tensor::zeros([8, 5]));
        assert_eq!(z, mu);
        let tiny = ls.map(|_| -200.0);
        assert_eq!(reparameterize(&mu, &tiny, &Tensor::full([8, 5], 3.0)), mu);
        assert_eq!(vae.decode(&mu).unwrap().shape(), &[8, 1, 8, 8]);
        assert!(vae.decode(&Tensor::zeros([1, 4])).is_err());
        assert!(vae.encode(&Tensor::zeros([1, 1, 4, 4])).is_err());
    }

    #[test]
    fn autoencoder_limit_and_determinism() {
        let spec = VaeSpec {
            latent: 8,
            channels: (4, 8),
            kl_weight: 0.0,
            epochs: 300,
            batch_size: 8,
            optimizer: OptimizerConfig::adam(3e-3),
        };
        let (vae, h) = train_vae(&pool(), &spec, 1).unwrap();
        let (_, h2) = train_vae(&pool(), &spec, 1).unwrap();
        assert_eq!(h, h2);
        assert!(h.last().unwrap().reconstruction < 0.1 * h[0].reconstruction, "{h:?}");
        let ck = Checkpoint::from_bytes(&vae.to_checkpoint().to_bytes()).unwrap();
        let back = Vae::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params().checksum(), vae.params().checksum());
    }

    #[test]
    fn latent_attack_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vae = Vae::<f32>::new(8, 8, 6, (2, 4), &mut rng).unwrap();
        let clf = Classifier::<f32>::new(Arch::Cnn2, 8, 8, 2, &mut rng).unwrap();
        let before = (vae.params().checksum(), clf.params().checksum());
        let mut cfg = LatentAttackConfig::new(0, 4);
        cfg.max_iters = 10;
        cfg.lr = 1.0;
        let r = latent_attack(&vae, &clf, &pool(), &cfg).unwrap();
        assert_eq!(before, (vae.params().checksum(), clf.params().checksum()));
        assert!(r.final_loss() <= r.loss_trace[0]);
        assert!(r.loss_trace.windows(2).all(|w| w[1] <= w[0]));

        cfg.max_iters = 0;
        let r0 = latent_attack(&vae, &clf, &pool(), &cfg).unwrap();
        let z0 = initial_latent(&vae, &pool(), LatentInit::Pool, 4).unwrap();
        assert_eq!(r0.image, vae.decode(&z0).unwrap());
        cfg.init = LatentInit::Prior;
        assert_eq!(latent_attack(&vae, &clf, &pool(), &cfg).unwrap().loss_trace.len(), 1);
        assert!("nope".parse::<LatentInit>().is_err());
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(mu in proptest::collection::vec(-5.0f64..5.0, 6), ls in proptest::collection::vec(-4.0f64..3.0, 6)) {
            let mut g = Graph::<f64>::new();
            let m = g.constant(Tensor::from_vec([2, 3], mu));
            let s = g.constant(Tensor::from_vec([2, 3], ls));
            let kl = g.gaussian_kl(m, s);
            prop_assert!(g.value(kl).item() >= 0.0);
        }
    }
}
