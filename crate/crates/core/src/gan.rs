//! Conditional-GAN reconstruction: a U-Net generator is trained so its
//! samples both pass a discriminator fitted to the visible pool and score
//! high on the attacked classifier's target class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::classifier::{Arch, Classifier};
use crate::data::FaceDataset;
use crate::diffusion::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::nn::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::result::{AttackResult, Method};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanAttackConfig {
    pub target: usize,
    /// Weight of the discriminator term.
    pub alpha: f64,
    pub rounds: usize,
    /// Discriminator updates per round, cycling over the round's set.
    pub d_steps: usize,
    /// Generator updates per round, each on fresh noise.
    pub g_steps: usize,
    pub fake_batch: usize,
    pub real_batch: usize,
    /// Minibatch size of every update.
    pub minibatch: usize,
    pub generator_base: usize,
    pub g_optimizer: OptimizerConfig,
    pub d_optimizer: OptimizerConfig,
    /// Start every round with a fresh discriminator instead of fine-tuning.
    pub reinit_discriminator: bool,
    pub seed: u64,
}

impl GanAttackConfig {
    pub fn new(target: usize, seed: u64) -> Self {
        let adam = OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            ..OptimizerConfig::adam(2e-4)
        };
        Self {
            target,
            alpha: 1.0,
            rounds: 50,
            d_steps: 8,
            g_steps: 8,
            fake_batch: 200,
            real_batch: 200,
            minibatch: 25,
            generator_base: 8,
            g_optimizer: adam,
            d_optimizer: adam,
            reinit_discriminator: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.fake_batch == 0 || self.real_batch == 0 || self.minibatch == 0 || self.generator_base == 0 {
            return Err(Error::Config("GAN batch sizes and widths must be positive".into()));
        }
        Ok(())
    }
}

/// Images with binary labels, 1 for real (visible pool) and 0 for generated.
#[derive(Debug, Clone)]
pub struct DiscriminatorBatch {
    pub images: Tensor<f32>,
    pub labels: Vec<f32>,
}

impl DiscriminatorBatch {
    pub fn assemble(reals: Tensor<f32>, fakes: Tensor<f32>) -> Self {
        let mut labels = vec![1.0; reals.shape()[0]];
        labels.extend(vec![0.0; fakes.shape()[0]]);
        Self {
            images: Tensor::stack(&[reals, fakes]),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count_real(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1.0).count()
    }
}

/// The two terms of the generator objective and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLoss {
    /// Mean cross-entropy of the classifier to the target.
    pub classifier_term: f64,
    /// Mean cross-entropy of the discriminator to the real label.
    pub discriminator_term: f64,
    pub total: f64,
}

/// Discriminator: the cnn2 recipe with a single logit.
pub fn new_discriminator<F: Float>(height: usize, width: usize, rng: &mut impl rand::Rng) -> Result<Classifier<F>> {
    Classifier::new(Arch::Cnn2, height, width, 1, rng)
}

fn check_disc<F: Float>(disc: &Classifier<F>) -> Result<()> {
    if disc.classes() != 1 {
        return Err(Error::Shape(format!(
            "discriminator must have one logit, has {}",
            disc.classes()
        )));
    }
    Ok(())
}

fn loss_graph<F: Float>(
    g: &mut Graph<F>,
    clf: &Classifier<F>,
    disc: &Classifier<F>,
    x: Var,
    target: usize,
    alpha: f64,
) -> (Var, Var, Var) {
    let n = g.value(x).shape()[0];
    let pc = clf.params().bind(g, false);
    let pd = disc.params().bind(g, false);
    let logits = clf.forward(g, &pc, x);
    let ce = g.softmax_cross_entropy(logits, &vec![target; n]);
    let d = disc.forward(g, &pd, x);
    let adv = g.bce_with_logits(d, &vec![F::ONE; n]);
    let weighted = g.scale(adv, F::of(alpha));
    let total = g.add(ce, weighted);
    (ce, adv, total)
}

/// Evaluate the generator objective on an already generated batch.
pub fn generator_loss<F: Float>(
    clf: &Classifier<F>,
    disc: &Classifier<F>,
    images: &Tensor<F>,
    target: usize,
    alpha: f64,
) -> Result<GeneratorLoss> {
    clf.check_input(images.shape())?;
    disc.check_input(images.shape())?;
    check_disc(disc)?;
    if target >= clf.classes() {
        return Err(Error::Config(format!("target {target} out of range")));
    }
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let (ce, adv, total) = loss_graph(&mut g, clf, disc, x, target, alpha);
    Ok(GeneratorLoss {
        classifier_term: g.value(ce).item().to_f64(),
        discriminator_term: g.value(adv).item().to_f64(),
        total: g.value(total).item().to_f64(),
    })
}

/// Fraction of the batch classified correctly at probability 0.5.
pub fn discriminator_accuracy<F: Float>(disc: &Classifier<F>, batch: &DiscriminatorBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty discriminator batch".into()));
    }
    check_disc(disc)?;
    let logits = disc.logits(&batch.images.cast())?;
    let correct = logits
        .data()
        .iter()
        .zip(&batch.labels)
        .filter(|(&z, &l)| (sigmoid(z.to_f64()) >= 0.5) == (l == 1.0))
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

fn gaussian_images(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f32> {
    let data = (0..n * h * w)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    Tensor::from_vec([n, 1, h, w], data)
}

fn generate(gen: &UNet<f32>, noise: &Tensor<f32>) -> Tensor<f32> {
    let n = noise.shape()[0];
    let parts: Vec<_> = (0..n)
        .step_by(50)
        .map(|s| {
            let idx: Vec<usize> = (s..(s + 50).min(n)).collect();
            gen.predict(&noise.select(&idx), None)
        })
        .collect();
    Tensor::stack(&parts)
}

/// A finished GAN attack: the result plus the trained networks and the
/// per-round diagnostics.
#[derive(Debug, Clone)]
pub struct GanAttack {
    pub result: AttackResult,
    pub generator: UNet<f32>,
    pub discriminator: Classifier<f32>,
    /// Discriminator accuracy on each round's set after its update.
    pub d_accuracy: Vec<f64>,
    pub d_set_sizes: Vec<usize>,
}

/// Relative improvement of the last `window` rounds below `tol`.
pub fn gan_plateaued(trace: &[f64], window: usize, tol: f64) -> bool {
    if trace.len() <= window {
        return false;
    }
    let old = trace[trace.len() - 1 - window];
    let new = trace[trace.len() - 1];
    (old - new) / old.abs().max(f64::MIN_POSITIVE) < tol
}

/// Train a generator for one target against a frozen classifier. The
/// result image is the generated sample with the highest attacked
/// confidence out of `fake_batch`.
pub fn train_attack_gan(clf: &Classifier<f32>, pool: &FaceDataset, cfg: &GanAttackConfig) -> Result<GanAttack> {
    cfg.validate()?;
    clf.check_input(pool.images().shape())?;
    if cfg.target >= clf.classes() {
        return Err(Error::Config(format!("target {} out of range", cfg.target)));
    }
    if pool.labels().contains(&cfg.target) {
        return Err(Error::Config(format!(
            "visible pool contains images of target class {}",
            cfg.target
        )));
    }
    if pool.len() < cfg.real_batch {
        return Err(Error::Dataset(format!(
            "visible pool has {} images, {} real images requested per round",
            pool.len(),
            cfg.real_batch
        )));
    }
    let (h, w) = (pool.height(), pool.width());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = UNet::<f32>::new(UNetConfig::generator(cfg.generator_base), &mut rng);
    gen.check_input(&[1, 1, h, w])?;
    let mut disc = new_discriminator::<f32>(h, w, &mut rng)?;
    let mut g_opt = Optimizer::new(cfg.g_optimizer, gen.params());
    let mut d_opt = Optimizer::new(cfg.d_optimizer, disc.params());
    let mut loss_trace = Vec::new();
    let mut confidence_trace = Vec::new();
    let mut d_accuracy = Vec::new();
    let mut d_set_sizes = Vec::new();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let diverged = |what: &str, step: usize, trace: &[f64]| Error::Diverged {
        what: what.into(),
        step,
        trace: trace.to_vec(),
    };

    for round in 0..cfg.rounds {
        let mut rrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9a40_0000_0000 + round as u64));
        // (1) a fresh discriminator set
        let fakes = generate(&gen, &gaussian_images(&mut rrng, cfg.fake_batch, h, w));
        order.shuffle(&mut rrng);
        let reals = pool.images().select(&order[..cfg.real_batch]);
        let set = DiscriminatorBatch::assemble(reals, fakes);
        d_set_sizes.push(set.len());

        // (2) discriminator
        if cfg.reinit_discriminator && round > 0 {
            disc = new_discriminator(h, w, &mut rrng)?;
            d_opt = Optimizer::new(cfg.d_optimizer, disc.params());
        }
        let mut perm: Vec<usize> = (0..set.len()).collect();
        perm.shuffle(&mut rrng);
        let mut cursor = 0;
        for _ in 0..cfg.d_steps {
            if cursor + cfg.minibatch > perm.len() {
                perm.shuffle(&mut rrng);
                cursor = 0;
            }
            let idx = &perm[cursor..(cursor + cfg.minibatch).min(perm.len())];
            cursor += cfg.minibatch;
            let mut g = Graph::new();
            let p = disc.params().bind(&mut g, true);
            let x = g.constant(set.images.select(idx));
            let labels: Vec<f32> = idx.iter().map(|&i| set.labels[i]).collect();
            let logit = disc.forward(&mut g, &p, x);
            let loss = g.bce_with_logits(logit, &labels);
            if !g.value(loss).item().is_finite() {
                return Err(diverged("discriminator training", round, &loss_trace));
            }
            let mut grads = g.backward(loss);
            let grads = disc.params().collect_grads(&mut grads, &p);
            d_opt.step(disc.params_mut(), &grads);
        }
        d_accuracy.push(discriminator_accuracy(&disc, &set)?);

        // (3) generator against frozen C and D
        let mut sum = 0.0;
        let mut conf = 0.0;
        for _ in 0..cfg.g_steps {
            let noise = gaussian_images(&mut rrng, cfg.minibatch, h, w);
            let mut g = Graph::new();
            let p = gen.params().bind(&mut g, true);
            let n = g.constant(noise);
            let x = gen.forward(&mut g, &p, n, None);
            let (ce, _, total) = loss_graph(&mut g, clf, &disc, x, cfg.target, cfg.alpha);
            let lv = g.value(total).item() as f64;
            if !lv.is_finite() {
                loss_trace.push(lv);
                return Err(diverged("generator training", round, &loss_trace));
            }
            sum += lv;
            conf += (-(g.value(ce).item() as f64)).exp();
            let mut grads = g.backward(total);
            let grads = gen.params().collect_grads(&mut grads, &p);
            g_opt.step(gen.params_mut(), &grads);
        }
        let steps = cfg.g_steps.max(1) as f64;
        loss_trace.push(sum / steps);
        // exp(-CE) per update, averaged over the round
        confidence_trace.push(conf / steps);
        log::debug!(
            "gan round {round}: G loss {:.4}, D accuracy {:.3}",
            sum / steps,
            d_accuracy.last().unwrap()
        );
        if gan_plateaued(&loss_trace, 5, 1e-3) {
            break;
        }
    }

    // best of a final batch
    let mut frng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1a1);
    let samples = generate(&gen, &gaussian_images(&mut frng, cfg.fake_batch, h, w));
    let probs = clf.predict_probs(&samples)?;
    let c = clf.classes();
    let (best, best_conf) = (0..cfg.fake_batch)
        .map(|i| (i, probs.data()[i * c + cfg.target] as f64))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let rounds = loss_trace.len();
    Ok(GanAttack {
        result: AttackResult {
            method: Method::Gan,
            target: cfg.target,
            image: samples.batch_item(best),
            loss_trace,
            confidence_trace,
            iterations_run: rounds,
            attacked_confidence: best_conf,
            transfer_confidence: None,
            seeds: BTreeMap::from([("attack".to_string(), cfg.seed)]),
            diverged: false,
        },
        generator: gen,
        discriminator: disc,
        d_accuracy,
        d_set_sizes,
    })
}
