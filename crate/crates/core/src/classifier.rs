//! The two victim classifiers and the pixel-space baseline attack.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::data::FaceDataset;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::nn::{Conv, Dense, Optimizer, OptimizerConfig, ParamSet};
use crate::optim::{descend, DescentConfig, Eval};
use crate::result::{AttackResult, Method};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Cnn2,
    /// VGG11 column with first-block width `width` (64 is the original).
    Vgg11 {
        width: usize,
    },
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::Cnn2 => "cnn2",
            Arch::Vgg11 { .. } => "vgg11",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Cnn2 => f.write_str("cnn2"),
            Arch::Vgg11 { width } => write!(f, "vgg11:{width}"),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    /// `cnn2`, `vgg11` (width 64) or `vgg11:<width>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "cnn2" => Ok(Arch::Cnn2),
            None if s == "vgg11" => Ok(Arch::Vgg11 { width: 64 }),
            Some(("vgg11", w)) => match w.parse() {
                Ok(width) if width > 0 => Ok(Arch::Vgg11 { width }),
                _ => Err(Error::Config(format!("bad vgg11 width '{w}'"))),
            },
            _ => Err(Error::Config(format!(
                "unknown architecture '{s}' (cnn2, vgg11, vgg11:<width>)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierSpec {
    pub arch: Arch,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Upper bound on epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// vgg11 only: stop once train top-1 reaches this.
    pub saturation: f64,
}

impl ClassifierSpec {
    pub fn cnn2(height: usize, width: usize, classes: usize) -> Self {
        Self {
            arch: Arch::Cnn2,
            height,
            width,
            classes,
            epochs: 30,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(1e-3),
            saturation: 0.99,
        }
    }

    pub fn vgg11(width_mult: usize, height: usize, width: usize, classes: usize) -> Self {
        Self {
            arch: Arch::Vgg11 { width: width_mult },
            epochs: 150,
            optimizer: OptimizerConfig::adam(3e-4),
            ..Self::cnn2(height, width, classes)
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv),
    Pool,
}

/// Network weights plus the layer recipe they belong to.
#[derive(Debug, Clone)]
pub struct Classifier<F> {
    arch: Arch,
    height: usize,
    width: usize,
    classes: usize,
    params: ParamSet<F>,
    features: Vec<Layer>,
    head: Vec<Dense>,
}

const VGG11_COLUMN: [Option<usize>; 13] = [
    Some(1),
    None,
    Some(2),
    None,
    Some(4),
    Some(4),
    None,
    Some(8),
    Some(8),
    None,
    Some(8),
    Some(8),
    None,
];

impl<F: Float> Classifier<F> {
    pub fn new(arch: Arch, height: usize, width: usize, classes: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let pools = match arch {
            Arch::Cnn2 => 2,
            Arch::Vgg11 { .. } => 5,
        };
        let div = 1 << pools;
        if !height.is_multiple_of(div) || !width.is_multiple_of(div) || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "{arch} needs image sides divisible by {div}, got {height}x{width}"
            )));
        }
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut ps = ParamSet::new();
        let mut features = Vec::new();
        let mut head = Vec::new();
        let cells = (height / div) * (width / div);
        match arch {
            Arch::Cnn2 => {
                features.push(Layer::Conv(Conv::same3(&mut ps, rng, "conv1", 1, 32)));
                features.push(Layer::Pool);
                features.push(Layer::Conv(Conv::same3(&mut ps, rng, "conv2", 32, 64)));
                features.push(Layer::Pool);
                head.push(Dense::new(&mut ps, rng, "fc", 64 * cells, classes, 1.0));
            }
            Arch::Vgg11 { width: w } => {
                let mut cin = 1;
                let mut i = 0;
                for entry in VGG11_COLUMN {
                    match entry {
                        Some(m) => {
                            let name = format!("features.{i}");
                            features.push(Layer::Conv(Conv::same3(&mut ps, rng, &name, cin, m * w)));
                            cin = m * w;
                            i += 1;
                        }
                        None => features.push(Layer::Pool),
                    }
                }
                let hidden = 8 * w;
                head.push(Dense::new(&mut ps, rng, "fc1", cin * cells, hidden, 1.0));
                head.push(Dense::new(&mut ps, rng, "fc2", hidden, hidden, 1.0));
                head.push(Dense::new(&mut ps, rng, "fc3", hidden, classes, 1.0));
            }
        }
        Ok(Self {
            arch,
            height,
            width,
            classes,
            params: ps,
            features,
            head,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
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

    pub fn cast<G: Float>(&self) -> Classifier<G> {
        Classifier {
            arch: self.arch,
            height: self.height,
            width: self.width,
            classes: self.classes,
            params: self.params.cast(),
            features: self.features.clone(),
            head: self.head.clone(),
        }
    }

    /// Logits `[n, classes]` for images `[n, 1, h, w]`.
    pub fn forward(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Var {
        let mut h = x;
        for layer in &self.features {
            h = match layer {
                Layer::Conv(c) => {
                    let y = c.forward(g, p, h);
                    g.relu(y)
                }
                Layer::Pool => g.maxpool2(h),
            };
        }
        h = g.flatten(h);
        let last = self.head.len() - 1;
        for (i, d) in self.head.iter().enumerate() {
            h = d.forward(g, p, h);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.height || shape[3] != self.width {
            return Err(Error::Shape(format!(
                "classifier expects [n, 1, {}, {}], got {shape:?}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Logits for a batch, evaluated in chunks.
    pub fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x.shape())?;
        let n = x.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let xv = g.constant(x.select(&idx));
            let y = self.forward(&mut g, &p, xv);
            parts.push(g.value(y).clone());
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros([0, self.classes]));
        }
        Ok(Tensor::stack(&parts))
    }

    /// Softmax probabilities `[n, classes]`.
    pub fn predict_probs(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Probability of `target` for a single image `[1, 1, h, w]`.
    pub fn confidence(&self, image: &Tensor<F>, target: usize) -> Result<f64> {
        let p = self.predict_probs(image)?;
        Ok(p.data()[target].to_f64())
    }

    /// Mean cross-entropy to `target` over `x`, its gradient with respect to
    /// `x`, and the mean target probability.
    pub fn ce_and_grad(&self, x: &Tensor<F>, target: usize) -> Result<(f64, Tensor<F>, f64)> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.leaf(x.clone(), true);
        let logits = self.forward(&mut g, &p, xv);
        let n = x.shape()[0];
        let loss = g.softmax_cross_entropy(logits, &vec![target; n]);
        let probs = softmax_rows(g.value(logits));
        let c = self.classes;
        let conf = (0..n).map(|i| probs.data()[i * c + target].to_f64()).sum::<f64>() / n as f64;
        let mut grads = g.backward(loss);
        let grad = grads.take(xv).expect("input gradient");
        Ok((g.value(loss).item().to_f64(), grad, conf))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new()
            .with_meta("kind", "classifier")
            .with_meta("arch", self.arch)
            .with_meta("height", self.height)
            .with_meta("width", self.width)
            .with_meta("classes", self.classes);
        self.params.write_into(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("classifier") {
            return Err(Error::Checkpoint("not a classifier checkpoint".into()));
        }
        let arch: Arch = ck
            .meta_parse::<String>("arch")?
            .parse()
            .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Self::new(
            arch,
            ck.meta_parse("height")?,
            ck.meta_parse("width")?,
            ck.meta_parse("classes")?,
            &mut rng,
        )?;
        net.params.load_from(ck)?;
        Ok(net)
    }
}

/// Argmax with ties going to the lowest class id.
pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn top1_accuracy<F: Float>(clf: &Classifier<F>, ds: &FaceDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Dataset("accuracy of an empty dataset".into()));
    }
    let logits = clf.logits(&ds.images().cast())?;
    let c = clf.classes();
    let hits = ds
        .labels()
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&logits.data()[i * c..(i + 1) * c]) == l)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean mini-batch loss during the epoch (NaN for epoch 0).
    pub loss: f64,
    pub train_top1: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    /// Entry 0 is the initialization.
    pub epochs: Vec<EpochMetrics>,
    /// Epoch of the returned weights.
    pub selected_epoch: usize,
}

impl TrainMetrics {
    pub fn selected(&self) -> &EpochMetrics {
        &self.epochs[self.selected_epoch]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_top1,val_top1\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                e.epoch, e.loss, e.train_top1, e.val_top1
            ));
        }
        s
    }
}

/// Train from seed. cnn2 returns the best-validation epoch (earliest on
/// ties); vgg11 trains until train top-1 reaches `spec.saturation` and
/// returns that final state.
pub fn train_classifier(
    spec: &ClassifierSpec,
    train: &FaceDataset,
    val: &FaceDataset,
    seed: u64,
) -> Result<(Classifier<f32>, TrainMetrics)> {
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    if train.classes() != spec.classes {
        return Err(Error::Config(format!(
            "spec has {} classes, dataset {}",
            spec.classes,
            train.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Classifier::<f32>::new(spec.arch, spec.height, spec.width, spec.classes, &mut rng)?;
    net.check_input(train.images().shape())?;
    let mut opt = Optimizer::new(spec.optimizer, &net.params);
    let measure = |net: &Classifier<f32>, epoch: usize, loss: f64| -> Result<EpochMetrics> {
        Ok(EpochMetrics {
            epoch,
            loss,
            train_top1: top1_accuracy(net, train)?,
            val_top1: if val.is_empty() {
                f64::NAN
            } else {
                top1_accuracy(net, val)?
            },
        })
    };
    let mut epochs = vec![measure(&net, 0, f64::NAN)?];
    let mut best = (epochs[0].val_top1, 0, net.params.clone());
    let saturating = matches!(spec.arch, Arch::Vgg11 { .. });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::new();

    for epoch in 1..=spec.epochs {
        if saturating && epochs.last().unwrap().train_top1 >= spec.saturation {
            break;
        }
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(spec.batch_size.max(1)) {
            let mut g = Graph::new();
            let p = net.params.bind(&mut g, true);
            let xv = g.constant(train.images().select(chunk));
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let logits = net.forward(&mut g, &p, xv);
            let loss = g.softmax_cross_entropy(logits, &labels);
            let lv = g.value(loss).item() as f64;
            trace.push(lv);
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    what: format!("{} training", spec.arch.tag()),
                    step: trace.len(),
                    trace,
                });
            }
            let mut grads = g.backward(loss);
            let grads = net.params.collect_grads(&mut grads, &p);
            opt.step(&mut net.params, &grads);
            sum += lv;
            batches += 1;
        }
        let m = measure(&net, epoch, sum / batches as f64)?;
        log::debug!(
            "{} epoch {epoch}: loss {:.4} train {:.3} val {:.3}",
            spec.arch,
            m.loss,
            m.train_top1,
            m.val_top1
        );
        if !saturating && m.val_top1 > best.0 {
            best = (m.val_top1, epoch, net.params.clone());
        }
        epochs.push(m);
    }

    let selected_epoch = if saturating {
        epochs.len() - 1
    } else {
        net.params = best.2;
        best.1
    };
    Ok((net, TrainMetrics { epochs, selected_epoch }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelAttackConfig {
    pub target: usize,
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once cross-entropy is at or below this.
    pub stop_loss: f64,
    /// Standard deviation of the Gaussian starting image.
    pub init_std: f64,
    pub seed: u64,
}

impl PixelAttackConfig {
    pub fn new(target: usize, seed: u64) -> Self {
        Self {
            target,
            lr: 0.1,
            max_iters: 1000,
            stop_loss: 0.005,
            init_std: 0.5,
            seed,
        }
    }
}

/// Gradient descent on raw pixels from Gaussian noise towards `target`.
pub fn pixel_space_attack(clf: &Classifier<f32>, cfg: &PixelAttackConfig) -> Result<AttackResult> {
    if cfg.target >= clf.classes() {
        return Err(Error::Config(format!(
            "target {} out of range for {} classes",
            cfg.target,
            clf.classes()
        )));
    }
    let (h, w) = clf.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x0: Vec<f32> = (0..h * w)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * cfg.init_std) as f32
        })
        .collect();
    let x0 = Tensor::from_vec([1, 1, h, w], x0);
    let dcfg = DescentConfig {
        lr: cfg.lr,
        max_iters: cfg.max_iters,
        stop_loss: cfg.stop_loss,
        backtracking: true,
    };
    let d = descend(x0, &dcfg, |x| {
        let (loss, grad, confidence) = clf.ce_and_grad(x, cfg.target)?;
        Ok(Eval { loss, grad, confidence })
    })?;
    Ok(AttackResult {
        method: Method::Pixel,
        target: cfg.target,
        attacked_confidence: *d.confidence_trace.last().unwrap(),
        image: d.x,
        iterations_run: d.iterations,
        diverged: d.stop == crate::optim::StopReason::NonFinite,
        loss_trace: d.loss_trace,
        confidence_trace: d.confidence_trace,
        transfer_confidence: None,
        seeds: BTreeMap::from([("attack".to_string(), cfg.seed)]),
    })
}
