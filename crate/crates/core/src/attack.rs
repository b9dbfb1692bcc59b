//! Noise-path attack: hold every injected noise of the sampler fixed and
//! descend the attacked classifier's cross-entropy with respect to the
//! starting noise `x_T`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::classifier::Classifier;
use crate::diffusion::sampler::{denoise_step_graph, run_steps, NoisePath};
use crate::diffusion::{UNet, VarianceSchedule};
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph};
use crate::optim::{descend, plateau_iteration, DescentConfig, Eval, StopReason};
use crate::result::{AttackResult, Method};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// One graph over all steps.
    FullGraph,
    /// Keep only segment boundaries; rebuild each segment's graph on the
    /// way back.
    Checkpointed(usize),
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradMode::FullGraph => f.write_str("full"),
            GradMode::Checkpointed(l) => write!(f, "checkpointed:{l}"),
        }
    }
}

impl FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "full" || s == "full_graph" => Ok(GradMode::FullGraph),
            Some(("checkpointed", l)) => match l.parse() {
                Ok(l) if l > 0 => Ok(GradMode::Checkpointed(l)),
                _ => Err(Error::Config(format!("bad segment length '{l}'"))),
            },
            _ => Err(Error::Config(format!(
                "unknown gradient mode '{s}' (full, checkpointed:<len>)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathAttackConfig {
    pub target: usize,
    pub lr: f64,
    pub max_iters: usize,
    pub stop_loss: f64,
    pub grad_mode: GradMode,
    pub backtracking: bool,
    /// Also move the injected noises (off by default).
    pub optimize_noise: bool,
    pub seed: u64,
}

impl PathAttackConfig {
    pub fn new(target: usize, seed: u64) -> Self {
        Self {
            target,
            lr: 1.0,
            max_iters: 200,
            stop_loss: 0.05,
            grad_mode: GradMode::Checkpointed(25),
            backtracking: true,
            optimize_noise: false,
            seed,
        }
    }
}

/// Loss, target probability, sampled image and input gradients of one
/// evaluation.
#[derive(Debug, Clone)]
pub struct PathGradient<F> {
    pub loss: f64,
    pub confidence: f64,
    pub image: Tensor<F>,
    pub grad_x_t: Tensor<F>,
    /// `grad_z[t - 1]`, present only when requested.
    pub grad_z: Option<Vec<Tensor<F>>>,
}

fn check_setup<F: Float>(
    clf: &Classifier<F>,
    net: &UNet<F>,
    sched: &VarianceSchedule,
    path: &NoisePath<F>,
    target: usize,
) -> Result<()> {
    path.check(sched)?;
    net.check_input(path.x_t.shape())?;
    clf.check_input(path.x_t.shape())?;
    if path.x_t.shape()[0] != 1 {
        return Err(Error::Shape("the path attack works on a single image".into()));
    }
    if target >= clf.classes() {
        return Err(Error::Config(format!(
            "target {target} out of range for {} classes",
            clf.classes()
        )));
    }
    Ok(())
}

/// Classifier loss at `image` and its gradient there.
fn classifier_head<F: Float>(clf: &Classifier<F>, image: &Tensor<F>, target: usize) -> (f64, f64, Tensor<F>) {
    let mut g = Graph::new();
    let p = clf.params().bind(&mut g, false);
    let x = g.leaf(image.clone(), true);
    let logits = clf.forward(&mut g, &p, x);
    let loss = g.softmax_cross_entropy(logits, &[target]);
    let conf = softmax_rows(g.value(logits)).data()[target].to_f64();
    let lv = g.value(loss).item().to_f64();
    let grad = g.backward(loss).take(x).expect("image gradient");
    (lv, conf, grad)
}

/// Gradient of the target cross-entropy of `sample(path)` with respect to
/// `x_T` (and the injected noises when `with_z`).
pub fn gradient_of_path_loss<F: Float>(
    clf: &Classifier<F>,
    net: &UNet<F>,
    sched: &VarianceSchedule,
    path: &NoisePath<F>,
    target: usize,
    mode: GradMode,
    with_z: bool,
) -> Result<PathGradient<F>> {
    check_setup(clf, net, sched, path, target)?;
    let steps = sched.steps();
    match mode {
        GradMode::FullGraph => {
            let mut g = Graph::new();
            let p = net.params().bind(&mut g, false);
            let pc = clf.params().bind(&mut g, false);
            let x_t = g.leaf(path.x_t.clone(), true);
            let mut zs = vec![None; steps];
            let mut x = x_t;
            for t in (1..=steps).rev() {
                let z = g.leaf(path.z[t - 1].clone(), with_z);
                zs[t - 1] = Some(z);
                x = denoise_step_graph(&mut g, net, &p, x, z, t, sched);
            }
            let image = g.value(x).clone();
            let logits = clf.forward(&mut g, &pc, x);
            let loss = g.softmax_cross_entropy(logits, &[target]);
            let confidence = softmax_rows(g.value(logits)).data()[target].to_f64();
            let lv = g.value(loss).item().to_f64();
            let mut grads = g.backward(loss);
            let grad_x_t = grads.take(x_t).expect("x_T gradient");
            let grad_z = with_z.then(|| {
                zs.iter()
                    .map(|z| {
                        grads
                            .take(z.expect("every step visited"))
                            .unwrap_or_else(|| Tensor::zeros(path.x_t.shape().to_vec()))
                    })
                    .collect()
            });
            Ok(PathGradient {
                loss: lv,
                confidence,
                image,
                grad_x_t,
                grad_z,
            })
        }
        GradMode::Checkpointed(len) => {
            if len == 0 {
                return Err(Error::Config("segment length must be positive".into()));
            }
            // segments cover steps [hi, lo] from the top, the last may be short
            let mut segments = Vec::new();
            let mut hi = steps;
            while hi >= 1 {
                let lo = hi.saturating_sub(len - 1).max(1);
                segments.push((hi, lo));
                hi = lo - 1;
            }
            let mut boundaries = Vec::with_capacity(segments.len());
            let mut x = path.x_t.clone();
            for &(hi, lo) in &segments {
                boundaries.push(x.clone());
                x = run_steps(net, sched, path, x, hi, lo)?;
            }
            let (lv, confidence, mut upstream) = classifier_head(clf, &x, target);
            let image = x;
            let mut grad_z = with_z.then(|| vec![Tensor::zeros(path.x_t.shape().to_vec()); steps]);
            for (&(hi, lo), start) in segments.iter().zip(&boundaries).rev() {
                let mut g = Graph::new();
                let p = net.params().bind(&mut g, false);
                let x0 = g.leaf(start.clone(), true);
                let mut xv = x0;
                let mut zs = Vec::new();
                for t in (lo..=hi).rev() {
                    let z = g.leaf(path.z[t - 1].clone(), with_z);
                    zs.push((t, z));
                    xv = denoise_step_graph(&mut g, net, &p, xv, z, t, sched);
                }
                let mut grads = g.backward_with(xv, upstream);
                if let Some(gz) = grad_z.as_mut() {
                    for (t, z) in zs {
                        if let Some(v) = grads.take(z) {
                            gz[t - 1] = v;
                        }
                    }
                }
                upstream = grads.take(x0).expect("segment input gradient");
            }
            Ok(PathGradient {
                loss: lv,
                confidence,
                image,
                grad_x_t: upstream,
                grad_z,
            })
        }
    }
}

fn pack<F: Float>(path: &NoisePath<F>) -> Tensor<F> {
    let mut parts = vec![path.x_t.clone()];
    parts.extend(path.z.iter().cloned());
    Tensor::stack(&parts)
}

fn unpack<F: Float>(packed: &Tensor<F>, seed: u64) -> NoisePath<F> {
    let n = packed.shape()[0];
    NoisePath {
        x_t: packed.batch_item(0),
        z: (1..n).map(|i| packed.batch_item(i)).collect(),
        seed,
    }
}

/// Run the attack. Classifier and predictor weights are never modified;
/// the injected noises move only with `optimize_noise`.
pub fn attack(
    clf: &Classifier<f32>,
    net: &UNet<f32>,
    sched: &VarianceSchedule,
    path: &NoisePath<f32>,
    cfg: &PathAttackConfig,
) -> Result<AttackResult> {
    check_setup(clf, net, sched, path, cfg.target)?;
    let dcfg = DescentConfig {
        lr: cfg.lr,
        max_iters: cfg.max_iters,
        stop_loss: cfg.stop_loss,
        backtracking: cfg.backtracking,
    };
    let mut last: Option<(Tensor<f32>, Tensor<f32>)> = None;
    let start = if cfg.optimize_noise {
        pack(path)
    } else {
        path.x_t.clone()
    };
    let d = descend(start, &dcfg, |x| {
        let trial = if cfg.optimize_noise {
            unpack(x, path.seed)
        } else {
            NoisePath {
                x_t: x.clone(),
                z: path.z.clone(),
                seed: path.seed,
            }
        };
        let r = gradient_of_path_loss(clf, net, sched, &trial, cfg.target, cfg.grad_mode, cfg.optimize_noise)?;
        let grad = match r.grad_z {
            Some(gz) => {
                let mut parts = vec![r.grad_x_t];
                parts.extend(gz);
                Tensor::stack(&parts)
            }
            None => r.grad_x_t,
        };
        last = Some((x.clone(), r.image));
        Ok(Eval {
            loss: r.loss,
            grad,
            confidence: r.confidence,
        })
    })?;
    let image = match last {
        Some((x, img)) if x == d.x => img,
        _ => {
            let final_path = if cfg.optimize_noise {
                unpack(&d.x, path.seed)
            } else {
                NoisePath {
                    x_t: d.x.clone(),
                    z: path.z.clone(),
                    seed: path.seed,
                }
            };
            crate::diffusion::sample(net, sched, &final_path)?
        }
    };
    Ok(AttackResult {
        method: Method::Diffusion,
        target: cfg.target,
        image,
        attacked_confidence: *d.confidence_trace.last().unwrap(),
        iterations_run: d.iterations,
        diverged: d.stop == StopReason::NonFinite,
        loss_trace: d.loss_trace,
        confidence_trace: d.confidence_trace,
        transfer_confidence: None,
        seeds: BTreeMap::from([("attack".to_string(), cfg.seed), ("path".to_string(), path.seed)]),
    })
}

#[derive(Debug, Clone)]
pub struct LrStudyRow {
    pub lr: f64,
    pub converged: bool,
    pub iterations_to_plateau: usize,
    pub iterations_run: usize,
    pub final_loss: f64,
    pub image_checksum: String,
    pub result: AttackResult,
}

/// A trace has plateaued when it is finite and its last quarter (at least
/// two iterations) recovers at most 5% of the total decrease, or when the
/// run stopped on the threshold or stalled.
pub fn has_plateaued(trace: &[f64], stopped_early: bool) -> bool {
    if trace.iter().any(|v| !v.is_finite()) {
        return false;
    }
    if stopped_early || trace.len() < 2 {
        return true;
    }
    let total = trace[0] - trace[trace.len() - 1];
    let w = (trace.len() / 4).max(2).min(trace.len() - 1);
    let recent = trace[trace.len() - 1 - w] - trace[trace.len() - 1];
    recent <= 0.05 * total.abs()
}

/// Run [`attack`] once per learning rate on the same path.
pub fn lr_study(
    clf: &Classifier<f32>,
    net: &UNet<f32>,
    sched: &VarianceSchedule,
    path: &NoisePath<f32>,
    base: &PathAttackConfig,
    lrs: &[f64],
) -> Result<Vec<LrStudyRow>> {
    let mut rows = Vec::new();
    for &lr in lrs {
        let cfg = PathAttackConfig { lr, ..*base };
        let r = attack(clf, net, sched, path, &cfg)?;
        let stopped_early = r.iterations_run < cfg.max_iters;
        rows.push(LrStudyRow {
            lr,
            converged: !r.diverged && has_plateaued(&r.loss_trace, stopped_early),
            iterations_to_plateau: plateau_iteration(&r.loss_trace),
            iterations_run: r.iterations_run,
            final_loss: r.final_loss(),
            image_checksum: r.image.checksum(),
            result: r,
        });
    }
    Ok(rows)
}

pub fn lr_study_csv(rows: &[LrStudyRow]) -> String {
    let mut s = String::from("lr,converged,iterations_to_plateau,iterations_run,final_loss,image_checksum\n");
    for r in rows {
        s.push_str(&format!(
            "{:e},{},{},{},{:e},{}\n",
            r.lr, r.converged, r.iterations_to_plateau, r.iterations_run, r.final_loss, r.image_checksum
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Arch;
    use crate::diffusion::UNetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Classifier<f64>, UNet<f64>, VarianceSchedule, NoisePath<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clf = Classifier::new(Arch::Cnn2, 8, 8, 3, &mut rng).unwrap();
        let net = UNet::new(UNetConfig::noise_predictor(2), &mut rng);
        let sched = VarianceSchedule::linear(4).unwrap();
        let path = NoisePath::from_seed(2, 4, &[1, 1, 8, 8], false);
        (clf, net, sched, path)
    }

    #[test]
    fn checkpointed_matches_full_graph() {
        let (clf, net, sched, path) = tiny();
        let full = gradient_of_path_loss(&clf, &net, &sched, &path, 1, GradMode::FullGraph, true).unwrap();
        for len in [1, 2, 3, 4, 9] {
            let ck = gradient_of_path_loss(&clf, &net, &sched, &path, 1, GradMode::Checkpointed(len), true).unwrap();
            assert_eq!(ck.loss, full.loss);
            let d = ck.grad_x_t.sub(&full.grad_x_t).max_abs();
            assert!(d <= 1e-12 * full.grad_x_t.max_abs(), "len {len}: {d}");
            for (a, b) in ck.grad_z.as_ref().unwrap().iter().zip(full.grad_z.as_ref().unwrap()) {
                assert!(a.sub(b).max_abs() <= 1e-12 * b.max_abs().max(1e-30));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (clf, net, sched, path) = tiny();
        let r = gradient_of_path_loss(&clf, &net, &sched, &path, 2, GradMode::Checkpointed(3), true).unwrap();
        let loss_at = |p: &NoisePath<f64>| {
            let img = crate::diffusion::sample(&net, &sched, p).unwrap();
            clf.ce_and_grad(&img, 2).unwrap().0
        };
        let h = 1e-6;
        for i in [0, 9, 27, 63] {
            let mut up = path.clone();
            let mut dn = path.clone();
            up.x_t.data_mut()[i] += h;
            dn.x_t.data_mut()[i] -= h;
            let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
            let an = r.grad_x_t.data()[i];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "x_T[{i}]: {fd} vs {an}");

            let mut up = path.clone();
            let mut dn = path.clone();
            up.z[1].data_mut()[i] += h;
            dn.z[1].data_mut()[i] -= h;
            let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
            let an = r.grad_z.as_ref().unwrap()[1].data()[i];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "z_2[{i}]: {fd} vs {an}");
        }
    }

    #[test]
    fn zero_head_gives_zero_gradient() {
        let (mut clf, net, sched, path) = tiny();
        let n = clf.params().len();
        // the last dense layer's weight and bias
        for i in [n - 2, n - 1] {
            clf.params_mut().get_mut(i).data_mut().fill(0.0);
        }
        let r = gradient_of_path_loss(&clf, &net, &sched, &path, 0, GradMode::Checkpointed(2), false).unwrap();
        assert_eq!(r.grad_x_t.max_abs(), 0.0);
        assert!((r.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attack_leaves_networks_and_noise_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clf = Classifier::<f32>::new(Arch::Cnn2, 8, 8, 3, &mut rng).unwrap();
        let net = UNet::<f32>::new(UNetConfig::noise_predictor(2), &mut rng);
        let sched = VarianceSchedule::linear(6).unwrap();
        let path = NoisePath::<f32>::from_seed(9, 6, &[1, 1, 8, 8], true);
        let before = (clf.params().checksum(), net.params().checksum(), path.clone());
        let mut cfg = PathAttackConfig::new(2, 0);
        cfg.max_iters = 5;
        cfg.grad_mode = GradMode::Checkpointed(4);
        let r = attack(&clf, &net, &sched, &path, &cfg).unwrap();
        assert_eq!(before, (clf.params().checksum(), net.params().checksum(), path.clone()));
        assert!(r.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        let again = attack(&clf, &net, &sched, &path, &cfg).unwrap();
        assert_eq!(again.loss_trace, r.loss_trace);
        assert_eq!(again.image, r.image);

        cfg.max_iters = 0;
        let r0 = attack(&clf, &net, &sched, &path, &cfg).unwrap();
        assert_eq!(r0.image, crate::diffusion::sample(&net, &sched, &path).unwrap());

        cfg.max_iters = 3;
        cfg.optimize_noise = true;
        let rz = attack(&clf, &net, &sched, &path, &cfg).unwrap();
        assert!(rz.final_loss() <= rz.loss_trace[0]);
    }

    #[test]
    fn zero_lr_study_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clf = Classifier::<f32>::new(Arch::Cnn2, 8, 8, 3, &mut rng).unwrap();
        let net = UNet::<f32>::new(UNetConfig::noise_predictor(2), &mut rng);
        let sched = VarianceSchedule::linear(3).unwrap();
        let path = NoisePath::<f32>::from_seed(1, 3, &[1, 1, 8, 8], true);
        let mut cfg = PathAttackConfig::new(0, 0);
        cfg.max_iters = 4;
        let rows = lr_study(&clf, &net, &sched, &path, &cfg, &[0.0, 1.0]).unwrap();
        assert_eq!(rows[0].iterations_run, 0);
        assert_eq!(rows[0].final_loss, rows[0].result.loss_trace[0]);
        assert!(lr_study_csv(&rows).lines().count() == 3);
    }

    #[test]
    fn plateau_rule() {
        assert!(has_plateaued(&[5.0, 2.0, 1.4, 1.31, 1.3, 1.3, 1.3, 1.3], false));
        assert!(!has_plateaued(&[5.0, 4.0, 3.0, 2.0, 1.0], false));
        assert!(!has_plateaued(&[5.0, f64::NAN], true));
        assert!(has_plateaued(&[5.0, 4.0], true));
    }

    #[test]
    fn grad_mode_parsing() {
        assert_eq!(
            "checkpointed:25".parse::<GradMode>().unwrap(),
            GradMode::Checkpointed(25)
        );
        assert_eq!("full".parse::<GradMode>().unwrap(), GradMode::FullGraph);
        assert!("checkpointed:0".parse::<GradMode>().is_err());
    }
}
