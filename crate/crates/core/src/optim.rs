//! Plain gradient descent on a single input tensor, shared by the pixel,
//! latent and noise-path attacks.

use crate::error::Result;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the loss is at or below this.
    pub stop_loss: f64,
    /// Halve the step (from `lr` each iteration) while it increases the loss.
    pub backtracking: bool,
}

/// Value, gradient and target confidence at a point.
pub struct Eval<F> {
    pub loss: f64,
    pub grad: Tensor<F>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Threshold,
    MaxIters,
    /// No step length decreased the loss, or the step vanished.
    Stalled,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct Descent<F> {
    /// Best iterate (the last one when backtracking is on).
    pub x: Tensor<F>,
    pub loss_trace: Vec<f64>,
    pub confidence_trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub evaluations: usize,
}

const MAX_HALVINGS: usize = 40;

pub fn descend<F: Float>(
    x0: Tensor<F>,
    cfg: &DescentConfig,
    mut eval: impl FnMut(&Tensor<F>) -> Result<Eval<F>>,
) -> Result<Descent<F>> {
    let mut x = x0;
    let mut cur = eval(&x)?;
    let mut evaluations = 1;
    let mut loss_trace = vec![cur.loss];
    let mut confidence_trace = vec![cur.confidence];
    let mut best = (cur.loss, x.clone());
    let mut iterations = 0;
    let finite = |e: &Eval<F>| e.loss.is_finite() && e.grad.all_finite();

    let stop = loop {
        if !finite(&cur) {
            break StopReason::NonFinite;
        }
        if cur.loss <= cfg.stop_loss {
            break StopReason::Threshold;
        }
        if iterations >= cfg.max_iters {
            break StopReason::MaxIters;
        }
        let mut step = cfg.lr;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            if step == 0.0 || cur.grad.max_abs() == F::ZERO {
                break;
            }
            let mut trial = x.clone();
            trial.axpy(F::of(-step), &cur.grad);
            if trial == x {
                break;
            }
            let e = eval(&trial)?;
            evaluations += 1;
            let ok = !cfg.backtracking || (e.loss.is_finite() && e.loss <= cur.loss);
            if ok {
                accepted = Some((trial, e));
                break;
            }
            step *= 0.5;
        }
        let Some((nx, ne)) = accepted else {
            break StopReason::Stalled;
        };
        x = nx;
        cur = ne;
        iterations += 1;
        loss_trace.push(cur.loss);
        confidence_trace.push(cur.confidence);
        if cur.loss < best.0 {
            best = (cur.loss, x.clone());
        }
    };
    let x = if cfg.backtracking { x } else { best.1 };
    Ok(Descent {
        x,
        loss_trace,
        confidence_trace,
        iterations,
        stop,
        evaluations,
    })
}

/// First iteration whose loss is within 10% of the total decrease from the
/// final value; a trace that never moved plateaus at 0.
pub fn plateau_iteration(trace: &[f64]) -> usize {
    let (Some(&first), Some(&last)) = (trace.first(), trace.last()) else {
        return 0;
    };
    let tol = 0.1 * (first - last).abs();
    trace.iter().position(|&l| l <= last + tol).unwrap_or(trace.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(x: &Tensor<f64>) -> Result<Eval<f64>> {
        Ok(Eval {
            loss: x.dot(x),
            grad: x.scale(2.0),
            confidence: 0.0,
        })
    }

    #[test]
    fn converges_on_a_quadratic() {
        let cfg = DescentConfig {
            lr: 0.25,
            max_iters: 100,
            stop_loss: 1e-10,
            backtracking: true,
        };
        let d = descend(Tensor::from_vec([2], vec![1.0, -3.0]), &cfg, quad).unwrap();
        assert_eq!(d.stop, StopReason::Threshold);
        assert!(d.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn backtracking_tames_huge_steps() {
        let cfg = DescentConfig {
            lr: 1e10,
            max_iters: 50,
            stop_loss: 1e-8,
            backtracking: true,
        };
        let d = descend(Tensor::from_vec([1], vec![2.0]), &cfg, quad).unwrap();
        assert!(d.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(d.loss_trace.last().unwrap() < &1e-6);
    }

    #[test]
    fn zero_lr_makes_no_progress() {
        let cfg = DescentConfig {
            lr: 0.0,
            max_iters: 10,
            stop_loss: 0.0,
            backtracking: true,
        };
        let x0 = Tensor::from_vec([1], vec![2.0]);
        let d = descend(x0.clone(), &cfg, quad).unwrap();
        assert_eq!(d.iterations, 0);
        assert_eq!(d.loss_trace, vec![4.0]);
        assert_eq!(d.x, x0);
        assert_eq!(d.stop, StopReason::Stalled);
    }

    #[test]
    fn without_safeguard_best_iterate_is_returned() {
        let cfg = DescentConfig {
            lr: 1.5,
            max_iters: 3,
            stop_loss: 0.0,
            backtracking: false,
        };
        let d = descend(Tensor::from_vec([1], vec![1.0]), &cfg, quad).unwrap();
        // x -> -2x each step: the loss grows
        assert_eq!(d.loss_trace, vec![1.0, 4.0, 16.0, 64.0]);
        assert_eq!(d.x.data(), &[1.0]);
    }

    #[test]
    fn plateau_detection() {
        assert_eq!(plateau_iteration(&[10.0, 5.0, 2.0, 1.1, 1.05, 1.0]), 3);
        assert_eq!(plateau_iteration(&[3.0]), 0);
        assert_eq!(plateau_iteration(&[]), 0);
    }
}
