use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
}

/// Per-step tables for steps `1..=T`, held in f64. Accessors take the
/// 1-based step index.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    interpolation: Interpolation,
) -> Result<VarianceSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let ordered = if steps == 1 {
        beta_start <= beta_end
    } else {
        beta_start < beta_end
    };
    if !(beta_start > 0.0 && beta_end < 1.0 && ordered) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = match interpolation {
        Interpolation::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(VarianceSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
        beta_start,
        beta_end,
    })
}

impl VarianceSchedule {
    /// The linear 1e-4..0.02 schedule over `steps` steps.
    pub fn linear(steps: usize) -> Result<Self> {
        build_schedule(steps, 1e-4, 0.02, Interpolation::Linear)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!((1..=self.steps()).contains(&t), "step {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.idx(t)]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::Config(format!("step {t} outside 1..={}", self.steps())))
        }
    }

    pub fn write_meta(&self, ck: &mut Checkpoint) {
        ck.meta.insert("schedule.steps".into(), self.steps().to_string());
        ck.meta
            .insert("schedule.beta_start".into(), format!("{:e}", self.beta_start));
        ck.meta
            .insert("schedule.beta_end".into(), format!("{:e}", self.beta_end));
    }

    pub fn read_meta(ck: &Checkpoint) -> Result<Self> {
        build_schedule(
            ck.meta_parse("schedule.steps")?,
            ck.meta_parse("schedule.beta_start")?,
            ck.meta_parse("schedule.beta_end")?,
            Interpolation::Linear,
        )
    }
}

/// `sqrt(alpha_bar[t]) x + sqrt(1 - alpha_bar[t]) eps`.
pub fn forward_noise<F: Float>(
    x: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    sched: &VarianceSchedule,
) -> Result<Tensor<F>> {
    sched.check_step(t)?;
    noise_with_alpha_bar(x, eps, sched.alpha_bar(t))
}

pub fn noise_with_alpha_bar<F: Float>(x: &Tensor<F>, eps: &Tensor<F>, alpha_bar: f64) -> Result<Tensor<F>> {
    if x.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs noise {:?}",
            x.shape(),
            eps.shape()
        )));
    }
    let (a, b) = (F::of(alpha_bar.sqrt()), F::of((1.0 - alpha_bar).sqrt()));
    Ok(x.zip_map(eps, |xv, ev| a * xv + b * ev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_endpoints() {
        let s = VarianceSchedule::linear(600).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(600) - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        for t in 2..=600 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let rel = (s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() / s.alpha_bar(t);
            assert!(rel <= 1e-12);
            assert_eq!(s.sigma(t), s.beta(t).sqrt());
        }
        assert!(s.alpha_bar(600) > 0.0);
    }

    #[test]
    fn rejects_bad_bounds() {
        for (t, a, b) in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 1e-4), (10, 1e-4, 1.0)] {
            assert!(build_schedule(t, a, b, Interpolation::Linear).is_err());
        }
    }

    #[test]
    fn noising_endpoints_and_scalar_case() {
        let x = Tensor::from_vec([1], vec![1.0f64]);
        let e = Tensor::from_vec([1], vec![-1.0f64]);
        assert_eq!(noise_with_alpha_bar(&x, &e, 1.0).unwrap().item(), 1.0);
        assert_eq!(noise_with_alpha_bar(&x, &e, 0.0).unwrap().item(), -1.0);
        let v = noise_with_alpha_bar(&x, &e, 0.25).unwrap().item();
        assert!((v - (0.5 - 0.75f64.sqrt())).abs() < 1e-15);
        assert!((v + 0.3660).abs() < 1e-4);
        assert!(noise_with_alpha_bar(&x, &Tensor::zeros([2]), 0.5).is_err());
    }

    proptest! {
        #[test]
        fn noising_is_linear(a in -4.0f64..4.0, t in 1usize..=600, xs in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let s = VarianceSchedule::linear(600).unwrap();
            let x = Tensor::from_vec([6], xs.clone());
            let e = Tensor::from_vec([6], xs.iter().map(|v| v * 0.7 - 0.2).collect());
            let lhs = forward_noise(&x.scale(a), t, &e.scale(a), &s).unwrap();
            let rhs = forward_noise(&x, t, &e, &s).unwrap().scale(a);
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-12);
            }
        }
    }
}
