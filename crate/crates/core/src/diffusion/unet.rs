//! Three-resolution U-Net used both as the diffusion noise predictor and as
//! the GAN generator (without step conditioning).

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv, Dense, ParamSet};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    /// Channels at full resolution; doubled at each coarser level.
    pub base: usize,
    /// Add a sinusoidal step embedding at every block.
    pub step_conditioned: bool,
    /// Squash the output with `tanh` (generator use).
    pub tanh_output: bool,
}

impl UNetConfig {
    pub fn noise_predictor(base: usize) -> Self {
        Self {
            base,
            step_conditioned: true,
            tanh_output: false,
        }
    }

    pub fn generator(base: usize) -> Self {
        Self {
            base,
            step_conditioned: false,
            tanh_output: true,
        }
    }

    pub fn embed_dim(&self) -> usize {
        4 * self.base
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        ck.meta.insert("unet.base".into(), self.base.to_string());
        ck.meta
            .insert("unet.step_conditioned".into(), self.step_conditioned.to_string());
        ck.meta.insert("unet.tanh_output".into(), self.tanh_output.to_string());
    }

    fn read_meta(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            base: ck.meta_parse("unet.base")?,
            step_conditioned: ck.meta_parse("unet.step_conditioned")?,
            tanh_output: ck.meta_parse("unet.tanh_output")?,
        })
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
    step_proj: Option<Dense>,
}

impl ResBlock {
    fn new<F: Float>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        embed: Option<usize>,
    ) -> Self {
        let conv1 = Conv::same3(ps, rng, &format!("{name}.conv1"), cin, cout);
        let step_proj = embed.map(|e| Dense::new(ps, rng, &format!("{name}.step"), e, cout, 1.0));
        let conv2 = Conv::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, 0.5);
        let skip = (cin != cout).then(|| Conv::new(ps, rng, &format!("{name}.skip"), cin, cout, 1, 1, 0, 1.0));
        Self {
            conv1,
            conv2,
            skip,
            step_proj,
        }
    }

    fn forward<F: Float>(&self, g: &mut Graph<F>, p: &[Var], x: Var, emb: Option<Var>) -> Var {
        let h = g.silu(x);
        let mut h = self.conv1.forward(g, p, h);
        if let (Some(proj), Some(e)) = (&self.step_proj, emb) {
            let s = proj.forward(g, p, e);
            h = g.add_channel_bias(h, s);
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let shortcut = match &self.skip {
            Some(c) => c.forward(g, p, x),
            None => x,
        };
        g.add(h, shortcut)
    }
}

#[derive(Debug, Clone)]
pub struct UNet<F> {
    cfg: UNetConfig,
    params: ParamSet<F>,
    input: Conv,
    embed: Option<(Dense, Dense)>,
    enc0: ResBlock,
    enc1: ResBlock,
    mid: ResBlock,
    dec1: ResBlock,
    dec0: ResBlock,
    output: Conv,
}

impl<F: Float> UNet<F> {
    pub fn new(cfg: UNetConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.base;
        assert!(w > 0, "U-Net base width must be positive");
        let mut ps = ParamSet::new();
        let e = cfg.step_conditioned.then(|| cfg.embed_dim());
        let input = Conv::same3(&mut ps, rng, "input", 1, w);
        let embed = e.map(|e| {
            (
                Dense::new(&mut ps, rng, "embed.0", e, e, 1.0),
                Dense::new(&mut ps, rng, "embed.1", e, e, 1.0),
            )
        });
        let enc0 = ResBlock::new(&mut ps, rng, "enc0", w, w, e);
        let enc1 = ResBlock::new(&mut ps, rng, "enc1", w, 2 * w, e);
        let mid = ResBlock::new(&mut ps, rng, "mid", 2 * w, 4 * w, e);
        let dec1 = ResBlock::new(&mut ps, rng, "dec1", 6 * w, 2 * w, e);
        let dec0 = ResBlock::new(&mut ps, rng, "dec0", 3 * w, w, e);
        let output = Conv::new(&mut ps, rng, "output", w, 1, 3, 1, 1, 0.1);
        Self {
            cfg,
            params: ps,
            input,
            embed,
            enc0,
            enc1,
            mid,
            dec1,
            dec0,
            output,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = UNetConfig::read_meta(ck)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Self::new(cfg, &mut rng);
        net.params.load_from(ck)?;
        Ok(net)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new().with_meta("kind", "unet");
        self.cfg.write_meta(&mut ck);
        self.params.write_into(&mut ck);
        ck
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn cast<G: Float>(&self) -> UNet<G> {
        UNet {
            cfg: self.cfg,
            params: self.params.cast(),
            input: self.input,
            embed: self.embed,
            enc0: self.enc0.clone(),
            enc1: self.enc1.clone(),
            mid: self.mid.clone(),
            dec1: self.dec1.clone(),
            dec0: self.dec0.clone(),
            output: self.output,
        }
    }

    /// Check that an image batch can pass through the two pooling levels.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 || !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "U-Net expects [n, 1, h, w] with h, w divisible by 4, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Forward pass. `steps` gives one diffusion step per batch item and is
    /// required exactly when the network is step conditioned.
    pub fn forward(&self, g: &mut Graph<F>, p: &[Var], x: Var, steps: Option<&[usize]>) -> Var {
        let emb = match (&self.embed, steps) {
            (Some((d0, d1)), Some(ts)) => {
                let e = g.constant(step_embedding(ts, self.cfg.embed_dim()));
                let e = d0.forward(g, p, e);
                let e = g.silu(e);
                let e = d1.forward(g, p, e);
                Some(g.silu(e))
            }
            (None, None) => None,
            (Some(_), None) => panic!("step-conditioned U-Net needs step indices"),
            (None, Some(_)) => panic!("unconditioned U-Net got step indices"),
        };
        let h0 = self.input.forward(g, p, x);
        let s0 = self.enc0.forward(g, p, h0, emb);
        let d = g.avgpool2(s0);
        let s1 = self.enc1.forward(g, p, d, emb);
        let d = g.avgpool2(s1);
        let m = self.mid.forward(g, p, d, emb);
        let u = g.upsample2(m);
        let u = g.concat_channels(u, s1);
        let u = self.dec1.forward(g, p, u, emb);
        let u = g.upsample2(u);
        let u = g.concat_channels(u, s0);
        let u = self.dec0.forward(g, p, u, emb);
        let u = g.silu(u);
        let out = self.output.forward(g, p, u);
        if self.cfg.tanh_output {
            g.tanh(out)
        } else {
            out
        }
    }

    /// Inference-only forward on a batch.
    pub fn predict(&self, x: &Tensor<F>, steps: Option<&[usize]>) -> Tensor<F> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv, steps);
        g.value(y).clone()
    }
}

/// Sinusoidal features of integer diffusion steps, `[n, dim]`.
pub fn step_embedding<F: Float>(steps: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = vec![F::ZERO; steps.len() * dim];
    for (i, &t) in steps.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            let a = t as f64 * freq;
            data[i * dim + j] = F::of(a.sin());
            data[i * dim + half + j] = F::of(a.cos());
        }
    }
    Tensor::from_vec([steps.len(), dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::<f32>::new(UNetConfig::noise_predictor(4), &mut rng);
        let x = Tensor::zeros([2, 1, 16, 12]);
        let y = net.predict(&x, Some(&[1, 7]));
        assert_eq!(y.shape(), x.shape());
        let gen = UNet::<f32>::new(UNetConfig::generator(4), &mut rng);
        let y = gen.predict(&x, None);
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = UNet::<f32>::new(UNetConfig::noise_predictor(2), &mut rng);
        let x = Tensor::from_vec([1, 1, 8, 8], (0..64).map(|i| (i as f32 * 0.1).sin()).collect());
        let ck = Checkpoint::from_bytes(&net.to_checkpoint().to_bytes()).unwrap();
        let back = UNet::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(net.predict(&x, Some(&[3])), back.predict(&x, Some(&[3])));
    }

    #[test]
    fn rejects_bad_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = UNet::<f32>::new(UNetConfig::noise_predictor(2), &mut rng);
        assert!(net.check_input(&[1, 1, 10, 8]).is_err());
        assert!(net.check_input(&[1, 1, 8, 8]).is_ok());
    }
}
