//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::{GradMode, PathAttackConfig};
use crate::classifier::{Arch, ClassifierSpec, PixelAttackConfig};
use crate::data::DatasetLayout;
use crate::diffusion::{DiffusionTrainConfig, VarianceSchedule};
use crate::error::{Error, Result};
use crate::gan::GanAttackConfig;
use crate::nn::{OptimizerConfig, OptimizerKind};
use crate::result::Method;
use crate::vae::{LatentAttackConfig, LatentInit, VaeSpec};

/// Every accepted key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "synthetic"),
    ("data.classes", "40"),
    ("data.per_class", "10"),
    ("data.height", "64"),
    ("data.width", "64"),
    ("seed", "0"),
    ("scenario.seed", "auto"),
    ("run_id", "auto"),
    ("out_root", "artifacts"),
    ("classifier.attacked.arch", "vgg11:16"),
    ("classifier.attacked.epochs", "150"),
    ("classifier.attacked.batch_size", "16"),
    ("classifier.attacked.optimizer", "adam"),
    ("classifier.attacked.lr", "3e-4"),
    ("classifier.attacked.saturation", "0.99"),
    ("classifier.eval.arch", "cnn2"),
    ("classifier.eval.epochs", "30"),
    ("classifier.eval.batch_size", "16"),
    ("classifier.eval.optimizer", "adam"),
    ("classifier.eval.lr", "1e-3"),
    ("classifier.eval.saturation", "0.99"),
    ("diffusion.steps", "600"),
    ("diffusion.beta_start", "1e-4"),
    ("diffusion.beta_end", "0.02"),
    ("diffusion.unet_base", "8"),
    ("diffusion.iterations", "6000"),
    ("diffusion.batch_size", "16"),
    ("diffusion.lr", "5e-4"),
    ("diffusion.clip_norm", "1"),
    ("vae.latent", "64"),
    ("vae.channels", "32,64"),
    ("vae.kl_weight", "5e-4"),
    ("vae.epochs", "150"),
    ("vae.batch_size", "20"),
    ("vae.lr", "1e-3"),
    ("attack.targets", "8,7"),
    ("attack.methods", "gan,vae,diffusion"),
    ("attack.diffusion.lr", "1"),
    ("attack.diffusion.iters", "200"),
    ("attack.diffusion.stop_loss", "0.05"),
    ("attack.diffusion.grad_mode", "checkpointed:25"),
    ("attack.diffusion.optimize_noise", "false"),
    ("attack.diffusion.zero_last", "true"),
    ("attack.gan.alpha", "1"),
    ("attack.gan.rounds", "50"),
    ("attack.gan.d_steps", "8"),
    ("attack.gan.g_steps", "8"),
    ("attack.gan.fake_batch", "200"),
    ("attack.gan.real_batch", "200"),
    ("attack.gan.minibatch", "25"),
    ("attack.gan.generator_base", "8"),
    ("attack.gan.lr", "2e-4"),
    ("attack.gan.reinit_discriminator", "false"),
    ("attack.vae.lr", "0.1"),
    ("attack.vae.iters", "200"),
    ("attack.vae.stop_loss", "0.05"),
    ("attack.vae.init", "pool"),
    ("attack.pixel.lr", "0.1"),
    ("attack.pixel.iters", "1000"),
    ("attack.pixel.stop_loss", "0.005"),
    ("attack.pixel.init_std", "0.5"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierRole {
    Attacked,
    Eval,
}

impl ClassifierRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassifierRole::Attacked => "attacked",
            ClassifierRole::Eval => "eval",
        }
    }
}

impl ExperimentConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown keys,
    /// repeated keys and unparsable values are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key '{k}' repeated", n + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Set one key; unknown keys are rejected. Values are checked by
    /// [`ExperimentConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("no config key '{key}'"))
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("bad value '{v}' for '{key}'")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad item '{s}' in '{key}'")))
            })
            .collect()
    }

    /// Every resolved key, one per line in key order.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parse every typed view once so errors surface before any work.
    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        self.master_seed()?;
        self.scenario_seed()?;
        self.classifier_spec(ClassifierRole::Attacked)?;
        self.classifier_spec(ClassifierRole::Eval)?;
        self.schedule()?;
        self.diffusion_train()?;
        self.vae_spec()?;
        self.targets()?;
        self.methods()?;
        self.path_attack(0, 0)?;
        self.zero_last()?;
        self.gan_attack(0, 0)?.validate()?;
        self.latent_attack(0, 0)?;
        self.pixel_attack(0, 0)?;
        Ok(())
    }

    /// `None` for a synthetic dataset.
    pub fn data_path(&self) -> Option<PathBuf> {
        match self.get("data") {
            "synthetic" => None,
            p => Some(PathBuf::from(p)),
        }
    }

    pub fn layout(&self) -> Result<DatasetLayout> {
        let l = DatasetLayout {
            classes: self.typed("data.classes")?,
            per_class: self.typed("data.per_class")?,
            height: self.typed("data.height")?,
            width: self.typed("data.width")?,
        };
        if l.classes < 2 || l.per_class == 0 || l.height == 0 || l.width == 0 {
            return Err(Error::Config(format!("bad dataset layout {l:?}")));
        }
        Ok(l)
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.typed("seed")
    }

    /// Explicit scenario seed, or `None` to derive it from the master seed.
    pub fn scenario_seed(&self) -> Result<Option<u64>> {
        match self.get("scenario.seed") {
            "auto" => Ok(None),
            _ => self.typed("scenario.seed").map(Some),
        }
    }

    pub fn run_id(&self) -> Option<&str> {
        match self.get("run_id") {
            "auto" => None,
            id => Some(id),
        }
    }

    pub fn out_root(&self) -> PathBuf {
        PathBuf::from(self.get("out_root"))
    }

    pub fn classifier_spec(&self, role: ClassifierRole) -> Result<ClassifierSpec> {
        let l = self.layout()?;
        let p = |k: &str| format!("classifier.{}.{k}", role.as_str());
        let arch: Arch = self.get(&p("arch")).parse()?;
        let base = match arch {
            Arch::Cnn2 => ClassifierSpec::cnn2(l.height, l.width, l.classes),
            Arch::Vgg11 { width } => ClassifierSpec::vgg11(width, l.height, l.width, l.classes),
        };
        let spec = ClassifierSpec {
            epochs: self.typed(&p("epochs"))?,
            batch_size: self.typed(&p("batch_size"))?,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::parse(self.get(&p("optimizer")))?,
                ..OptimizerConfig::adam(self.typed(&p("lr"))?)
            },
            saturation: self.typed(&p("saturation"))?,
            ..base
        };
        if spec.batch_size == 0 {
            return Err(Error::Config(format!("{} must be positive", p("batch_size"))));
        }
        Ok(spec)
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        crate::diffusion::build_schedule(
            self.typed("diffusion.steps")?,
            self.typed("diffusion.beta_start")?,
            self.typed("diffusion.beta_end")?,
            crate::diffusion::Interpolation::Linear,
        )
    }

    pub fn diffusion_train(&self) -> Result<DiffusionTrainConfig> {
        let clip: f64 = self.typed("diffusion.clip_norm")?;
        let cfg = DiffusionTrainConfig {
            unet_base: self.typed("diffusion.unet_base")?,
            iterations: self.typed("diffusion.iterations")?,
            batch_size: self.typed("diffusion.batch_size")?,
            optimizer: OptimizerConfig {
                clip_norm: (clip > 0.0).then_some(clip),
                ..OptimizerConfig::adam(self.typed("diffusion.lr")?)
            },
        };
        if cfg.unet_base == 0 || cfg.batch_size == 0 {
            return Err(Error::Config("diffusion width and batch must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn vae_spec(&self) -> Result<VaeSpec> {
        let ch: Vec<usize> = self.list("vae.channels")?;
        let [c1, c2] = ch[..] else {
            return Err(Error::Config("vae.channels takes two widths".into()));
        };
        let spec = VaeSpec {
            latent: self.typed("vae.latent")?,
            channels: (c1, c2),
            kl_weight: self.typed("vae.kl_weight")?,
            epochs: self.typed("vae.epochs")?,
            batch_size: self.typed("vae.batch_size")?,
            optimizer: OptimizerConfig::adam(self.typed("vae.lr")?),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 0-based target classes (configured as 1-based person ids).
    pub fn targets(&self) -> Result<Vec<usize>> {
        let ids: Vec<usize> = self.list("attack.targets")?;
        let classes = self.layout()?.classes;
        let targets = classes / 2;
        ids.iter()
            .map(|&id| {
                if id == 0 || id > targets {
                    Err(Error::Config(format!(
                        "attack target {id} is not one of persons 1..={targets}"
                    )))
                } else {
                    Ok(id - 1)
                }
            })
            .collect()
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        let mut m: Vec<Method> = self.list("attack.methods")?;
        m.sort();
        m.dedup();
        Ok(m)
    }

    pub fn path_attack(&self, target: usize, seed: u64) -> Result<PathAttackConfig> {
        let lr: f64 = self.typed("attack.diffusion.lr")?;
        if lr.is_nan() || lr < 0.0 {
            return Err(Error::Config("attack.diffusion.lr must be >= 0".into()));
        }
        Ok(PathAttackConfig {
            target,
            lr,
            max_iters: self.typed("attack.diffusion.iters")?,
            stop_loss: self.typed("attack.diffusion.stop_loss")?,
            grad_mode: self.get("attack.diffusion.grad_mode").parse::<GradMode>()?,
            backtracking: true,
            optimize_noise: self.typed("attack.diffusion.optimize_noise")?,
            seed,
        })
    }

    pub fn zero_last(&self) -> Result<bool> {
        self.typed("attack.diffusion.zero_last")
    }

    pub fn gan_attack(&self, target: usize, seed: u64) -> Result<GanAttackConfig> {
        let base = GanAttackConfig::new(target, seed);
        let opt = OptimizerConfig {
            lr: self.typed("attack.gan.lr")?,
            ..base.g_optimizer
        };
        Ok(GanAttackConfig {
            alpha: self.typed("attack.gan.alpha")?,
            rounds: self.typed("attack.gan.rounds")?,
            d_steps: self.typed("attack.gan.d_steps")?,
            g_steps: self.typed("attack.gan.g_steps")?,
            fake_batch: self.typed("attack.gan.fake_batch")?,
            real_batch: self.typed("attack.gan.real_batch")?,
            minibatch: self.typed("attack.gan.minibatch")?,
            generator_base: self.typed("attack.gan.generator_base")?,
            g_optimizer: opt,
            d_optimizer: opt,
            reinit_discriminator: self.typed("attack.gan.reinit_discriminator")?,
            ..base
        })
    }

    pub fn latent_attack(&self, target: usize, seed: u64) -> Result<LatentAttackConfig> {
        Ok(LatentAttackConfig {
            target,
            lr: self.typed("attack.vae.lr")?,
            max_iters: self.typed("attack.vae.iters")?,
            stop_loss: self.typed("attack.vae.stop_loss")?,
            init: self.get("attack.vae.init").parse::<LatentInit>()?,
            seed,
        })
    }

    pub fn pixel_attack(&self, target: usize, seed: u64) -> Result<PixelAttackConfig> {
        Ok(PixelAttackConfig {
            target,
            lr: self.typed("attack.pixel.lr")?,
            max_iters: self.typed("attack.pixel.iters")?,
            stop_loss: self.typed("attack.pixel.stop_loss")?,
            init_std: self.typed("attack.pixel.init_std")?,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_snapshot_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.snapshot()).unwrap(), cfg);
        assert_eq!(cfg.targets().unwrap(), vec![7, 6]);
        assert_eq!(
            cfg.methods().unwrap(),
            vec![Method::Gan, Method::Vae, Method::Diffusion]
        );
        assert_eq!(cfg.schedule().unwrap().steps(), 600);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg =
            ExperimentConfig::parse("# tiny run\nseed = 5\n\ndiffusion.steps = 20   # short\nattack.targets = 1\n")
                .unwrap();
        assert_eq!(cfg.master_seed().unwrap(), 5);
        assert_eq!(cfg.schedule().unwrap().steps(), 20);
        assert_eq!(ExperimentConfig::parse(&cfg.snapshot()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense = 1",
            "seed = x",
            "seed = 1\nseed = 2",
            "just words",
            "attack.targets = 21",
            "attack.targets = 0",
            "attack.methods = gan,magic",
            "attack.diffusion.grad_mode = checkpointed:0",
            "classifier.eval.arch = resnet",
            "diffusion.beta_end = 2",
            "vae.channels = 4",
            "attack.gan.alpha = -1",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }
}
