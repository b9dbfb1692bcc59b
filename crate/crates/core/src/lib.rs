//! Class reconstruction attacks against face classifiers: victim training,
//! a small DDPM, noise-path, GAN, VAE and pixel attacks, and the evaluation
//! pipeline.

pub mod attack;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gan;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod result;
pub mod synth;
pub mod tensor;
pub mod vae;

pub use attack::{gradient_of_path_loss, lr_study, GradMode, PathAttackConfig};
pub use checkpoint::Checkpoint;
pub use classifier::{pixel_space_attack, train_classifier, Arch, Classifier, ClassifierSpec, PixelAttackConfig};
pub use data::{load_dataset, AttackScenario, DatasetLayout, FaceDataset};
pub use diffusion::{
    build_schedule, denoise_step, forward_noise, sample, train_diffusion, DiffusionTrainConfig, NoisePath,
    NoisePredictor, UNet, VarianceSchedule,
};
pub use error::{Error, Result};
pub use eval::{build_report, export_grid, transfer_confidence, EvaluationReport};
pub use gan::{discriminator_accuracy, generator_loss, train_attack_gan, GanAttackConfig};
pub use graph::{Graph, Var};
pub use image::GrayImage;
pub use pipeline::{run_pipeline, seed_everything, ArtifactStore, ExperimentConfig, Stage};
pub use result::{AttackResult, Method};
pub use tensor::{Float, Tensor};
pub use vae::{latent_attack, train_vae, LatentAttackConfig, Vae, VaeSpec};
