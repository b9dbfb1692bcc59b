use classrecon_core::pipeline::{diff_manifests, read_manifest, replay, run_pipeline, ExperimentConfig, Stage};
use classrecon_core::Error;

const TINY: &str = "
data.classes = 4
data.height = 32
data.width = 32
classifier.attacked.arch = vgg11:2
classifier.attacked.epochs = 2
classifier.eval.epochs = 2
diffusion.steps = 5
diffusion.unet_base = 2
diffusion.iterations = 3
vae.latent = 4
vae.channels = 2,4
vae.epochs = 1
attack.targets = 1,2
attack.methods = gan,vae,diffusion,pixel
attack.diffusion.iters = 2
attack.diffusion.grad_mode = checkpointed:2
attack.gan.rounds = 1
attack.gan.fake_batch = 8
attack.gan.real_batch = 8
attack.gan.minibatch = 4
attack.gan.d_steps = 1
attack.gan.g_steps = 1
attack.gan.generator_base = 2
attack.vae.iters = 2
attack.pixel.iters = 2
";

fn tiny(root: &std::path::Path, run: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(TINY).unwrap();
    cfg.set("out_root", root.to_str().unwrap()).unwrap();
    cfg.set("run_id", run).unwrap();
    cfg
}

#[test]
fn staged_run_guards_and_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "a");

    let err = run_pipeline(&cfg, &[Stage::Attacks]).unwrap_err();
    assert!(matches!(err, Error::Prerequisite(_)), "{err}");

    run_pipeline(&cfg, &[Stage::Data, Stage::Classifiers]).unwrap();
    let err = run_pipeline(&cfg, &[Stage::Attacks, Stage::Eval]).unwrap_err();
    assert!(err.to_string().contains("diffusion.ck"), "{err}");
    let m = run_pipeline(&cfg, &[Stage::Diffusion, Stage::Vae, Stage::Attacks, Stage::Eval]).unwrap();
    assert!(m.contains_key("reports/report.csv"));
    assert!(m.contains_key("figures/targets.png"));
    assert!(m.contains_key("results/diffusion-person2/trace.csv"));

    let err = run_pipeline(&cfg, &[Stage::Eval]).unwrap_err();
    assert!(matches!(err, Error::AlreadyExists(_)), "{err}");

    let mut other = cfg.clone();
    other.set("seed", "3").unwrap();
    assert_eq!(run_pipeline(&other, &[Stage::Data]).unwrap_err().exit_code(), 2);

    let run_a = dir.path().join("runs/a");
    let csv = std::fs::read_to_string(run_a.join("reports/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    assert!(csv.starts_with("target_id,method,attacked_confidence,transfer_confidence,artifact_path,seed\n"));

    let m2 = replay(&run_a, dir.path(), "b").unwrap();
    assert_eq!(read_manifest(&run_a).unwrap(), m);
    assert_eq!(diff_manifests(&m, &m2, &["manifest/config.txt"]), Vec::<String>::new());
}
