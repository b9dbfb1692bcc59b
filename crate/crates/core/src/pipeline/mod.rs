//! End-to-end experiment: data, victims, generative priors, attacks and the
//! evaluation report, written to one run directory with a checksummed
//! manifest.

mod config;
mod store;

pub use config::{ClassifierRole, ExperimentConfig, KEYS};
pub use store::{diff_manifests, read_manifest, ArtifactStore, Manifest};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::attack::attack;
use crate::checkpoint::Checkpoint;
use crate::classifier::{pixel_space_attack, train_classifier, Classifier};
use crate::data::{load_dataset_with, make_scenario, visible_pool, AttackScenario, FaceDataset};
use crate::diffusion::{train_diffusion, NoisePath, NoisePredictor};
use crate::error::{Error, Result};
use crate::eval::{build_report, export_grid, ReportInput};
use crate::gan::train_attack_gan;
use crate::image::GrayImage;
use crate::result::{AttackResult, Method};
use crate::synth::{synthetic_dataset, write_synthetic_packed};
use crate::vae::{latent_attack, train_vae, Vae};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named seed streams, in derivation order.
pub const SEED_STREAMS: [&str; 10] = [
    "synthetic",
    "scenario",
    "classifier.attacked",
    "classifier.eval",
    "diffusion",
    "vae",
    "attack.diffusion",
    "attack.gan",
    "attack.vae",
    "attack.pixel",
];

/// Per-stage seeds from a splitmix64 counter started at `master`.
pub fn seed_everything(master: u64) -> BTreeMap<String, u64> {
    let mut state = master;
    SEED_STREAMS
        .iter()
        .map(|name| {
            state = state.wrapping_add(GOLDEN);
            (name.to_string(), mix(state))
        })
        .collect()
}

/// A child seed of `seed` for item `index` (e.g. one attack target).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Data,
    Classifiers,
    Diffusion,
    Vae,
    Attacks,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Data,
        Stage::Classifiers,
        Stage::Diffusion,
        Stage::Vae,
        Stage::Attacks,
        Stage::Eval,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Classifiers => "classifiers",
            Stage::Diffusion => "diffusion",
            Stage::Vae => "vae",
            Stage::Attacks => "attacks",
            Stage::Eval => "eval",
        }
    }

    /// Comma-separated stage names, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        let mut v = s.split(',').map(|p| p.trim().parse()).collect::<Result<Vec<Stage>>>()?;
        v.sort();
        v.dedup();
        Ok(v)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))
    }
}

pub const SYNTHETIC_DATA: &str = "data/faces.f32";
pub const DATA_RECORD: &str = "manifest/data.txt";
pub const ATTACKED_CKPT: &str = "checkpoints/classifier_attacked.ck";
pub const EVAL_CKPT: &str = "checkpoints/classifier_eval.ck";
pub const DIFFUSION_CKPT: &str = "checkpoints/diffusion.ck";
pub const VAE_CKPT: &str = "checkpoints/vae.ck";
pub const REPORT_CSV: &str = "reports/report.csv";

/// Directory of one attack result, relative to the run.
pub fn result_dir(method: Method, target: usize) -> String {
    format!("results/{method}-person{}", target + 1)
}

fn outputs(stage: Stage, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    Ok(match stage {
        Stage::Data => vec![DATA_RECORD.into()],
        Stage::Classifiers => vec![ATTACKED_CKPT.into(), EVAL_CKPT.into()],
        Stage::Diffusion => vec![DIFFUSION_CKPT.into()],
        Stage::Vae => vec![VAE_CKPT.into()],
        Stage::Attacks => {
            let mut v = Vec::new();
            for t in cfg.targets()? {
                for m in cfg.methods()? {
                    v.push(result_dir(m, t));
                }
            }
            v
        }
        Stage::Eval => vec![REPORT_CSV.into()],
    })
}

fn inputs(stage: Stage, cfg: &ExperimentConfig) -> Result<Vec<(String, Stage)>> {
    let methods = cfg.methods()?;
    let mut v = Vec::new();
    if stage != Stage::Data {
        v.push((DATA_RECORD.to_string(), Stage::Data));
    }
    match stage {
        Stage::Attacks => {
            v.push((ATTACKED_CKPT.into(), Stage::Classifiers));
            if methods.contains(&Method::Diffusion) {
                v.push((DIFFUSION_CKPT.into(), Stage::Diffusion));
            }
            if methods.contains(&Method::Vae) {
                v.push((VAE_CKPT.into(), Stage::Vae));
            }
        }
        Stage::Eval => {
            v.push((ATTACKED_CKPT.into(), Stage::Classifiers));
            v.push((EVAL_CKPT.into(), Stage::Classifiers));
            for o in outputs(Stage::Attacks, cfg)? {
                v.push((o, Stage::Attacks));
            }
        }
        _ => {}
    }
    Ok(v)
}

/// Everything later stages share, loaded lazily.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    store: &'a ArtifactStore,
    seeds: BTreeMap<String, u64>,
    data: Option<(FaceDataset, AttackScenario)>,
}

impl Context<'_> {
    fn seed(&self, name: &str) -> u64 {
        self.seeds[name]
    }

    fn dataset_path(&self) -> PathBuf {
        self.cfg.data_path().unwrap_or_else(|| self.store.path(SYNTHETIC_DATA))
    }

    fn scenario_seed(&self) -> Result<u64> {
        Ok(self.cfg.scenario_seed()?.unwrap_or(self.seed("scenario")))
    }

    fn data(&mut self) -> Result<&(FaceDataset, AttackScenario)> {
        if self.data.is_none() {
            let ds = load_dataset_with(&self.dataset_path(), self.cfg.layout()?)?;
            let record = self.store.path(DATA_RECORD);
            let text = std::fs::read_to_string(&record).map_err(|e| Error::io(&record, e))?;
            let want = text
                .lines()
                .find_map(|l| l.strip_prefix("images_checksum = "))
                .unwrap_or_default();
            if want != ds.images().checksum() {
                return Err(Error::Dataset(format!(
                    "dataset at {} changed since the data stage",
                    self.dataset_path().display()
                )));
            }
            let sc = make_scenario(&ds, self.scenario_seed()?);
            self.data = Some((ds, sc));
        }
        Ok(self.data.as_ref().unwrap())
    }

    fn classifier(&self, rel: &str) -> Result<Classifier<f32>> {
        Classifier::from_checkpoint(&Checkpoint::load(&self.store.path(rel))?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn trace_csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn stage_data(ctx: &mut Context) -> Result<()> {
    let layout = ctx.cfg.layout()?;
    if ctx.cfg.data_path().is_none() {
        write_synthetic_packed(&ctx.store.path(SYNTHETIC_DATA), layout, ctx.seed("synthetic"))?;
    }
    let ds = load_dataset_with(&ctx.dataset_path(), layout)?;
    let sc = make_scenario(&ds, ctx.scenario_seed()?);
    let fmt_ids = |v: &[usize]| v.iter().map(|k| (k + 1).to_string()).collect::<Vec<_>>().join(",");
    let record = format!(
        "path = {}\nimages = {}\nimages_checksum = {}\nscenario_seed = {}\ntarget_persons = {}\nvisible_persons = {}\ntrain_indices = {}\nval_indices = {}\n",
        ctx.cfg
            .data_path()
            .map_or(SYNTHETIC_DATA.to_string(), |p| p.display().to_string()),
        ds.len(),
        ds.images().checksum(),
        sc.seed,
        fmt_ids(&sc.target_classes),
        fmt_ids(&sc.visible_classes),
        sc.train_indices().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        sc.val_indices().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
    );
    write_text(&ctx.store.path(DATA_RECORD), &record)?;
    ctx.data = Some((ds, sc));
    Ok(())
}

fn stage_classifiers(ctx: &mut Context) -> Result<()> {
    let (ds, sc) = ctx.data()?.clone();
    let train = ds.subset(&sc.train_indices());
    let val = ds.subset(&sc.val_indices());
    for (role, ck) in [
        (ClassifierRole::Attacked, ATTACKED_CKPT),
        (ClassifierRole::Eval, EVAL_CKPT),
    ] {
        let spec = ctx.cfg.classifier_spec(role)?;
        let seed = ctx.seed(&format!("classifier.{}", role.as_str()));
        let (net, metrics) = train_classifier(&spec, &train, &val, seed)?;
        let sel = metrics.selected();
        log::info!(
            "{} classifier {}: epoch {} train {:.3} val {:.3}",
            role.as_str(),
            spec.arch,
            sel.epoch,
            sel.train_top1,
            sel.val_top1
        );
        net.to_checkpoint().save(&ctx.store.path(ck))?;
        write_text(
            &ctx.store.path(&format!("reports/classifier_{}.csv", role.as_str())),
            &metrics.to_csv(),
        )?;
    }
    Ok(())
}

fn stage_diffusion(ctx: &mut Context) -> Result<()> {
    let (ds, sc) = ctx.data()?;
    let pool = visible_pool(ds, sc);
    let sched = ctx.cfg.schedule()?;
    let (np, trace) = train_diffusion(&pool, &sched, &ctx.cfg.diffusion_train()?, ctx.seed("diffusion"))?;
    np.to_checkpoint().save(&ctx.store.path(DIFFUSION_CKPT))?;
    write_text(
        &ctx.store.path("reports/diffusion_loss.csv"),
        &trace_csv(
            "iteration,loss",
            trace.iter().enumerate().map(|(i, l)| format!("{i},{l:e}")),
        ),
    )
}

fn stage_vae(ctx: &mut Context) -> Result<()> {
    let (ds, sc) = ctx.data()?;
    let pool = visible_pool(ds, sc);
    let (vae, hist) = train_vae(&pool, &ctx.cfg.vae_spec()?, ctx.seed("vae"))?;
    vae.to_checkpoint().save(&ctx.store.path(VAE_CKPT))?;
    write_text(
        &ctx.store.path("reports/vae_loss.csv"),
        &trace_csv(
            "epoch,reconstruction,kl",
            hist.iter()
                .enumerate()
                .map(|(i, e)| format!("{},{:e},{:e}", i + 1, e.reconstruction, e.kl)),
        ),
    )
}

/// The configured dataset (synthesized in memory when `data = synthetic`)
/// and its scenario, seeded as in a pipeline run.
pub fn load_experiment_data(cfg: &ExperimentConfig) -> Result<(FaceDataset, AttackScenario)> {
    let seeds = seed_everything(cfg.master_seed()?);
    let layout = cfg.layout()?;
    let ds = match cfg.data_path() {
        Some(p) => load_dataset_with(&p, layout)?,
        None => synthetic_dataset(layout, seeds["synthetic"])?,
    };
    let sc = make_scenario(&ds, cfg.scenario_seed()?.unwrap_or(seeds["scenario"]));
    Ok((ds, sc))
}

/// Networks and data an attack may need; only the attacked classifier is
/// required by every method.
#[derive(Clone, Copy)]
pub struct AttackAssets<'a> {
    pub classifier: &'a Classifier<f32>,
    pub pool: &'a FaceDataset,
    pub diffusion: Option<&'a NoisePredictor>,
    pub vae: Option<&'a Vae<f32>>,
}

/// Run one configured attack; shared by the pipeline and the command line.
pub fn run_attack(
    method: Method,
    target: usize,
    seed: u64,
    cfg: &ExperimentConfig,
    assets: AttackAssets,
) -> Result<AttackResult> {
    let AttackAssets {
        classifier: clf,
        pool,
        diffusion,
        vae,
    } = assets;
    match method {
        Method::Diffusion => {
            let np = diffusion.ok_or_else(|| Error::Prerequisite("diffusion checkpoint".into()))?;
            let (h, w) = clf.dims();
            let steps = np.schedule.steps();
            let path = NoisePath::from_seed(seed, steps, &[1, 1, h, w], cfg.zero_last()?);
            attack(clf, &np.net, &np.schedule, &path, &cfg.path_attack(target, seed)?)
        }
        Method::Gan => Ok(train_attack_gan(clf, pool, &cfg.gan_attack(target, seed)?)?.result),
        Method::Vae => {
            let vae = vae.ok_or_else(|| Error::Prerequisite("VAE checkpoint".into()))?;
            latent_attack(vae, clf, pool, &cfg.latent_attack(target, seed)?)
        }
        Method::Pixel => pixel_space_attack(clf, &cfg.pixel_attack(target, seed)?),
    }
}

fn stage_attacks(ctx: &mut Context) -> Result<()> {
    let methods = ctx.cfg.methods()?;
    let targets = ctx.cfg.targets()?;
    let (ds, sc) = ctx.data()?;
    let pool = visible_pool(ds, sc);
    let clf = ctx.classifier(ATTACKED_CKPT)?;
    let diffusion = if methods.contains(&Method::Diffusion) {
        Some(NoisePredictor::from_checkpoint(&Checkpoint::load(
            &ctx.store.path(DIFFUSION_CKPT),
        )?)?)
    } else {
        None
    };
    let vae = if methods.contains(&Method::Vae) {
        Some(Vae::from_checkpoint(&Checkpoint::load(&ctx.store.path(VAE_CKPT))?)?)
    } else {
        None
    };
    for &t in &targets {
        for &m in &methods {
            let seed = derive_seed(ctx.seed(&format!("attack.{m}")), t as u64);
            let start = Instant::now();
            let assets = AttackAssets {
                classifier: &clf,
                pool: &pool,
                diffusion: diffusion.as_ref(),
                vae: vae.as_ref(),
            };
            let r = run_attack(m, t, seed, ctx.cfg, assets)?;
            log::info!(
                "{m} attack on person {}: loss {:.4} confidence {:.4} after {} iterations ({:.0?})",
                t + 1,
                r.final_loss(),
                r.attacked_confidence,
                r.iterations_run,
                start.elapsed()
            );
            r.save(&ctx.store.path(&result_dir(m, t)))?;
            if r.diverged {
                return Err(Error::Diverged {
                    what: format!("{m} attack on person {}", t + 1),
                    step: r.iterations_run,
                    trace: r.loss_trace,
                });
            }
        }
    }
    Ok(())
}

fn stage_eval(ctx: &mut Context) -> Result<()> {
    let attacked = Checkpoint::load(&ctx.store.path(ATTACKED_CKPT))?;
    let attacked = Classifier::<f32>::from_checkpoint(&attacked)?.params().checksum();
    let eval = ctx.classifier(EVAL_CKPT)?;
    let methods = ctx.cfg.methods()?;
    let targets = ctx.cfg.targets()?;
    let mut inputs = Vec::new();
    for &t in &targets {
        for &m in &methods {
            let rel = result_dir(m, t);
            inputs.push(ReportInput {
                result: AttackResult::load(&ctx.store.path(&rel))?,
                artifact_path: rel,
            });
        }
    }
    let report = build_report(&inputs, &eval, &attacked)?;
    report.save(&ctx.store.path("reports"))?;
    log::info!("report\n{}", report.to_table());

    // one row per target: a held-out image of the person, then each method
    let (ds, sc) = ctx.data()?;
    let (h, w) = (ds.height(), ds.width());
    let mut tiles = Vec::new();
    let mut labels = Vec::new();
    for &t in &targets {
        match sc.val_index[t].first() {
            Some(&i) => tiles.push(ds.to_gray(i)),
            None => tiles.push(GrayImage::new(w, h, 0)),
        }
        labels.push(format!("P{}", t + 1));
        for input in inputs.iter().filter(|i| i.result.target == t) {
            tiles.push(input.result.to_gray());
            labels.push(input.result.method.as_str().to_uppercase());
        }
    }
    export_grid(
        &tiles,
        &labels,
        methods.len() + 1,
        &ctx.store.path("figures/targets.png"),
    )?;
    Ok(())
}

/// Run `stages` in dependency order into the configured run. Missing
/// prerequisites and existing outputs are reported before any work starts.
pub fn run_pipeline(cfg: &ExperimentConfig, stages: &[Stage]) -> Result<Manifest> {
    cfg.validate()?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let master = cfg.master_seed()?;
    let store = ArtifactStore::open_or_create(&cfg.out_root(), cfg.run_id(), master)?;
    let mut resolved = cfg.clone();
    resolved.set("run_id", store.run_id())?;
    store.bind_config(&resolved)?;

    for &st in &stages {
        for (rel, producer) in inputs(st, cfg)? {
            if !store.path(&rel).exists() && !stages.contains(&producer) {
                return Err(Error::Prerequisite(format!(
                    "stage '{st}' needs {rel} from stage '{producer}' in run {}",
                    store.run_id()
                )));
            }
        }
        for rel in outputs(st, cfg)? {
            if store.path(&rel).exists() {
                return Err(Error::AlreadyExists(store.path(&rel)));
            }
        }
    }

    let seeds = seed_everything(master);
    store.write_seeds(&seeds)?;
    let mut ctx = Context {
        cfg,
        store: &store,
        seeds,
        data: None,
    };
    for &st in &stages {
        let start = Instant::now();
        log::info!("stage {st} in run {}", store.run_id());
        match st {
            Stage::Data => stage_data(&mut ctx)?,
            Stage::Classifiers => stage_classifiers(&mut ctx)?,
            Stage::Diffusion => stage_diffusion(&mut ctx)?,
            Stage::Vae => stage_vae(&mut ctx)?,
            Stage::Attacks => stage_attacks(&mut ctx)?,
            Stage::Eval => stage_eval(&mut ctx)?,
        }
        store.record_stage(st)?;
        log::info!("stage {st} done in {:.1?}", start.elapsed());
    }
    store.write_manifest()
}

/// Rerun every stage recorded in `run_dir` from its config snapshot into a
/// fresh run `new_run_id` under `out_root`.
pub fn replay(run_dir: &Path, out_root: &Path, new_run_id: &str) -> Result<Manifest> {
    let snap = run_dir.join(store::CONFIG_SNAPSHOT);
    if !snap.exists() {
        return Err(Error::Prerequisite(format!("no config snapshot at {}", snap.display())));
    }
    let mut cfg = ExperimentConfig::load(&snap)?;
    cfg.set("run_id", new_run_id)?;
    cfg.set("out_root", &out_root.display().to_string())?;
    let stages = store::read_stages(run_dir)?;
    if stages.is_empty() {
        return Err(Error::Prerequisite(format!(
            "{} records no completed stage",
            run_dir.display()
        )));
    }
    run_pipeline(&cfg, &stages)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_maps() {
        let a = seed_everything(7);
        assert_eq!(a, seed_everything(7));
        assert_eq!(a.len(), SEED_STREAMS.len());
        let b = seed_everything(8);
        assert!(a.iter().all(|(k, v)| b[k] != *v));
        let distinct: std::collections::BTreeSet<_> = a.values().collect();
        assert_eq!(distinct.len(), a.len());
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(1, 3), derive_seed(1, 3));
    }

    #[test]
    fn stage_lists() {
        assert_eq!(Stage::parse_list("all").unwrap().len(), 6);
        assert_eq!(
            Stage::parse_list("eval, data,eval").unwrap(),
            vec![Stage::Data, Stage::Eval]
        );
        assert!(Stage::parse_list("data,train").is_err());
    }

    #[test]
    fn eval_without_attacks_names_the_gap() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.set("out_root", dir.path().to_str().unwrap()).unwrap();
        cfg.set("run_id", "r1").unwrap();
        let err = run_pipeline(&cfg, &[Stage::Eval]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("manifest/data.txt"), "{err}");
    }
}
