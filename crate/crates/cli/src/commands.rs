use std::path::{Path, PathBuf};

use classrecon_core::attack::lr_study_csv;
use classrecon_core::data::visible_pool;
use classrecon_core::eval::ReportInput;
use classrecon_core::pipeline::{
    derive_seed, diff_manifests, load_experiment_data, replay, run_attack, AttackAssets, ClassifierRole, REPORT_CSV,
};
use classrecon_core::synth::{write_synthetic_packed, write_synthetic_tree};
use classrecon_core::{
    build_report, export_grid, lr_study, run_pipeline, sample, seed_everything, train_classifier, train_diffusion,
    train_vae, Arch, ArtifactStore, AttackResult, Checkpoint, Classifier, Error, ExperimentConfig, GrayImage, Method,
    NoisePath, NoisePredictor, Result, Stage, Vae,
};

use crate::{AttackArgs, Cli, Command, Global};

fn resolve_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(p) = &g.out_root {
        cfg.set("out_root", &p.display().to_string())?;
    }
    if let Some(p) = &g.data {
        cfg.set("data", &p.display().to_string())?;
    }
    for o in &g.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{o}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_ck(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Prerequisite(format!(
            "{what} checkpoint {} not found",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

fn load_classifier(path: &Path) -> Result<Classifier<f32>> {
    Classifier::from_checkpoint(&load_ck(path, "classifier")?)
}

fn load_predictor(path: &Path) -> Result<NoisePredictor> {
    NoisePredictor::from_checkpoint(&load_ck(path, "diffusion")?)
}

fn load_vae(path: &Path) -> Result<Vae<f32>> {
    Vae::from_checkpoint(&load_ck(path, "VAE")?)
}

fn person_to_class(person: usize, clf: &Classifier<f32>) -> Result<usize> {
    if person == 0 || person > clf.classes() {
        return Err(Error::Config(format!(
            "target person {person} outside 1..={}",
            clf.classes()
        )));
    }
    Ok(person - 1)
}

fn fresh_out_dir(dir: &Path) -> Result<()> {
    if dir.join("result.txt").exists() || dir.join("manifest.txt").exists() {
        return Err(Error::AlreadyExists(dir.to_path_buf()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn refuse_existing(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::AlreadyExists(path.to_path_buf()));
    }
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// `manifest.txt` next to single-command outputs: inputs, seeds and the
/// resolved config.
fn write_run_manifest(dir: &Path, cfg: &ExperimentConfig, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str(&cfg.snapshot());
    let p = dir.join("manifest.txt");
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn ck_checksum(path: &Path) -> Result<String> {
    Ok(Checkpoint::load(path)?.checksum())
}

fn attack_seed(cfg: &ExperimentConfig, method: Method, target: usize) -> Result<u64> {
    let seeds = seed_everything(cfg.master_seed()?);
    Ok(derive_seed(seeds[&format!("attack.{method}")], target as u64))
}

fn print_result(r: &AttackResult, dir: &Path) {
    println!(
        "{} person {}: loss {:.4} -> {:.4}, attacked confidence {:.4}, {} iterations, saved to {}",
        r.method,
        r.target + 1,
        r.loss_trace.first().copied().unwrap_or(f64::NAN),
        r.final_loss(),
        r.attacked_confidence,
        r.iterations_run,
        dir.display()
    );
}

struct Single<'a> {
    cfg: ExperimentConfig,
    common: &'a AttackArgs,
    method: Method,
    diffusion: Option<&'a Path>,
    vae: Option<&'a Path>,
}

fn single_attack(s: Single) -> Result<()> {
    let clf = load_classifier(&s.common.classifier)?;
    let target = person_to_class(s.common.target, &clf)?;
    fresh_out_dir(&s.common.out_dir)?;
    let (ds, sc) = load_experiment_data(&s.cfg)?;
    let pool = visible_pool(&ds, &sc);
    let diffusion = s.diffusion.map(load_predictor).transpose()?;
    let vae = s.vae.map(load_vae).transpose()?;
    let seed = attack_seed(&s.cfg, s.method, target)?;
    let assets = AttackAssets {
        classifier: &clf,
        pool: &pool,
        diffusion: diffusion.as_ref(),
        vae: vae.as_ref(),
    };
    let r = run_attack(s.method, target, seed, &s.cfg, assets)?;
    r.save(&s.common.out_dir)?;
    let mut entries = vec![
        ("method", s.method.to_string()),
        ("target_person", s.common.target.to_string()),
        ("attack_seed", seed.to_string()),
        ("classifier", s.common.classifier.display().to_string()),
        ("classifier_checksum", ck_checksum(&s.common.classifier)?),
    ];
    for (k, p) in [("diffusion", s.diffusion), ("vae", s.vae)] {
        if let Some(p) = p {
            entries.push((k, p.display().to_string()));
        }
    }
    write_run_manifest(&s.common.out_dir, &s.cfg, &entries)?;
    print_result(&r, &s.common.out_dir);
    if r.diverged {
        return Err(Error::Diverged {
            what: format!("{} attack", s.method),
            step: r.iterations_run,
            trace: r.loss_trace,
        });
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    let seeds = seed_everything(cfg.master_seed()?);
    match cli.command {
        Command::MakeSynthetic { out } => {
            let layout = cfg.layout()?;
            if out.extension().is_some_and(|e| e == "f32") {
                write_synthetic_packed(&out, layout, seeds["synthetic"])?;
            } else {
                write_synthetic_tree(&out, layout, seeds["synthetic"])?;
            }
            println!("wrote {} synthetic images to {}", layout.len(), out.display());
        }
        Command::TrainClassifier { arch, epochs, out } => {
            let arch: Arch = arch.parse()?;
            let role = match arch {
                Arch::Cnn2 => ClassifierRole::Eval,
                Arch::Vgg11 { .. } => ClassifierRole::Attacked,
            };
            let key = |k: &str| format!("classifier.{}.{k}", role.as_str());
            cfg.set(&key("arch"), &arch.to_string())?;
            if let Some(e) = epochs {
                cfg.set(&key("epochs"), &e.to_string())?;
            }
            let spec = cfg.classifier_spec(role)?;
            refuse_existing(&out)?;
            let (ds, sc) = load_experiment_data(&cfg)?;
            let (net, metrics) = train_classifier(
                &spec,
                &ds.subset(&sc.train_indices()),
                &ds.subset(&sc.val_indices()),
                seeds[&format!("classifier.{}", role.as_str())],
            )?;
            net.to_checkpoint().save(&out)?;
            let mp = out.with_extension("metrics.csv");
            std::fs::write(&mp, metrics.to_csv()).map_err(|e| Error::io(&mp, e))?;
            let sel = metrics.selected();
            println!(
                "{arch}: epoch {} train top-1 {:.4} val top-1 {:.4}, saved to {}",
                sel.epoch,
                sel.train_top1,
                sel.val_top1,
                out.display()
            );
        }
        Command::TrainDiffusion {
            steps,
            beta_start,
            beta_end,
            iterations,
            out,
        } => {
            for (k, v) in [
                ("diffusion.steps", steps.map(|v| v.to_string())),
                ("diffusion.beta_start", beta_start.map(|v| v.to_string())),
                ("diffusion.beta_end", beta_end.map(|v| v.to_string())),
                ("diffusion.iterations", iterations.map(|v| v.to_string())),
            ] {
                if let Some(v) = v {
                    cfg.set(k, &v)?;
                }
            }
            let sched = cfg.schedule()?;
            let tc = cfg.diffusion_train()?;
            refuse_existing(&out)?;
            let (ds, sc) = load_experiment_data(&cfg)?;
            let (np, trace) = train_diffusion(&visible_pool(&ds, &sc), &sched, &tc, seeds["diffusion"])?;
            np.to_checkpoint().save(&out)?;
            let tail = &trace[trace.len().saturating_sub(50)..];
            let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            println!(
                "trained {} iterations, recent loss {mean:.4}, saved to {}",
                trace.len(),
                out.display()
            );
        }
        Command::Sample { diffusion, z_seed, out } => {
            let np = load_predictor(&diffusion)?;
            let layout = cfg.layout()?;
            let (h, w) = (layout.height, layout.width);
            let zero_last = cfg.zero_last()?;
            let mut path = NoisePath::from_seed(cfg.master_seed()?, np.schedule.steps(), &[1, 1, h, w], zero_last);
            if let Some(z) = z_seed {
                path = path.with_fresh_z(z, zero_last);
            }
            let img = sample(&np.net, &np.schedule, &path)?;
            refuse_existing(&out)?;
            GrayImage::from_canonical(w, h, img.data()).save(&out)?;
            let raw: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let tp = out.with_extension("f32");
            std::fs::write(&tp, raw).map_err(|e| Error::io(&tp, e))?;
            println!("checksum {}", img.checksum());
        }
        Command::AttackDiffusion {
            common,
            diffusion,
            lr,
            iters,
            grad_mode,
            optimize_noise,
        } => {
            if let Some(v) = lr {
                cfg.set("attack.diffusion.lr", &v.to_string())?;
            }
            if let Some(v) = iters {
                cfg.set("attack.diffusion.iters", &v.to_string())?;
            }
            if let Some(v) = grad_mode {
                cfg.set("attack.diffusion.grad_mode", &v)?;
            }
            if optimize_noise {
                cfg.set("attack.diffusion.optimize_noise", "true")?;
            }
            cfg.validate()?;
            single_attack(Single {
                cfg,
                common: &common,
                method: Method::Diffusion,
                diffusion: Some(&diffusion),
                vae: None,
            })?;
        }
        Command::AttackGan {
            common,
            alpha,
            rounds,
            reinit_discriminator,
        } => {
            if let Some(v) = alpha {
                cfg.set("attack.gan.alpha", &v.to_string())?;
            }
            if let Some(v) = rounds {
                cfg.set("attack.gan.rounds", &v.to_string())?;
            }
            if reinit_discriminator {
                cfg.set("attack.gan.reinit_discriminator", "true")?;
            }
            cfg.validate()?;
            single_attack(Single {
                cfg,
                common: &common,
                method: Method::Gan,
                diffusion: None,
                vae: None,
            })?;
        }
        Command::TrainVae { epochs, out } => {
            if let Some(e) = epochs {
                cfg.set("vae.epochs", &e.to_string())?;
            }
            let spec = cfg.vae_spec()?;
            refuse_existing(&out)?;
            let (ds, sc) = load_experiment_data(&cfg)?;
            let (vae, hist) = train_vae(&visible_pool(&ds, &sc), &spec, seeds["vae"])?;
            vae.to_checkpoint().save(&out)?;
            if let Some(e) = hist.last() {
                println!(
                    "trained {} epochs, reconstruction {:.5}, KL {:.3}, saved to {}",
                    hist.len(),
                    e.reconstruction,
                    e.kl,
                    out.display()
                );
            }
        }
        Command::AttackVae {
            common,
            vae,
            init,
            lr,
            iters,
        } => {
            for (k, v) in [
                ("attack.vae.init", init),
                ("attack.vae.lr", lr.map(|v| v.to_string())),
                ("attack.vae.iters", iters.map(|v| v.to_string())),
            ] {
                if let Some(v) = v {
                    cfg.set(k, &v)?;
                }
            }
            cfg.validate()?;
            single_attack(Single {
                cfg,
                common: &common,
                method: Method::Vae,
                diffusion: None,
                vae: Some(&vae),
            })?;
        }
        Command::AttackPixel { common, lr, iters } => {
            if let Some(v) = lr {
                cfg.set("attack.pixel.lr", &v.to_string())?;
            }
            if let Some(v) = iters {
                cfg.set("attack.pixel.iters", &v.to_string())?;
            }
            cfg.validate()?;
            single_attack(Single {
                cfg,
                common: &common,
                method: Method::Pixel,
                diffusion: None,
                vae: None,
            })?;
        }
        Command::LrStudy {
            common,
            diffusion,
            lrs,
            iters,
        } => {
            if let Some(v) = iters {
                cfg.set("attack.diffusion.iters", &v.to_string())?;
            }
            let lrs: Vec<f64> = lrs
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad learning rate '{s}'")))
                })
                .collect::<Result<_>>()?;
            let clf = load_classifier(&common.classifier)?;
            let np = load_predictor(&diffusion)?;
            let target = person_to_class(common.target, &clf)?;
            fresh_out_dir(&common.out_dir)?;
            let seed = attack_seed(&cfg, Method::Diffusion, target)?;
            let (h, w) = clf.dims();
            let path = NoisePath::from_seed(seed, np.schedule.steps(), &[1, 1, h, w], cfg.zero_last()?);
            let base = cfg.path_attack(target, seed)?;
            let rows = lr_study(&clf, &np.net, &np.schedule, &path, &base, &lrs)?;
            let csv = lr_study_csv(&rows);
            let p = common.out_dir.join("lr_study.csv");
            std::fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
            let mut tiles = Vec::new();
            let mut labels = Vec::new();
            for row in &rows {
                row.result.save(&common.out_dir.join(format!("lr-{}", row.lr)))?;
                tiles.push(row.result.to_gray());
                labels.push(format!("LR {}", row.lr));
            }
            export_grid(&tiles, &labels, rows.len(), &common.out_dir.join("lr_study.png"))?;
            write_run_manifest(
                &common.out_dir,
                &cfg,
                &[
                    ("target_person", common.target.to_string()),
                    ("attack_seed", seed.to_string()),
                    ("classifier_checksum", ck_checksum(&common.classifier)?),
                    ("diffusion_checksum", ck_checksum(&diffusion)?),
                ],
            )?;
            print!("{csv}");
        }
        Command::Report {
            eval_classifier,
            attacked_classifier,
            results,
            out_dir,
        } => {
            let eval = load_classifier(&eval_classifier)?;
            let attacked = load_classifier(&attacked_classifier)?;
            let inputs = results
                .iter()
                .map(|d| {
                    Ok(ReportInput {
                        result: AttackResult::load(d)?,
                        artifact_path: d.display().to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            refuse_existing(&out_dir.join("report.csv"))?;
            let report = build_report(&inputs, &eval, &attacked.params().checksum())?;
            report.save(&out_dir)?;
            print!("{}", report.to_table());
        }
        Command::Run { stages, run_id } => {
            let id = match run_id.or_else(|| cfg.run_id().map(str::to_string)) {
                Some(id) => id,
                None => ArtifactStore::new_run_id(cfg.master_seed()?),
            };
            cfg.set("run_id", &id)?;
            let stages = Stage::parse_list(&stages)?;
            let manifest = run_pipeline(&cfg, &stages)?;
            let dir = cfg.out_root().join("runs").join(&id);
            println!("run {} ({} files)", dir.display(), manifest.len());
            if manifest.contains_key(REPORT_CSV) {
                let p = dir.join("reports/report.txt");
                if let Ok(t) = std::fs::read_to_string(&p) {
                    print!("{t}");
                }
            }
        }
        Command::Replay { run, run_id } => {
            let out_root = match &cli.global.out_root {
                Some(p) => p.clone(),
                None => run
                    .parent()
                    .and_then(Path::parent)
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            let id =
                run_id.unwrap_or_else(|| format!("{}-replay", run.file_name().unwrap_or_default().to_string_lossy()));
            ArtifactStore::open(&run)?;
            let original = classrecon_core::pipeline::read_manifest(&run)?;
            let fresh = replay(&run, &out_root, &id)?;
            let diffs = diff_manifests(&original, &fresh, &["manifest/config.txt"]);
            println!("replayed into {}", out_root.join("runs").join(&id).display());
            if diffs.is_empty() {
                println!("all artifacts identical");
            } else {
                for d in &diffs {
                    println!("differs: {d}");
                }
            }
            if diffs.iter().any(|d| d == REPORT_CSV) {
                return Err(Error::Diverged {
                    what: "replayed report".into(),
                    step: 0,
                    trace: Vec::new(),
                });
            }
        }
    }
    Ok(())
}
