use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::Stage;
use crate::error::{Error, Result};

pub const SUBDIRS: [&str; 5] = ["checkpoints", "results", "reports", "figures", "manifest"];
pub(crate) const CONFIG_SNAPSHOT: &str = "manifest/config.txt";
const SEEDS: &str = "manifest/seeds.txt";
const STAGES: &str = "manifest/stages.txt";
const MANIFEST: &str = "manifest/manifest.txt";

/// `<out_root>/runs/<run-id>/{checkpoints,results,reports,figures,manifest}`.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    dir: PathBuf,
    run_id: String,
}

/// Relative path to SHA-256 for every file of a run except the manifest
/// itself.
pub type Manifest = BTreeMap<String, String>;

impl ArtifactStore {
    /// A fresh id from the wall clock and the master seed.
    pub fn new_run_id(seed: u64) -> String {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        format!("{}-{:09}-s{seed}", now.as_secs(), now.subsec_nanos())
    }

    pub fn open_or_create(out_root: &Path, run_id: Option<&str>, seed: u64) -> Result<Self> {
        let run_id = match run_id {
            Some(id) => {
                if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                    return Err(Error::Config(format!("bad run id '{id}'")));
                }
                id.to_string()
            }
            None => Self::new_run_id(seed),
        };
        let dir = out_root.join("runs").join(&run_id);
        for s in SUBDIRS {
            let p = dir.join(s);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Self { dir, run_id })
    }

    pub fn open(run_dir: &Path) -> Result<Self> {
        if !run_dir.join(CONFIG_SNAPSHOT).exists() {
            return Err(Error::Prerequisite(format!(
                "{} is not a run directory",
                run_dir.display()
            )));
        }
        let run_id = run_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self {
            dir: run_dir.to_path_buf(),
            run_id,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Write the config snapshot, or check it matches the one already there.
    pub fn bind_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        let p = self.path(CONFIG_SNAPSHOT);
        let snap = cfg.snapshot();
        if p.exists() {
            let old = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            if old != snap {
                return Err(Error::Config(format!(
                    "run {} was started with a different configuration",
                    self.run_id
                )));
            }
            return Ok(());
        }
        std::fs::write(&p, snap).map_err(|e| Error::io(&p, e))
    }

    pub fn write_seeds(&self, seeds: &BTreeMap<String, u64>) -> Result<()> {
        let p = self.path(SEEDS);
        let text: String = seeds.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn record_stage(&self, st: Stage) -> Result<()> {
        use std::io::Write;
        let p = self.path(STAGES);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        writeln!(f, "{st}").map_err(|e| Error::io(&p, e))
    }

    /// Hash every file and write `manifest/manifest.txt`.
    pub fn write_manifest(&self) -> Result<Manifest> {
        let mut files = Vec::new();
        walk(&self.dir, &mut files)?;
        let mut m = Manifest::new();
        for f in files {
            let rel = f
                .strip_prefix(&self.dir)
                .expect("walked under the run")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            if rel == MANIFEST {
                continue;
            }
            let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
            m.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
        let text: String = m.iter().map(|(k, v)| format!("{v}  {k}\n")).collect();
        let p = self.path(MANIFEST);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(m)
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    let p = run_dir.join(MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    text.lines()
        .map(|l| {
            l.split_once("  ")
                .map(|(h, f)| (f.to_string(), h.to_string()))
                .ok_or_else(|| Error::Prerequisite(format!("{}: bad line '{l}'", p.display())))
        })
        .collect()
}

pub(crate) fn read_stages(run_dir: &Path) -> Result<Vec<Stage>> {
    let p = run_dir.join(STAGES);
    if !p.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut v = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse())
        .collect::<Result<Vec<Stage>>>()?;
    v.sort();
    v.dedup();
    Ok(v)
}

/// Paths whose hashes differ or that exist in only one manifest, skipping
/// files expected to differ between runs.
pub fn diff_manifests(a: &Manifest, b: &Manifest, ignore: &[&str]) -> Vec<String> {
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .filter(|k| !ignore.contains(&k.as_str()))
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect()
}
