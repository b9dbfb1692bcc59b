//! Outcome of one reconstruction attack and its on-disk artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Gan,
    Vae,
    Diffusion,
    Pixel,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Gan, Method::Vae, Method::Diffusion, Method::Pixel];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Gan => "gan",
            Method::Vae => "vae",
            Method::Diffusion => "diffusion",
            Method::Pixel => "pixel",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub method: Method,
    /// 0-based class id.
    pub target: usize,
    /// `[1, 1, h, w]`, canonical range but not clamped.
    pub image: Tensor<f32>,
    /// Loss before the first update, then after each accepted update.
    pub loss_trace: Vec<f64>,
    /// Attacked-classifier target probability alongside `loss_trace`.
    pub confidence_trace: Vec<f64>,
    pub iterations_run: usize,
    pub attacked_confidence: f64,
    /// Filled in by evaluation.
    pub transfer_confidence: Option<f64>,
    pub seeds: BTreeMap<String, u64>,
    /// Set when the run stopped on a non-finite loss or gradient.
    pub diverged: bool,
}

impl AttackResult {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn to_gray(&self) -> GrayImage {
        let s = self.image.shape();
        GrayImage::from_canonical(s[3], s[2], self.image.data())
    }

    /// Primary seed, reported in tables.
    pub fn seed(&self) -> u64 {
        self.seeds.get("attack").copied().unwrap_or_default()
    }

    /// Write `image.pgm`, `image.png`, `trace.csv`, `tensor.f32` and
    /// `result.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let img = self.to_gray();
        let mut written = Vec::new();
        for name in ["image.pgm", "image.png"] {
            let p = dir.join(name);
            img.save(&p)?;
            written.push(p);
        }

        let p = dir.join("trace.csv");
        let mut csv = String::from("iteration,loss,confidence\n");
        for (i, (l, c)) in self.loss_trace.iter().zip(&self.confidence_trace).enumerate() {
            csv.push_str(&format!("{i},{l:e},{c:e}\n"));
        }
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        written.push(p);

        let p = dir.join("tensor.f32");
        let raw: Vec<u8> = self.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&p, raw).map_err(|e| Error::io(&p, e))?;
        written.push(p);

        let p = dir.join("result.txt");
        let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        let s = self.image.shape();
        let mut text = format!(
            "method = {}\ntarget = {}\nheight = {}\nwidth = {}\niterations = {}\nattacked_confidence = {:e}\ndiverged = {}\n",
            self.method, self.target, s[2], s[3], self.iterations_run, self.attacked_confidence, self.diverged
        );
        if let Some(t) = self.transfer_confidence {
            text.push_str(&format!("transfer_confidence = {t:e}\n"));
        }
        for (k, v) in &self.seeds {
            text.push_str(&format!("seed.{k} = {v}\n"));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(written)
    }

    /// Read back what [`AttackResult::save`] wrote.
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("result.txt");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let bad = |k: &str| Error::Prerequisite(format!("{}: missing or bad '{k}'", p.display()));
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(k));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
        let flt = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(k)) };
        let (h, w) = (num("height")?, num("width")?);

        let tp = dir.join("tensor.f32");
        let raw = std::fs::read(&tp).map_err(|e| Error::io(&tp, e))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let image = Tensor::try_from_vec([1, 1, h, w], data)?;

        let cp = dir.join("trace.csv");
        let csv = std::fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
        let (mut loss_trace, mut confidence_trace) = (Vec::new(), Vec::new());
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| s.parse::<f64>().map_err(|_| bad("trace.csv"));
            if cols.len() == 3 {
                loss_trace.push(parse(cols[1])?);
                confidence_trace.push(parse(cols[2])?);
            }
        }
        let seeds = kv
            .iter()
            .filter_map(|(k, v)| Some((k.strip_prefix("seed.")?.to_string(), v.parse().ok()?)))
            .collect();
        Ok(Self {
            method: get("method")?.parse()?,
            target: num("target")?,
            image,
            loss_trace,
            confidence_trace,
            iterations_run: num("iterations")?,
            attacked_confidence: flt("attacked_confidence")?,
            transfer_confidence: kv.get("transfer_confidence").and_then(|v| v.parse().ok()),
            seeds,
            diverged: get("diverged")? == "true",
        })
    }
}
