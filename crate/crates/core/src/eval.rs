//! Transfer confidence under a held-out classifier, report tables and image
//! grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::image::{grid, GrayImage};
use crate::result::{AttackResult, Method};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "target_id,method,attacked_confidence,transfer_confidence,artifact_path,seed";

/// Softmax probability of `target` under the evaluation classifier, and the
/// raw logits.
pub fn transfer_confidence(eval: &Classifier<f32>, image: &Tensor<f32>, target: usize) -> Result<(f64, Vec<f32>)> {
    eval.check_input(image.shape())?;
    if image.shape()[0] != 1 {
        return Err(Error::Shape("transfer confidence takes one image".into()));
    }
    if target >= eval.classes() {
        return Err(Error::Config(format!("target {target} out of range")));
    }
    let logits = eval.logits(image)?;
    let probs = crate::graph::softmax_rows(&logits);
    Ok((probs.data()[target] as f64, logits.data().to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub attacked_confidence: f64,
    pub transfer_confidence: f64,
    pub logits: Vec<f32>,
    pub artifact_path: String,
    pub seed: u64,
}

/// One attack artifact to score.
#[derive(Debug, Clone)]
pub struct ReportInput {
    pub result: AttackResult,
    pub artifact_path: String,
}

#[derive(Debug, Clone, Default)]
pub struct EvaluationReport {
    /// Keyed by 0-based target and method.
    pub cells: BTreeMap<(usize, Method), ReportCell>,
    pub eval_checksum: String,
    pub attacked_checksum: String,
    pub warnings: Vec<String>,
}

/// Score every result under `eval`. Duplicate cells keep the later input.
/// Fails when `eval` is the attacked classifier.
pub fn build_report(
    inputs: &[ReportInput],
    eval: &Classifier<f32>,
    attacked_checksum: &str,
) -> Result<EvaluationReport> {
    let eval_checksum = eval.params().checksum();
    if eval_checksum == attacked_checksum {
        return Err(Error::Config("evaluation classifier is the attacked classifier".into()));
    }
    let mut report = EvaluationReport {
        eval_checksum,
        attacked_checksum: attacked_checksum.to_string(),
        ..Default::default()
    };
    for input in inputs {
        let r = &input.result;
        let (transfer, logits) = transfer_confidence(eval, &r.image, r.target)?;
        let key = (r.target, r.method);
        if report.cells.contains_key(&key) {
            let w = format!(
                "duplicate cell target {} method {}: keeping {}",
                r.target + 1,
                r.method,
                input.artifact_path
            );
            log::warn!("{w}");
            report.warnings.push(w);
        }
        report.cells.insert(
            key,
            ReportCell {
                attacked_confidence: r.attacked_confidence,
                transfer_confidence: transfer,
                logits,
                artifact_path: input.artifact_path.clone(),
                seed: r.seed(),
            },
        );
    }
    Ok(report)
}

impl EvaluationReport {
    pub fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.cells.keys().map(|k| k.0).collect();
        t.dedup();
        t
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.cells.keys().map(|k| k.1).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn get(&self, target: usize, method: Method) -> Option<&ReportCell> {
        self.cells.get(&(target, method))
    }

    /// One row per cell, targets 1-based.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for ((t, m), c) in &self.cells {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                t + 1,
                m,
                c.attacked_confidence,
                c.transfer_confidence,
                c.artifact_path,
                c.seed
            )
            .unwrap();
        }
        s
    }

    /// Target-by-method matrix of transfer confidences, `-` for missing
    /// cells, followed by each method's best target.
    pub fn to_table(&self) -> String {
        let methods = self.methods();
        let mut s = format!("{:<10}", "");
        for m in &methods {
            write!(s, "{:>12}", m.as_str()).unwrap();
        }
        s.push('\n');
        for t in self.targets() {
            write!(s, "{:<10}", format!("person {}", t + 1)).unwrap();
            for &m in &methods {
                match self.get(t, m) {
                    Some(c) => write!(s, "{:>12.4}", c.transfer_confidence).unwrap(),
                    None => write!(s, "{:>12}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        for &m in &methods {
            let best = self
                .cells
                .iter()
                .filter(|(k, _)| k.1 == m)
                .max_by(|a, b| a.1.transfer_confidence.total_cmp(&b.1.transfer_confidence));
            if let Some(((t, _), c)) = best {
                writeln!(s, "best {m}: person {} ({:.4})", t + 1, c.transfer_confidence).unwrap();
            }
        }
        writeln!(s, "evaluation classifier {}", self.eval_checksum).unwrap();
        writeln!(s, "attacked classifier {}", self.attacked_checksum).unwrap();
        s
    }

    /// Write `report.csv` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.csv", self.to_csv()), ("report.txt", self.to_table())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Lay `images` out row-major, `cols` per row, with a label strip under
/// each, and write the result to `path`.
pub fn export_grid(images: &[GrayImage], labels: &[String], cols: usize, path: &Path) -> Result<GrayImage> {
    let g = grid(images, labels, cols)?;
    g.save(path)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Arch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clf(seed: u64) -> Classifier<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Classifier::new(Arch::Cnn2, 8, 8, 40, &mut rng).unwrap()
    }

    fn result(target: usize, method: Method, v: f32) -> ReportInput {
        ReportInput {
            result: AttackResult {
                method,
                target,
                image: Tensor::full([1, 1, 8, 8], v),
                loss_trace: vec![1.0],
                confidence_trace: vec![0.5],
                iterations_run: 0,
                attacked_confidence: 0.5,
                transfer_confidence: None,
                seeds: BTreeMap::from([("attack".into(), 9)]),
                diverged: false,
            },
            artifact_path: format!("results/{method}-{target}-{v}"),
        }
    }

    #[test]
    fn uniform_classifier_gives_chance() {
        let mut c = clf(0);
        let n = c.params().len();
        for i in [n - 2, n - 1] {
            c.params_mut().get_mut(i).data_mut().fill(0.0);
        }
        let (p, logits) = transfer_confidence(&c, &Tensor::full([1, 1, 8, 8], 0.3), 4).unwrap();
        assert!((p - 0.025).abs() < 1e-7);
        assert_eq!(logits.len(), 40);
        assert!(transfer_confidence(&c, &Tensor::zeros([1, 1, 4, 4]), 0).is_err());
    }

    #[test]
    fn grid_shapes_and_duplicates() {
        let (a, e) = (clf(1), clf(2));
        let attacked = a.params().checksum();
        assert!(build_report(&[], &a, &attacked).is_err());

        let empty = build_report(&[], &e, &attacked).unwrap();
        assert!(empty.cells.is_empty());
        assert_eq!(empty.to_csv(), format!("{CSV_HEADER}\n"));

        let one = build_report(&[result(7, Method::Diffusion, 0.1)], &e, &attacked).unwrap();
        assert_eq!((one.targets().len(), one.methods().len()), (1, 1));
        assert!(one.to_csv().contains("\n8,diffusion,"));

        let mut inputs = Vec::new();
        for t in [7, 6] {
            for m in [Method::Gan, Method::Vae, Method::Diffusion] {
                inputs.push(result(t, m, 0.2));
            }
        }
        let full = build_report(&inputs, &e, &attacked).unwrap();
        assert_eq!(full.cells.len(), 6);
        assert_eq!(full.to_csv().lines().count(), 7);
        assert!(full.warnings.is_empty());
        let again = build_report(&inputs, &e, &attacked).unwrap();
        assert_eq!(full.to_csv(), again.to_csv());

        let sparse = build_report(&inputs[..4], &e, &attacked).unwrap();
        let table = sparse.to_table();
        assert!(table.lines().nth(1).unwrap().contains('-'), "{table}");

        inputs.push(result(7, Method::Gan, -0.4));
        let dup = build_report(&inputs, &e, &attacked).unwrap();
        assert_eq!(dup.warnings.len(), 1);
        assert_eq!(dup.get(7, Method::Gan).unwrap().artifact_path, "results/gan-7--0.4");
    }

    #[test]
    fn grid_export() {
        let dir = tempfile::tempdir().unwrap();
        let tile = GrayImage::from_canonical(8, 8, &[0.0; 64]);
        let tiles = vec![tile; 8];
        let labels: Vec<String> = (0..8).map(|i| format!("{i}")).collect();
        let g = export_grid(&tiles, &labels, 4, &dir.path().join("g.png")).unwrap();
        let one = export_grid(&tiles[..1], &labels[..1], 4, &dir.path().join("one.pgm")).unwrap();
        assert_eq!(g.width, 4 * one.width);
        assert_eq!(g.height, 2 * one.height);
        assert!(export_grid(&[], &[], 4, &dir.path().join("none.png")).is_err());
    }
}
