//! Face dataset ingestion, the per-class train/val split and the
//! target/visible class partition.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

/// Expected shape of a dataset on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetLayout {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
}

impl DatasetLayout {
    pub const CANONICAL: DatasetLayout = DatasetLayout {
        classes: 40,
        per_class: 10,
        height: 64,
        width: 64,
    };

    pub fn len(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Images in canonical `[-1, 1]` range, stored as `[n, 1, h, w]`, with
/// index-aligned class labels.
#[derive(Debug, Clone)]
pub struct FaceDataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
}

/// Storage value in `[0, 1]` to canonical range.
#[inline]
pub fn normalize(v: f32) -> f32 {
    2.0 * v - 1.0
}

#[inline]
pub fn denormalize(x: f32) -> f32 {
    (x + 1.0) * 0.5
}

impl FaceDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!("dataset images must be [n, 1, h, w], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.batch_item(i)
    }

    pub fn subset(&self, idx: &[usize]) -> FaceDataset {
        FaceDataset {
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Dataset indices grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn to_gray(&self, i: usize) -> GrayImage {
        let img = self.image(i);
        GrayImage::from_canonical(self.width(), self.height(), img.data())
    }
}

/// Load with the canonical 40 x 10 x 64 x 64 layout.
pub fn load_dataset(path: &Path) -> Result<FaceDataset> {
    load_dataset_with(path, DatasetLayout::CANONICAL)
}

/// Load either a `class_<k>/img_<i>.pgm` directory tree or a packed
/// little-endian float32 file with an int32 `.labels` sidecar.
pub fn load_dataset_with(path: &Path, layout: DatasetLayout) -> Result<FaceDataset> {
    if !path.exists() {
        return Err(Error::Dataset(format!(
            "dataset path {} does not exist",
            path.display()
        )));
    }
    let (pixels, labels) = if path.is_dir() {
        read_pgm_tree(path, layout)?
    } else {
        read_packed(path, layout)?
    };
    check_counts(&labels, layout)?;
    // stable ordering by (class, position within class)
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    let plane = layout.height * layout.width;
    let mut data = Vec::with_capacity(pixels.len());
    for &i in &order {
        data.extend(pixels[i * plane..(i + 1) * plane].iter().map(|&v| normalize(v)));
    }
    let labels = order.iter().map(|&i| labels[i]).collect();
    let images = Tensor::from_vec([layout.len(), 1, layout.height, layout.width], data);
    FaceDataset::new(images, labels, layout.classes)
}

fn check_counts(labels: &[usize], layout: DatasetLayout) -> Result<()> {
    let mut counts = vec![0usize; layout.classes];
    for &l in labels {
        if l >= layout.classes {
            return Err(Error::Dataset(format!("class id {l} outside 0..{}", layout.classes)));
        }
        counts[l] += 1;
    }
    let deficient: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != layout.per_class)
        .map(|(k, c)| format!("class {k}: {c} images"))
        .collect();
    if !deficient.is_empty() {
        return Err(Error::Dataset(format!(
            "expected {} images for each of {} classes; {}",
            layout.per_class,
            layout.classes,
            deficient.join(", ")
        )));
    }
    Ok(())
}

fn numeric_suffix(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok()
}

fn read_pgm_tree(root: &Path, layout: DatasetLayout) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut classes: BTreeMap<usize, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = numeric_suffix(&name, "class_") {
            if entry.path().is_dir() {
                classes.insert(k, entry.path());
            }
        }
    }
    if classes.len() != layout.classes {
        return Err(Error::Dataset(format!(
            "found {} class directories under {}, expected {}",
            classes.len(),
            root.display(),
            layout.classes
        )));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (pos, (&k, dir)) in classes.iter().enumerate() {
        if k != pos {
            return Err(Error::Dataset(format!(
                "class directories must be numbered 0..{}, found class_{k}",
                layout.classes
            )));
        }
        let mut files: Vec<(usize, PathBuf)> = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(i) = name.strip_suffix(".pgm").and_then(|stem| numeric_suffix(stem, "img_")) {
                files.push((i, entry.path()));
            }
        }
        files.sort();
        for (_, f) in files {
            let img = GrayImage::load_pgm(&f)?;
            if (img.height, img.width) != (layout.height, layout.width) {
                return Err(Error::Dataset(format!(
                    "{} is {}x{}, expected {}x{}",
                    f.display(),
                    img.width,
                    img.height,
                    layout.width,
                    layout.height
                )));
            }
            pixels.extend(img.pixels.iter().map(|&b| b as f32 / 255.0));
            labels.push(k);
        }
    }
    Ok((pixels, labels))
}

/// Sidecar label file of a packed dataset.
pub fn labels_path(packed: &Path) -> PathBuf {
    packed.with_extension("labels")
}

fn read_packed(path: &Path, layout: DatasetLayout) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let plane = layout.height * layout.width;
    if bytes.len() % (4 * plane) != 0 {
        return Err(Error::Dataset(format!(
            "{}: {} bytes is not a whole number of {}x{} float32 images",
            path.display(),
            bytes.len(),
            layout.height,
            layout.width
        )));
    }
    let pixels: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Dataset(format!(
            "{}: pixel value {v} outside [0, 1]",
            path.display()
        )));
    }
    let lp = labels_path(path);
    let lb = std::fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
    if lb.len() % 4 != 0 {
        return Err(Error::Dataset(format!(
            "{}: length is not a multiple of 4",
            lp.display()
        )));
    }
    let mut labels = Vec::with_capacity(lb.len() / 4);
    for c in lb.chunks_exact(4) {
        let l = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if l < 0 {
            return Err(Error::Dataset(format!("negative label {l}")));
        }
        labels.push(l as usize);
    }
    if labels.len() * plane != pixels.len() {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            pixels.len() / plane,
            labels.len()
        )));
    }
    Ok((pixels, labels))
}

/// Write `images` (values in `[0, 1]`, row-major) and labels in the packed
/// layout.
pub fn write_packed(path: &Path, images: &[f32], labels: &[i32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(images.len() * 4);
    for v in images {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let lb: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    let lp = labels_path(path);
    std::fs::write(&lp, lb).map_err(|e| Error::io(&lp, e))
}

/// Which classes are attacked, which the adversary holds, and the
/// classifier train/val split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackScenario {
    /// Per class, dataset indices used for classifier training.
    pub train_index: Vec<Vec<usize>>,
    pub val_index: Vec<Vec<usize>>,
    pub target_classes: Vec<usize>,
    pub visible_classes: Vec<usize>,
    pub seed: u64,
}

impl AttackScenario {
    pub fn train_indices(&self) -> Vec<usize> {
        self.train_index.iter().flatten().copied().collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.val_index.iter().flatten().copied().collect()
    }
}

/// Number of training images per class; the rest go to validation.
pub const TRAIN_PER_CLASS: usize = 7;

/// Random 7/3 split within each class; the first half of the classes are
/// targets, the second half visible to the adversary.
pub fn make_scenario(ds: &FaceDataset, seed: u64) -> AttackScenario {
    make_scenario_with(ds, seed, TRAIN_PER_CLASS, ds.classes() / 2)
}

pub fn make_scenario_with(ds: &FaceDataset, seed: u64, train_per_class: usize, n_targets: usize) -> AttackScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_index = Vec::with_capacity(ds.classes());
    let mut val_index = Vec::with_capacity(ds.classes());
    for mut idx in ds.indices_by_class() {
        idx.shuffle(&mut rng);
        let k = train_per_class.min(idx.len());
        let mut tr = idx[..k].to_vec();
        let mut va = idx[k..].to_vec();
        tr.sort_unstable();
        va.sort_unstable();
        train_index.push(tr);
        val_index.push(va);
    }
    let n_targets = n_targets.min(ds.classes());
    AttackScenario {
        train_index,
        val_index,
        target_classes: (0..n_targets).collect(),
        visible_classes: (n_targets..ds.classes()).collect(),
        seed,
    }
}

/// Every image (train and val) of the adversary-visible classes.
pub fn visible_pool(ds: &FaceDataset, scenario: &AttackScenario) -> FaceDataset {
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| scenario.visible_classes.contains(&ds.labels()[i]))
        .collect();
    ds.subset(&idx)
}
