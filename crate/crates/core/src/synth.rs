//! Procedural stand-in for a small face dataset: each class is a fixed set
//! of facial proportions and markings, each image a perturbed rendering of
//! it (pose, lighting, expression, sensor noise).

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{normalize, write_packed, DatasetLayout, FaceDataset};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Identity {
    face_w: f32,
    face_h: f32,
    skin: f32,
    background: f32,
    hair_tone: f32,
    hairline: f32,
    side_hair: f32,
    eye_y: f32,
    eye_sep: f32,
    eye_rx: f32,
    eye_ry: f32,
    brow_gap: f32,
    brow_tilt: f32,
    brow_thick: f32,
    nose_len: f32,
    nose_w: f32,
    mouth_y: f32,
    mouth_w: f32,
    lip: f32,
    glasses: bool,
    beard: f32,
    cheek: f32,
}

impl Identity {
    fn draw(rng: &mut impl Rng) -> Self {
        Self {
            face_w: rng.random_range(0.27..0.38),
            face_h: rng.random_range(0.36..0.46),
            skin: rng.random_range(0.50..0.85),
            background: rng.random_range(0.05..0.35),
            hair_tone: rng.random_range(0.02..0.45),
            hairline: rng.random_range(-0.30..-0.12),
            side_hair: rng.random_range(0.0..0.08),
            eye_y: rng.random_range(-0.10..0.02),
            eye_sep: rng.random_range(0.10..0.17),
            eye_rx: rng.random_range(0.035..0.06),
            eye_ry: rng.random_range(0.018..0.035),
            brow_gap: rng.random_range(0.045..0.085),
            brow_tilt: rng.random_range(-0.35..0.35),
            brow_thick: rng.random_range(0.008..0.022),
            nose_len: rng.random_range(0.08..0.17),
            nose_w: rng.random_range(0.02..0.05),
            mouth_y: rng.random_range(0.17..0.27),
            mouth_w: rng.random_range(0.07..0.15),
            lip: rng.random_range(0.008..0.022),
            glasses: rng.random_bool(0.25),
            beard: if rng.random_bool(0.25) {
                rng.random_range(0.15..0.4)
            } else {
                0.0
            },
            cheek: rng.random_range(-0.08..0.08),
        }
    }
}

#[derive(Debug, Clone)]
struct Pose {
    dx: f32,
    dy: f32,
    angle: f32,
    scale: f32,
    light: f32,
    smile: f32,
    openness: f32,
    gaze: f32,
}

impl Pose {
    fn draw(rng: &mut impl Rng) -> Self {
        Self {
            dx: rng.random_range(-0.04..0.04),
            dy: rng.random_range(-0.04..0.04),
            angle: rng.random_range(-0.12..0.12),
            scale: rng.random_range(0.95..1.05),
            light: rng.random_range(-0.15..0.15),
            smile: rng.random_range(-0.015..0.035),
            openness: rng.random_range(0.6..1.0),
            gaze: rng.random_range(-0.012..0.012),
        }
    }
}

/// Soft inside-ness of a signed distance (negative inside), edge `w` wide.
#[inline]
fn cover(d: f32, w: f32) -> f32 {
    (0.5 - d / w).clamp(0.0, 1.0)
}

#[inline]
fn ellipse(u: f32, v: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let (a, b) = ((u - cx) / rx, (v - cy) / ry);
    ((a * a + b * b).sqrt() - 1.0) * rx.min(ry)
}

#[inline]
fn mix(base: f32, ink: f32, alpha: f32) -> f32 {
    base + (ink - base) * alpha
}

fn render(id: &Identity, pose: &Pose, size: usize, noise: &mut impl FnMut() -> f32) -> Vec<f32> {
    let px = 1.0 / size as f32;
    let edge = 1.5 * px;
    let (sin, cos) = pose.angle.sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            // centred coordinates in [-0.5, 0.5], then into the face frame
            let gx = (x as f32 + 0.5) * px - 0.5 - pose.dx;
            let gy = (y as f32 + 0.5) * px - 0.5 - pose.dy;
            let u = (cos * gx + sin * gy) / pose.scale;
            let v = (-sin * gx + cos * gy) / pose.scale;

            let mut c = id.background + 0.15 * (gy + 0.5) * (id.background - 0.5);

            // hair mass behind the head
            let hair = ellipse(u, v, 0.0, -0.04, id.face_w + id.side_hair + 0.03, id.face_h + 0.05);
            let hair_a = cover(hair, edge) * cover(v - (0.05 + id.side_hair * 2.0), edge);
            c = mix(c, id.hair_tone, hair_a);

            // face with directional lighting
            let face = ellipse(u, v, 0.0, 0.0, id.face_w, id.face_h);
            let lit = id.skin + pose.light * u / id.face_w + id.cheek * (v / id.face_h);
            c = mix(c, lit.clamp(0.0, 1.0), cover(face, edge));

            // fringe
            let fringe = cover(v - id.hairline, edge) * cover(face, edge);
            c = mix(c, id.hair_tone, fringe * cover(-(v - id.hairline) - 0.25, edge));

            if id.beard > 0.0 {
                let b = cover(-(v - (id.mouth_y - 0.04)), edge) * cover(face, edge);
                c = mix(c, id.hair_tone, b * id.beard);
            }

            for side in [-1.0f32, 1.0] {
                let ex = side * id.eye_sep;
                // brow: a thick tilted segment above each eye
                let bx = u - ex;
                let by = v - (id.eye_y - id.brow_gap) + side * id.brow_tilt * bx;
                let brow = by.abs().max(bx.abs() - id.eye_rx * 1.2) - id.brow_thick;
                c = mix(c, id.hair_tone, 0.9 * cover(brow, edge));
                // eye white, iris
                let e = ellipse(u, v, ex, id.eye_y, id.eye_rx, id.eye_ry * pose.openness);
                c = mix(c, 0.9, 0.8 * cover(e, edge));
                let r = id.eye_ry * pose.openness * 0.9;
                let iris = ellipse(u, v, ex + pose.gaze, id.eye_y, r, r);
                c = mix(c, 0.08, cover(iris, edge) * cover(e, edge));
                if id.glasses {
                    let ring = ellipse(u, v, ex, id.eye_y, id.eye_rx * 1.6, id.eye_rx * 1.3).abs() - 0.6 * px;
                    c = mix(c, 0.05, cover(ring, edge));
                }
            }
            if id.glasses {
                let bridge = (v - id.eye_y).abs().max(u.abs() - (id.eye_sep - id.eye_rx * 1.6)) - 0.6 * px;
                c = mix(c, 0.05, cover(bridge, edge));
            }

            // nose: shaded wedge below the eyes
            let nt = (v - id.eye_y) / id.nose_len;
            if (0.0..=1.0).contains(&nt) {
                let half = id.nose_w * nt;
                let d = (u.abs() - half).max(0.0);
                let shade = (1.0 - d / (2.0 * px)).clamp(0.0, 1.0) * nt;
                c = mix(c, c * 0.6, 0.6 * shade * (0.5 + 0.5 * (u + half).signum()));
            }
            let nostril = ellipse(u, v, 0.0, id.eye_y + id.nose_len, id.nose_w, 0.012);
            c = mix(c, c * 0.55, cover(nostril, edge));

            // mouth: a parabola with lip thickness
            let mt = u / id.mouth_w;
            if mt.abs() <= 1.0 {
                let curve = id.mouth_y + pose.smile * (1.0 - mt * mt);
                let d = (v - curve).abs() - id.lip * (1.0 - 0.5 * mt * mt);
                c = mix(c, 0.15, 0.85 * cover(d, edge));
            }

            out.push((c + noise()).clamp(0.0, 1.0));
        }
    }
    out
}

/// Render `layout.classes * layout.per_class` images, class-major, with
/// values in `[0, 1]`. Square layouts only.
pub fn synthetic_faces(layout: DatasetLayout, seed: u64) -> Vec<(usize, Vec<f32>)> {
    assert_eq!(layout.height, layout.width, "synthetic faces are square");
    let mut out = Vec::with_capacity(layout.len());
    let normal = Normal::new(0.0f32, 0.02).unwrap();
    for k in 0..layout.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + k as u64));
        let id = Identity::draw(&mut rng);
        for _ in 0..layout.per_class {
            let pose = Pose::draw(&mut rng);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut noise = || normal.sample(&mut noise_rng);
            out.push((k, render(&id, &pose, layout.height, &mut noise)));
        }
    }
    out
}

/// The synthetic faces as a dataset in the canonical range.
pub fn synthetic_dataset(layout: DatasetLayout, seed: u64) -> Result<FaceDataset> {
    let faces = synthetic_faces(layout, seed);
    let labels = faces.iter().map(|(k, _)| *k).collect();
    let data = faces
        .iter()
        .flat_map(|(_, p)| p.iter().map(|&v| normalize(v)))
        .collect();
    let images = Tensor::from_vec([layout.len(), 1, layout.height, layout.width], data);
    FaceDataset::new(images, labels, layout.classes)
}

/// Write the synthetic faces in the packed float32 layout.
pub fn write_synthetic_packed(path: &Path, layout: DatasetLayout, seed: u64) -> Result<()> {
    if path.exists() {
        return Err(Error::AlreadyExists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let faces = synthetic_faces(layout, seed);
    let images: Vec<f32> = faces.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let labels: Vec<i32> = faces.iter().map(|(k, _)| *k as i32).collect();
    write_packed(path, &images, &labels)
}

/// Quantise to 8 bits and write the `class_<k>/img_<i>.pgm` tree.
pub fn write_synthetic_tree(dir: &Path, layout: DatasetLayout, seed: u64) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
        return Err(Error::AlreadyExists(dir.to_path_buf()));
    }
    let mut counters = vec![0usize; layout.classes];
    for (k, pixels) in synthetic_faces(layout, seed) {
        let img = GrayImage {
            width: layout.width,
            height: layout.height,
            pixels: pixels.iter().map(|&v| (v * 255.0).round() as u8).collect(),
        };
        img.save(&dir.join(format!("class_{k}")).join(format!("img_{}.pgm", counters[k])))?;
        counters[k] += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let layout = DatasetLayout {
            classes: 3,
            per_class: 2,
            height: 32,
            width: 32,
        };
        let a = synthetic_faces(layout, 9);
        let b = synthetic_faces(layout, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|(_, p)| p.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a[0].1, a[1].1);
    }

    #[test]
    fn classes_are_further_apart_than_poses() {
        let layout = DatasetLayout {
            classes: 6,
            per_class: 4,
            height: 32,
            width: 32,
        };
        let faces = synthetic_faces(layout, 1);
        let dist = |a: &[f32], b: &[f32]| -> f32 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
        let mean = |k: usize| -> Vec<f32> {
            let mut m = vec![0.0; 32 * 32];
            for (_, p) in faces.iter().filter(|(c, _)| *c == k) {
                m.iter_mut().zip(p).for_each(|(a, b)| *a += b / 4.0);
            }
            m
        };
        let means: Vec<Vec<f32>> = (0..6).map(mean).collect();
        let within: f32 = faces.iter().map(|(k, p)| dist(p, &means[*k])).sum::<f32>() / 24.0;
        let mut between = 0.0;
        for i in 0..6 {
            for j in i + 1..6 {
                between += dist(&means[i], &means[j]) / 15.0;
            }
        }
        assert!(between > within, "between {between} within {within}");
    }
}
