//! Datasets: IDX file I/O and deterministic synthetic generators.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, standard_normal, stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples stored as flattened `[n, d]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Shape of one sample, e.g. `[1, 28, 28]` or `[2]`.
    pub sample_shape: Vec<usize>,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if inputs.rank() != 2 || inputs.row_len() != d {
            return Err(Error::shape("dataset inputs", &[labels.len(), d], inputs.shape()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::CountMismatch(format!(
                "{} samples but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            sample_shape,
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.row_len()
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), d], data)?, labels))
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (inputs, labels) = self.batch(&idx)?;
        Dataset::new(self.sample_shape.clone(), inputs, labels, self.num_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            what,
            detail: format!("header ends before byte {}", offset + 4),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &'static str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic { what, expected, found });
    }
    Ok(())
}

/// Parses an IDX image/label pair. Pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    check_magic(images, IDX_IMAGES_MAGIC, "IDX images")?;
    check_magic(labels, IDX_LABELS_MAGIC, "IDX labels")?;
    let n = be_u32(images, 4, "IDX images")? as usize;
    let rows = be_u32(images, 8, "IDX images")? as usize;
    let cols = be_u32(images, 12, "IDX images")? as usize;
    let n_labels = be_u32(labels, 4, "IDX labels")? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch(format!(
            "IDX images file holds {n} images but labels file holds {n_labels} labels"
        )));
    }
    let pixels = &images[16..];
    let want = n * rows * cols;
    if pixels.len() < want {
        return Err(Error::Truncated {
            what: "IDX images",
            detail: format!("expected {want} pixel bytes, found {}", pixels.len()),
        });
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n {
        return Err(Error::Truncated {
            what: "IDX labels",
            detail: format!("expected {n} label bytes, found {}", label_bytes.len()),
        });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("IDX files hold no samples".into()));
    }
    let inputs = Tensor::new(
        vec![n, rows * cols],
        pixels[..want].iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = label_bytes[..n].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(vec![1, rows, cols], inputs, labels, num_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx(&images, &labels)
}

/// Encodes a dataset of `[1, H, W]` or `[H, W]` samples as IDX bytes.
/// Values are rounded to the nearest of 256 levels in [0, 1].
pub fn encode_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match dataset.sample_shape.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        other => {
            return Err(Error::InvalidArgument(format!(
                "IDX images need [H, W] samples, got {other:?}"
            )))
        }
    };
    if dataset.num_classes > 256 {
        return Err(Error::InvalidArgument("IDX labels hold at most 256 classes".into()));
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.inputs.len());
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend(
        dataset
            .inputs
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut labels = Vec::with_capacity(8 + dataset.len());
    for v in [IDX_LABELS_MAGIC, n] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend(dataset.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = encode_idx(dataset)?;
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, images).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, labels).map_err(|e| Error::io(lp, e))
}

/// Synthetic dataset families.
///
/// * `blobs`: class `c` is centred at `0.5 + 0.3·(cos θ_c, sin θ_c)` in the
///   first two coordinates, `θ_c = 2πc/C`, and at 0.5 elsewhere; isotropic
///   Gaussian noise with σ = `spread`; values clamped to [0, 1].
/// * `two_moons`: the classic interleaved half circles
///   `(cos t, sin t)` and `(1 − cos t, 0.5 − sin t)`, `t ~ U[0, π]`, plus
///   Gaussian noise σ = `noise`, mapped affinely from `[-1, 2] × [-0.5, 1]`
///   into the unit square and clamped.
/// * `glyphs`: 28×28 seven-segment digit images (10 classes) with random
///   placement, stroke width, intensity, per-segment wobble and pixel noise,
///   quantized to 256 levels so they round-trip through IDX unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Synthetic {
    Blobs {
        classes: usize,
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    TwoMoons {
        #[serde(default = "default_moon_noise")]
        noise: f64,
    },
    Glyphs,
}

fn default_spread() -> f64 {
    0.05
}

fn default_moon_noise() -> f64 {
    0.1
}

/// Balanced labels `i mod C`, shuffled.
fn balanced_labels(n: usize, classes: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

pub fn gen_synthetic(kind: &Synthetic, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = rng_from(seed, &[stream::DATA]);
    match kind {
        Synthetic::Blobs { classes, dim, spread } => {
            if *classes < 2 || *dim < 2 || !(*spread >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "blobs need classes >= 2, dim >= 2 and spread >= 0, got {kind:?}"
                )));
            }
            let labels = balanced_labels(n, *classes, &mut rng);
            let mut data = Vec::with_capacity(n * dim);
            for &c in &labels {
                let theta = 2.0 * PI * c as f64 / *classes as f64;
                let noise = standard_normal(&mut rng, *dim);
                for (j, e) in noise.into_iter().enumerate() {
                    let center = match j {
                        0 => 0.5 + 0.3 * theta.cos(),
                        1 => 0.5 + 0.3 * theta.sin(),
                        _ => 0.5,
                    };
                    data.push((center + spread * e).clamp(0.0, 1.0));
                }
            }
            Dataset::new(vec![*dim], Tensor::new(vec![n, *dim], data)?, labels, *classes)
        }
        Synthetic::TwoMoons { noise } => {
            if !(*noise >= 0.0) {
                return Err(Error::InvalidArgument(format!("two-moons noise must be >= 0, got {noise}")));
            }
            let labels = balanced_labels(n, 2, &mut rng);
            let angle = Uniform::new(0.0, PI).expect("valid range");
            let mut data = Vec::with_capacity(n * 2);
            for &c in &labels {
                let t = angle.sample(&mut rng);
                let (x, y) = if c == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let e = standard_normal(&mut rng, 2);
                data.push(((x + noise * e[0] + 1.0) / 3.0).clamp(0.0, 1.0));
                data.push(((y + noise * e[1] + 0.5) / 1.5).clamp(0.0, 1.0));
            }
            Dataset::new(vec![2], Tensor::new(vec![n, 2], data)?, labels, 2)
        }
        Synthetic::Glyphs => {
            let labels = balanced_labels(n, 10, &mut rng);
            let mut data = Vec::with_capacity(n * GLYPH_SIDE * GLYPH_SIDE);
            for &c in &labels {
                data.extend(render_glyph(c, &mut rng));
            }
            Dataset::new(
                vec![1, GLYPH_SIDE, GLYPH_SIDE],
                Tensor::new(vec![n, GLYPH_SIDE * GLYPH_SIDE], data)?,
                labels,
                10,
            )
        }
    }
}

const GLYPH_SIDE: usize = 28;

/// Segments lit per digit, in the order top, upper right, lower right,
/// bottom, lower left, upper left, middle.
const DIGIT_SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn render_glyph(digit: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let ox = 9.0 + rng.random_range(-3..=3) as f64;
    let oy = 5.0 + rng.random_range(-2..=2) as f64;
    let w = 10.0 + rng.random_range(-1..=1) as f64;
    let h = 18.0;
    let half = rng.random_range(0.8..1.4);
    let intensity = rng.random_range(0.7..1.0);
    let slant = rng.random_range(-0.15..0.15);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h / 2.0), (w, h), (0.0, h), (0.0, h / 2.0)];
    // (start corner, end corner) for each segment.
    let ends = [(0, 1), (1, 2), (2, 3), (4, 3), (5, 4), (0, 5), (5, 2)];
    let mut img = vec![0.0f64; GLYPH_SIDE * GLYPH_SIDE];
    for (seg, &(a, b)) in ends.iter().enumerate() {
        if !DIGIT_SEGMENTS[digit][seg] {
            continue;
        }
        let wobble = |rng: &mut crate::rng::Rng| rng.random_range(-0.7..0.7);
        let place = |(x, y): (f64, f64), rng: &mut crate::rng::Rng| {
            (ox + x + slant * (h - y) + wobble(rng), oy + y + wobble(rng))
        };
        let (x0, y0) = place(corners[a], rng);
        let (x1, y1) = place(corners[b], rng);
        for py in 0..GLYPH_SIDE {
            for px in 0..GLYPH_SIDE {
                let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                let dist = segment_distance(cx, cy, x0, y0, x1, y1);
                let v = (half + 0.5 - dist).clamp(0.0, 1.0) * intensity;
                let p = &mut img[py * GLYPH_SIDE + px];
                *p = p.max(v);
            }
        }
    }
    let noise = standard_normal(rng, img.len());
    img.iter()
        .zip(noise)
        .map(|(&v, e)| {
            let v = (v + 0.05 * e).clamp(0.0, 1.0);
            (v * 255.0).round() / 255.0
        })
        .collect()
}

fn segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (x0 + t * dx, y0 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_idx() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4]);
        let mut labels = Vec::new();
        for v in [IDX_LABELS_MAGIC, 2] {
            labels.extend_from_slice(&v.to_be_bytes());
        }
        labels.extend_from_slice(&[3, 7]);
        (images, labels)
    }

    #[test]
    fn parses_hand_built_pair() {
        let (images, labels) = tiny_idx();
        let ds = parse_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape, vec![1, 2, 2]);
        assert_eq!(ds.inputs.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels, vec![3, 7]);
        assert_eq!(ds.num_classes, 8);
    }

    #[test]
    fn swapped_magic_is_bad_magic() {
        let (images, labels) = tiny_idx();
        let err = parse_idx(&labels, &images).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncation_and_count_errors_differ() {
        let (images, labels) = tiny_idx();
        assert!(matches!(
            parse_idx(&images[..images.len() - 1], &labels),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(parse_idx(&images[..10], &labels), Err(Error::Truncated { .. })));
        let mut short_labels = labels.clone();
        short_labels[7] = 3;
        assert!(matches!(parse_idx(&images, &short_labels), Err(Error::CountMismatch(_))));
    }

    #[test]
    fn glyphs_round_trip_through_idx() {
        let ds = gen_synthetic(&Synthetic::Glyphs, 12, 4).unwrap();
        let (images, labels) = encode_idx(&ds).unwrap();
        let back = parse_idx(&images, &labels).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn balanced_and_deterministic() {
        let kind = Synthetic::Blobs {
            classes: 3,
            dim: 4,
            spread: 0.05,
        };
        let a = gen_synthetic(&kind, 31, 5).unwrap();
        assert_eq!(a, gen_synthetic(&kind, 31, 5).unwrap());
        assert_ne!(a, gen_synthetic(&kind, 31, 6).unwrap());
        let counts = a.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(a.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn glyph_classes_differ() {
        let ds = gen_synthetic(&Synthetic::Glyphs, 20, 1).unwrap();
        let ink = |i: usize| ds.inputs.row(i).iter().sum::<f64>();
        let one = (0..20).find(|&i| ds.labels[i] == 1).unwrap();
        let eight = (0..20).find(|&i| ds.labels[i] == 8).unwrap();
        assert!(ink(eight) > 2.0 * ink(one));
    }
}
