//! Synthetic chest-film stand-in: a noisy body with two dark elliptical
//! lungs. Positive samples carry bright blobs inside the lungs; distractor
//! blobs outside the lungs appear in both classes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{write_manifest, ClsSample, ManifestKind, SegSample};
use super::{save_pgm, Image};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub side: usize,
    pub seed: u64,
    pub distractors: bool,
    /// Exactly half positives when set, otherwise each sample is positive
    /// with probability 1/4.
    pub balanced: bool,
    pub noise: f32,
}

impl SynthConfig {
    pub fn new(n: usize, side: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            side,
            seed,
            distractors: true,
            balanced: true,
            noise: 0.04,
        }
    }
}

/// Semi-axis ranges as fractions of the side length.
pub const LUNG_HALF_WIDTH: (f64, f64) = (0.12, 0.16);
pub const LUNG_HALF_HEIGHT: (f64, f64) = (0.24, 0.30);

const BODY_LEVEL: f32 = 0.5;
const LUNG_LEVEL: f32 = 0.2;

/// Axis-aligned ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Whether the point lies inside the ellipse scaled by `scale`.
    pub fn contains_scaled(&self, x: f64, y: f64, scale: f64) -> bool {
        let dx = (x - self.cx) / (self.rx * scale);
        let dy = (y - self.cy) / (self.ry * scale);
        dx * dx + dy * dy <= 1.0
    }

    /// Membership of pixel `(row, col)`, tested at the pixel centre.
    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        self.contains_scaled(col as f64 + 0.5, row as f64 + 0.5, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    pub mask: Image,
    pub label: u8,
    pub lungs: [Ellipse; 2],
    pub opacities: usize,
    pub distractors: usize,
}

impl SynthSample {
    pub fn seg(&self, id: String) -> SegSample {
        SegSample {
            image: self.image.clone(),
            mask: self.mask.clone(),
            id,
        }
    }

    pub fn cls(&self, id: String) -> ClsSample {
        ClsSample {
            image: self.image.clone(),
            label: self.label,
            id,
        }
    }
}

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

fn random_blob<R: Rng>(rng: &mut R, side: f64, accept: impl Fn(f64, f64) -> bool) -> Blob {
    loop {
        let x = rng.random_range(0.0..side);
        let y = rng.random_range(0.0..side);
        if accept(x, y) {
            return Blob {
                x,
                y,
                sigma: side * rng.random_range(0.04..0.07),
                amp: rng.random_range(0.3..0.45),
            };
        }
    }
}

fn one_sample<R: Rng>(rng: &mut R, cfg: &SynthConfig, label: u8) -> SynthSample {
    let s = cfg.side as f64;
    let lung = |rng: &mut R, cx: f64| Ellipse {
        cx: s * (cx + rng.random_range(-0.03..0.03)),
        cy: s * (0.5 + rng.random_range(-0.04..0.04)),
        rx: s * rng.random_range(LUNG_HALF_WIDTH.0..LUNG_HALF_WIDTH.1),
        ry: s * rng.random_range(LUNG_HALF_HEIGHT.0..LUNG_HALF_HEIGHT.1),
    };
    let lungs = [lung(rng, 0.30), lung(rng, 0.70)];
    let mut blobs = Vec::new();
    let opacities = if label == 1 {
        rng.random_range(1..=3)
    } else {
        0
    };
    for _ in 0..opacities {
        let target = lungs[rng.random_range(0..2)];
        blobs.push(random_blob(rng, s, |x, y| {
            target.contains_scaled(x, y, 0.7)
        }));
    }
    let distractors = if cfg.distractors {
        rng.random_range(1..=3)
    } else {
        0
    };
    for _ in 0..distractors {
        blobs.push(random_blob(rng, s, |x, y| {
            lungs.iter().all(|l| !l.contains_scaled(x, y, 1.25))
        }));
    }
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).expect("finite noise level");
    let n = cfg.side;
    let mut pixels = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let inside = lungs.iter().any(|l| l.contains_pixel(row, col));
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let mut v = if inside {
                LUNG_LEVEL
            } else {
                BODY_LEVEL + 0.1 * (row as f32 / n as f32)
            };
            for b in &blobs {
                let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                v += (b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp()) as f32;
            }
            v += noise.sample(rng);
            pixels.push(v.clamp(0.0, 1.0));
            mask.push(f32::from(u8::from(inside)));
        }
    }
    SynthSample {
        image: Image::new(n, n, pixels).expect("square image"),
        mask: Image::new(n, n, mask).expect("square mask"),
        label,
        lungs,
        opacities,
        distractors,
    }
}

/// Deterministic in `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    if cfg.n == 0 || cfg.side < 8 {
        return Err(Error::Invalid(format!(
            "synthetic set needs n >= 1 and side >= 8, got n={} side={}",
            cfg.n, cfg.side
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<u8> = if cfg.balanced {
        let mut l: Vec<u8> = (0..cfg.n).map(|i| (i % 2) as u8).collect();
        l.shuffle(&mut rng);
        l
    } else {
        (0..cfg.n)
            .map(|_| u8::from(rng.random_bool(0.25)))
            .collect()
    };
    Ok(labels
        .iter()
        .map(|&l| one_sample(&mut rng, cfg, l))
        .collect())
}

/// Number of training samples when `n` samples are split train/test.
pub fn train_count(n: usize) -> usize {
    n - n / 5
}

/// Writes `{split}/{class}/img_%05d.pgm` (+ `mask_%05d.pgm`) under `out`,
/// the first 80% as `train` and the rest as `test`, plus the manifests
/// `seg_train.csv`, `seg_test.csv`, `cls_train.csv`, `cls_test.csv`.
pub fn write_dataset(out: &Path, samples: &[SynthSample]) -> Result<()> {
    let n_train = train_count(samples.len());
    let mut seg = [Vec::new(), Vec::new()];
    let mut cls = [Vec::new(), Vec::new()];
    for (i, s) in samples.iter().enumerate() {
        let split = usize::from(i >= n_train);
        let dir = format!("{}/{}", ["train", "test"][split], s.label);
        fs::create_dir_all(out.join(&dir)).map_err(|e| Error::io(out.join(&dir), e))?;
        let img = format!("{dir}/img_{i:05}.pgm");
        let mask = format!("{dir}/mask_{i:05}.pgm");
        save_pgm(&out.join(&img), &s.image)?;
        save_pgm(&out.join(&mask), &s.mask)?;
        seg[split].push((img.clone(), mask));
        cls[split].push((img, s.label.to_string()));
    }
    for (split, name) in ["train", "test"].iter().enumerate() {
        write_manifest(
            &out.join(format!("seg_{name}.csv")),
            ManifestKind::Seg,
            &seg[split],
        )?;
        write_manifest(
            &out.join(format!("cls_{name}.csv")),
            ManifestKind::Cls,
            &cls[split],
        )?;
    }
    Ok(())
}
