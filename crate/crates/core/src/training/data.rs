//! Synthetic "organ" segmentation data and augmentation.

use std::f32::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

use super::io::{read_image, read_mask};

/// One image with its per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[channels, height, width]`.
    pub image: Vec<f32>,
    /// `[height, width]`.
    pub mask: Vec<u8>,
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub samples: usize,
    pub size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub seed: u64,
    #[serde(serialize_with = "shortest_f32")]
    pub noise_std: f32,
    /// Accepted range of each foreground class's visible pixel fraction.
    #[serde(serialize_with = "shortest_f32")]
    pub min_fraction: f32,
    #[serde(serialize_with = "shortest_f32")]
    pub max_fraction: f32,
}

/// Writes an f32 as the f64 with the same shortest decimal form, so config
/// dumps show `0.08` rather than its widened binary value.
fn shortest_f32<S: serde::Serializer>(v: &f32, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(v.to_string().parse().expect("f32 display parses as f64"))
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 200,
            size: 128,
            channels: 1,
            num_classes: 4,
            seed: 7,
            noise_std: 0.08,
            min_fraction: 0.01,
            max_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32, angle: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Annulus { cy: f32, cx: f32, inner: f32, outer: f32 },
}

impl Shape {
    fn random(kind: usize, size: f32, rng: &mut ChaCha8Rng) -> Shape {
        let centre = |rng: &mut ChaCha8Rng| (rng.gen_range(0.2..0.8) * size, rng.gen_range(0.2..0.8) * size);
        match kind % 3 {
            0 => {
                let (cy, cx) = centre(rng);
                Shape::Ellipse {
                    cy,
                    cx,
                    ry: rng.gen_range(0.08..0.2) * size,
                    rx: rng.gen_range(0.08..0.2) * size,
                    angle: rng.gen_range(0.0..PI),
                }
            }
            1 => {
                let (h, w) = (rng.gen_range(0.1..0.3) * size, rng.gen_range(0.1..0.3) * size);
                let y0 = rng.gen_range(0.05..0.95 - h / size) * size;
                let x0 = rng.gen_range(0.05..0.95 - w / size) * size;
                Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
            }
            _ => {
                let (cy, cx) = centre(rng);
                let outer = rng.gen_range(0.1..0.18) * size;
                Shape::Annulus { cy, cx, inner: outer * rng.gen_range(0.4..0.65), outer }
            }
        }
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Annulus { cy, cx, inner, outer } => {
                let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                r2 <= outer * outer && r2 >= inner * inner
            }
        }
    }
}

/// Characteristic brightness of class `k` (background is textured around 0.2).
fn class_intensity(k: usize, num_classes: usize) -> f32 {
    0.2 + 0.7 * k as f32 / (num_classes - 1) as f32
}

const MAX_ATTEMPTS: usize = 10_000;

fn synth_sample(cfg: &SynthConfig, index: u64) -> Result<SegSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let n = cfg.size;
    let k = cfg.num_classes;
    let mut mask = vec![0u8; n * n];
    let mut attempt = 0;
    loop {
        attempt += 1;
        if attempt > MAX_ATTEMPTS {
            return Err(config_err!(
                "could not place {} classes within fractions [{}, {}] on a {n}x{n} image",
                k - 1,
                cfg.min_fraction,
                cfg.max_fraction
            ));
        }
        mask.fill(0);
        // later classes occlude earlier ones
        for class in 1..k {
            let shape = Shape::random(class - 1, n as f32, &mut rng);
            for y in 0..n {
                for x in 0..n {
                    if shape.contains(y as f32 + 0.5, x as f32 + 0.5) {
                        mask[y * n + x] = class as u8;
                    }
                }
            }
        }
        let mut counts = vec![0usize; k];
        mask.iter().for_each(|&c| counts[c as usize] += 1);
        let total = (n * n) as f32;
        if counts[1..]
            .iter()
            .all(|&c| (cfg.min_fraction..=cfg.max_fraction).contains(&(c as f32 / total)))
        {
            break;
        }
    }
    let noise = Normal::new(0.0f32, cfg.noise_std).map_err(|e| config_err!("noise_std: {e}"))?;
    let (f1, f2) = (rng.gen_range(0.02..0.08), rng.gen_range(0.02..0.08));
    let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let jitter: Vec<f32> = (0..k).map(|_| rng.gen_range(-0.04..0.04)).collect();
    let mut gray = vec![0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let c = mask[y * n + x] as usize;
            let base = if c == 0 {
                0.2 + 0.06 * (f1 * x as f32 + p1).sin() * (f2 * y as f32 + p2).cos()
            } else {
                class_intensity(c, k)
            };
            let v = base + jitter[c] + noise.sample(&mut rng);
            gray[y * n + x] = v.clamp(0.0, 1.0);
        }
    }
    let image = (0..cfg.channels).flat_map(|_| gray.iter().copied()).collect();
    Ok(SegSample {
        id: format!("synth_{index:04}"),
        channels: cfg.channels,
        height: n,
        width: n,
        image,
        mask,
    })
}

/// Deterministic dataset: sample `i` depends only on `(seed, i)`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<SegSample>> {
    if cfg.num_classes < 2 || cfg.num_classes > 256 {
        return Err(config_err!("num_classes must be in 2..=256, got {}", cfg.num_classes));
    }
    if cfg.size == 0 || cfg.channels == 0 {
        return Err(config_err!("size and channels must be positive"));
    }
    (0..cfg.samples as u64).map(|i| synth_sample(cfg, i)).collect()
}

/// Splits off the last `val_fraction` of samples for validation.
pub fn split(mut samples: Vec<SegSample>, val_fraction: f64) -> (Vec<SegSample>, Vec<SegSample>) {
    let n_val = ((samples.len() as f64) * val_fraction).round() as usize;
    let val = samples.split_off(samples.len() - n_val.min(samples.len()));
    (samples, val)
}

/// Loads `images/<stem>.{pgm,ppm}` paired with `masks/<stem>.pgm`, sorted by name.
pub fn load_dir(dir: &Path) -> Result<Vec<SegSample>> {
    let images = dir.join("images");
    let entries = std::fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = read_image(p)?;
            let stem = p.file_stem().expect("file has a stem");
            let mask_path = dir.join("masks").join(stem).with_extension("pgm");
            let (h, w, mask) = read_mask(&mask_path)?;
            if (h, w) != (img.height, img.width) {
                return Err(Error::Format(format!(
                    "{}: mask is {h}x{w}, image is {}x{}",
                    mask_path.display(),
                    img.height,
                    img.width
                )));
            }
            Ok(SegSample {
                id: stem.to_string_lossy().into_owned(),
                channels: img.channels,
                height: h,
                width: w,
                image: img.data,
                mask,
            })
        })
        .collect()
}

/// Geometric transform applied identically to image and mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Quarter turns counter-clockwise, `0..4`.
    pub quarter_turns: u8,
}

/// Augmentation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip: true, rotate: true }
    }
}

impl Transform {
    /// Flips with probability 1/2 each; a 90/180/270 degree rotation with probability 1/2.
    pub fn sample(cfg: AugmentConfig, rng: &mut impl Rng) -> Transform {
        let mut t = Transform::default();
        if cfg.flip {
            t.flip_h = rng.gen_bool(0.5);
            t.flip_v = rng.gen_bool(0.5);
        }
        if cfg.rotate && rng.gen_bool(0.5) {
            t.quarter_turns = rng.gen_range(1..4);
        }
        t
    }

    /// Source position of output pixel `(y, x)` in an `n x n` plane.
    fn source(&self, n: usize, y: usize, x: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        // undo the rotation first, then the flips
        for _ in 0..self.quarter_turns {
            (y, x) = (x, n - 1 - y);
        }
        if self.flip_v {
            y = n - 1 - y;
        }
        if self.flip_h {
            x = n - 1 - x;
        }
        (y, x)
    }

    fn plane<T: Copy>(&self, src: &[T], n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = self.source(n, y, x);
                out.push(src[sy * n + sx]);
            }
        }
        out
    }

    pub fn apply(&self, s: &SegSample) -> SegSample {
        if *self == Transform::default() {
            return s.clone();
        }
        assert_eq!(s.height, s.width, "geometric augmentation needs square samples");
        let n = s.height;
        let image = s.image.chunks_exact(n * n).flat_map(|p| self.plane(p, n)).collect();
        SegSample {
            image,
            mask: self.plane(&s.mask, n),
            ..s.clone()
        }
    }
}

/// Stacks samples into an image batch `[B, C, H, W]` and flat labels.
pub fn collate(samples: &[&SegSample]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut image = Vec::with_capacity(samples.len() * c * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {c}x{h}x{w} and {}x{}x{} samples",
                s.channels, s.height, s.width
            )));
        }
        image.extend_from_slice(&s.image);
        labels.extend(s.mask.iter().map(|&l| l as usize));
    }
    Ok((Tensor::new([samples.len(), c, h, w], image)?, labels))
}

/// Epoch order and augmentation, drawn from a stream unique to `(seed, epoch)`.
pub fn epoch_plan(seed: u64, epoch: usize, len: usize, aug: AugmentConfig) -> Vec<(usize, Transform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| (i, Transform::sample(aug, &mut rng)))
        .collect()
}
