//! Seeded synthetic classification tasks.

use std::f64::consts::PI;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{standard_normal, Tensor};

fn check(classes: usize, n_train: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if n_train < classes {
        return Err(Error::Config(format!("need at least one train example per class, got {n_train} for {classes}")));
    }
    Ok(())
}

/// Labels cycle through the classes, then the order is shuffled.
fn labels(classes: usize, n: usize, rng: &mut seed::Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    y.shuffle(rng);
    y
}

/// Isotropic unit-variance Gaussian clusters. With `classes <= dims` the
/// centres sit on scaled coordinate axes, exactly `separation` apart; otherwise
/// they are random with norm `separation / sqrt(2)`.
pub fn synth_blobs(classes: usize, dims: usize, separation: f64, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    check(classes, n_train)?;
    if dims == 0 || separation < 0.0 {
        return Err(Error::Config("blobs need dims >= 1 and separation >= 0".into()));
    }
    let mut rng = seed::rng(seed, "data/blobs");
    let radius = separation / 2f64.sqrt();
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dims {
                (0..dims).map(|d| if d == c { radius } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dims).map(|_| standard_normal(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let n = n_train + n_test;
    let y = labels(classes, n, &mut rng);
    let mut data = Vec::with_capacity(n * dims);
    for &c in &y {
        for d in 0..dims {
            data.push(centres[c][d] + standard_normal(&mut rng));
        }
    }
    Dataset::new(Tensor::new(vec![n, dims], data)?, y, classes, n_train)
}

/// Interleaved 2-D spiral arms, one per class, with Gaussian jitter of
/// standard deviation `noise`.
pub fn synth_spirals(classes: usize, noise: f64, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    check(classes, n_train)?;
    if noise < 0.0 {
        return Err(Error::Config("spiral noise must be >= 0".into()));
    }
    let mut rng = seed::rng(seed, "data/spirals");
    let n = n_train + n_test;
    let y = labels(classes, n, &mut rng);
    let mut data = Vec::with_capacity(2 * n);
    for &c in &y {
        let t: f64 = rng.random_range(0.0..1.0);
        let r = 0.1 + 0.9 * t;
        let angle = 2.5 * PI * t + 2.0 * PI * c as f64 / classes as f64;
        data.push(r * angle.cos() + noise * standard_normal(&mut rng));
        data.push(r * angle.sin() + noise * standard_normal(&mut rng));
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, y, classes, n_train)
}

/// Knobs of the oriented-texture image task.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureTask {
    /// Per-image orientation noise, as a fraction of the gap between classes.
    pub angle_jitter: f64,
    /// Spatial frequency range in radians per pixel, drawn per patch.
    pub freq: (f64, f64),
    /// Envelope width relative to the shorter image side.
    pub radius: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for TextureTask {
    fn default() -> Self {
        TextureTask { angle_jitter: 0.15, freq: (0.7, 1.5), radius: 0.2, noise: 0.3 }
    }
}

/// One Gaussian-windowed grating.
struct Patch<'a> {
    angle: f64,
    freq: f64,
    phase: f64,
    centre: (f64, f64),
    radius: f64,
    colour: &'a [f64],
}

impl Patch<'_> {
    fn paint(&self, img: &mut [f64], h: usize, w: usize) {
        let (s, c) = self.angle.sin_cos();
        let plane = h * w;
        let (cy, cx) = self.centre;
        for r in 0..h {
            for col in 0..w {
                let (dy, dx) = (r as f64 - cy, col as f64 - cx);
                let env = (-(dy * dy + dx * dx) / (2.0 * self.radius * self.radius)).exp();
                if env < 1e-3 {
                    continue;
                }
                let v = env * (self.freq * (c * dx + s * dy) + self.phase).cos();
                for (ch, &k) in self.colour.iter().enumerate() {
                    img[ch * plane + r * w + col] += k * v;
                }
            }
        }
    }
}

/// Oriented-texture images with the default [`TextureTask`].
pub fn synth_images(
    classes: usize,
    channels: usize,
    h: usize,
    w: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    synth_textures(&TextureTask::default(), classes, channels, h, w, n_train, n_test, seed)
}

/// Images whose class is the orientation of a grating patch.
///
/// Class `c` owns the orientation `pi * (c + 0.5) / classes`. Each image paints
/// one patch at its class orientation (plus jitter) somewhere in the central
/// region. Colour, frequency, phase and position are drawn per image, so none
/// of them carries label information. Telling neighbouring orientations apart
/// needs a wider receptive field than one 3x3 layer offers, which is what
/// makes depth pay off. Inputs are `[channels, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn synth_textures(
    task: &TextureTask,
    classes: usize,
    channels: usize,
    h: usize,
    w: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    check(classes, n_train)?;
    if channels == 0 || h < 4 || w < 4 {
        return Err(Error::Config(format!("images need channels >= 1 and size >= 4x4, got {channels}x{h}x{w}")));
    }
    let (lo, hi) = task.freq;
    if !(lo > 0.0 && lo <= hi) || task.radius <= 0.0 || task.noise < 0.0 || task.angle_jitter < 0.0 {
        return Err(Error::Config(format!("bad texture task {task:?}")));
    }
    let mut rng = seed::rng(seed, "data/images/samples");
    let n = n_train + n_test;
    let y = labels(classes, n, &mut rng);
    let per = channels * h * w;
    let mut data = vec![0.0; n * per];
    let (hf, wf) = (h as f64, w as f64);
    let radius = task.radius * hf.min(wf);
    let gap = PI / classes as f64;
    let mut colour = vec![0.0; channels];
    for (e, &c) in y.iter().enumerate() {
        let img = &mut data[e * per..(e + 1) * per];
        let jitter = task.angle_jitter * gap;
        let angle = gap * (c as f64 + 0.5) + rng.random_range(-jitter..=jitter);
        let freq = rng.random_range(lo..=hi);
        let phase = rng.random_range(0.0..2.0 * PI);
        let centre = (rng.random_range(0.25 * hf..0.75 * hf), rng.random_range(0.25 * wf..0.75 * wf));
        colour.iter_mut().for_each(|k| *k = rng.random_range(-1.0..1.0));
        Patch { angle, freq, phase, centre, radius, colour: &colour }.paint(img, h, w);
        for v in img.iter_mut() {
            *v += task.noise * standard_normal(&mut rng);
        }
    }
    Dataset::new(Tensor::new(vec![n, channels, h, w], data)?, y, classes, n_train)
}
