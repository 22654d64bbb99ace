//! Image perturbations for the representation branch.
//!
//! Every function here is pure: the output depends only on the input, the
//! parameters and an explicit seed, and inputs are never modified.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use bit_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BitError, Result};
use crate::observation::Observation;
use crate::seeding;

/// Number of bundled overlay textures.
pub const DISTRACTOR_POOL_SIZE: usize = 64;
const DISTRACTOR_POOL_SEED: u64 = 0x0B1D_D15C;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Overlay,
    RandomConv,
    RandomShift,
    None,
}

impl AugmentationKind {
    pub fn name(self) -> &'static str {
        match self {
            AugmentationKind::Overlay => "overlay",
            AugmentationKind::RandomConv => "conv",
            AugmentationKind::RandomShift => "shift",
            AugmentationKind::None => "none",
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationKind {
    type Err = BitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "overlay" | "random_overlay" => Ok(AugmentationKind::Overlay),
            "conv" | "random_conv" => Ok(AugmentationKind::RandomConv),
            "shift" | "random_shift" => Ok(AugmentationKind::RandomShift),
            "none" => Ok(AugmentationKind::None),
            other => Err(BitError::Argument(format!(
                "unknown augmentation `{other}` (expected overlay, conv, shift or none)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    /// Overlay blend weight.
    pub alpha: f64,
    /// Shift padding in pixels.
    pub pad: usize,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            kind: AugmentationKind::Overlay,
            alpha: 0.5,
            pad: 4,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        AugmentationSpec {
            kind: AugmentationKind::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(BitError::Argument(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Procedurally generated texture images used as overlay distractors.
#[derive(Clone, Debug, PartialEq)]
pub struct DistractorPool {
    height: usize,
    width: usize,
    images: Vec<Vec<f32>>,
}

impl DistractorPool {
    /// The fixed pool of [`DISTRACTOR_POOL_SIZE`] textures at the given size.
    pub fn standard(height: usize, width: usize) -> Self {
        Self::procedural(height, width, DISTRACTOR_POOL_SIZE, DISTRACTOR_POOL_SEED)
    }

    /// `count` textures cycling through three families: smooth plasma,
    /// overlapping rectangles and oriented stripes.
    pub fn procedural(height: usize, width: usize, count: usize, seed: u64) -> Self {
        let images = (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix(seed, i as u64));
                match i % 3 {
                    0 => plasma(height, width, &mut rng),
                    1 => rectangles(height, width, &mut rng),
                    _ => stripes(height, width, &mut rng),
                }
            })
            .collect();
        DistractorPool { height, width, images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image `i` as planar `3 x H x W` values in `[0, 1]`.
    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

fn plasma(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let waves: Vec<[f64; 3]> = (0..4)
            .map(|_| {
                [
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(0.0..2.0 * PI),
                ]
            })
            .collect();
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for (i, v) in plane.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            let s: f64 = waves
                .iter()
                .map(|k| (2.0 * PI * (k[0] * x + k[1] * y) + k[2]).sin())
                .sum();
            *v = (0.5 + s / 8.0) as f32;
        }
    }
    out
}

fn rectangles(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * h * w];
    let fill: [f32; 3] = [0.0; 3].map(|_: f32| rng.random_range(0.0..1.0));
    for c in 0..3 {
        out[c * h * w..(c + 1) * h * w].fill(fill[c]);
    }
    for _ in 0..rng.random_range(6..14) {
        let color: [f32; 3] = [0.0; 3].map(|_: f32| rng.random_range(0.0..1.0));
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (rh, rw) = (rng.random_range(1..=h / 2 + 1), rng.random_range(1..=w / 2 + 1));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                for c in 0..3 {
                    out[(c * h + y) * w + x] = color[c];
                }
            }
        }
    }
    out
}

fn stripes(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let a: [f32; 3] = [0.0; 3].map(|_: f32| rng.random_range(0.0..1.0));
    let b: [f32; 3] = [0.0; 3].map(|_: f32| rng.random_range(0.0..1.0));
    let angle = rng.random_range(0.0..PI);
    let freq = rng.random_range(2.0..8.0);
    let mut out = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
        let t = ((2.0 * PI * freq * (x * angle.cos() + y * angle.sin())).sin() * 0.5 + 0.5) as f32;
        for c in 0..3 {
            out[c * h * w + i] = a[c] * t + b[c] * (1.0 - t);
        }
    }
    out
}

/// Blends each stacked frame `f` with its distractor `d`:
/// `(1 - alpha) f + alpha d`, clamped to `[0, 1]`.
pub fn random_overlay(o: &Observation, distractors: &[&[f32]], alpha: f64) -> Result<Observation> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(BitError::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    if distractors.len() != o.frame_count() {
        return Err(BitError::Argument(format!(
            "{} distractors for {} frames",
            distractors.len(),
            o.frame_count()
        )));
    }
    let plane = 3 * o.height() * o.width();
    let mut out = o.clone();
    let a = alpha as f32;
    for (j, d) in distractors.iter().enumerate() {
        if d.len() != plane {
            return Err(BitError::Argument(format!(
                "distractor has {} values, frame has {plane}",
                d.len()
            )));
        }
        for (v, &dv) in out.frame_mut(j).iter_mut().zip(d.iter()) {
            *v = ((1.0 - a) * *v + a * dv).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Overlay with one pool image drawn per stacked frame.
pub fn overlay_from_pool(o: &Observation, pool: &DistractorPool, alpha: f64, seed: u64) -> Result<Observation> {
    if pool.size() != (o.height(), o.width()) {
        return Err(BitError::Argument(format!(
            "distractor pool is {:?}, observation is {}x{}",
            pool.size(),
            o.height(),
            o.width()
        )));
    }
    if pool.is_empty() {
        return Err(BitError::Argument("empty distractor pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<&[f32]> = (0..o.frame_count())
        .map(|_| pool.image(rng.random_range(0..pool.len())))
        .collect();
    random_overlay(o, &picks, alpha)
}

/// The `[out=3, in=3, 3, 3]` kernel drawn for `seed`.
pub fn random_kernel(seed: u64) -> [f32; 81] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = [0.0f32; 81];
    for v in k.iter_mut() {
        *v = rng.sample::<f32, _>(StandardNormal);
    }
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Passes every stacked frame through one random 3x3 RGB→RGB convolution
/// (reflect padding) and min-max rescales each frame to `[0, 1]`.
pub fn random_convolution(o: &Observation, seed: u64) -> Observation {
    let kernel = random_kernel(seed);
    let (h, w) = (o.height(), o.width());
    let mut out = o.clone();
    for j in 0..o.frame_count() {
        let src = o.frame(j);
        let dst = out.frame_mut(j);
        for oc in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f32;
                    for ic in 0..3 {
                        for ky in 0..3 {
                            let sy = reflect(y as isize + ky as isize - 1, h);
                            for kx in 0..3 {
                                let sx = reflect(x as isize + kx as isize - 1, w);
                                acc += kernel[((oc * 3 + ic) * 3 + ky) * 3 + kx] * src[(ic * h + sy) * w + sx];
                            }
                        }
                    }
                    dst[(oc * h + y) * w + x] = acc;
                }
            }
        }
        let (lo, hi) = dst.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let range = hi - lo;
        for v in dst.iter_mut() {
            *v = if range > 1e-12 {
                ((*v - lo) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

/// Crop origin in the padded image, each coordinate in `[0, 2 pad]`.
pub fn shift_offset(pad: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
}

/// Replicate-pads by `pad` and crops an `H x W` window at a random offset
/// shared by all stacked frames.
pub fn random_shift(o: &Observation, pad: usize, seed: u64) -> Result<Observation> {
    let (h, w) = (o.height(), o.width());
    if 2 * pad >= h.min(w) {
        return Err(BitError::Argument(format!(
            "shift pad {pad} must be below half of {}x{}",
            h, w
        )));
    }
    if pad == 0 {
        return Ok(o.clone());
    }
    let (oy, ox) = shift_offset(pad, seed);
    let mut out = o.clone();
    let src = o.data();
    let dst = out.data_mut();
    for c in 0..o.channels() {
        for y in 0..h {
            let sy = (y + oy).saturating_sub(pad).min(h - 1);
            for x in 0..w {
                let sx = (x + ox).saturating_sub(pad).min(w - 1);
                dst[(c * h + y) * w + x] = src[(c * h + sy) * w + sx];
            }
        }
    }
    Ok(out)
}

/// Applies an [`AugmentationSpec`], owning the distractor pool it needs.
#[derive(Clone, Debug)]
pub struct Augmenter {
    spec: AugmentationSpec,
    pool: Option<DistractorPool>,
}

impl Augmenter {
    pub fn new(spec: AugmentationSpec, height: usize, width: usize) -> Result<Self> {
        spec.validate()?;
        if spec.kind == AugmentationKind::RandomShift && 2 * spec.pad >= height.min(width) {
            return Err(BitError::Argument(format!(
                "shift pad {} must be below half of {height}x{width}",
                spec.pad
            )));
        }
        let pool = (spec.kind == AugmentationKind::Overlay).then(|| DistractorPool::standard(height, width));
        Ok(Augmenter { spec, pool })
    }

    pub fn spec(&self) -> &AugmentationSpec {
        &self.spec
    }

    pub fn apply(&self, o: &Observation, seed: u64) -> Result<Observation> {
        let seed = seeding::mix(self.spec.seed, seed);
        match self.spec.kind {
            AugmentationKind::None => Ok(o.clone()),
            AugmentationKind::Overlay => {
                overlay_from_pool(o, self.pool.as_ref().expect("overlay pool"), self.spec.alpha, seed)
            }
            AugmentationKind::RandomConv => Ok(random_convolution(o, seed)),
            AugmentationKind::RandomShift => random_shift(o, self.spec.pad, seed),
        }
    }

    /// Augments every row of a `[n, C, H, W]` batch with its own derived seed.
    pub fn apply_batch(&self, batch: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        if self.spec.kind == AugmentationKind::None {
            return Ok(batch.clone());
        }
        let n = batch.dim(0);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let o = Observation::from_batch(batch, i)?;
            rows.push(self.apply(&o, seeding::mix(seed, i as u64))?);
        }
        Observation::stack(&rows)
    }
}
