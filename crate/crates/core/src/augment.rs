//! Candidate label-preserving transformations and the augmentation pipeline.
//!
//! All resampling is bilinear. Intensities stay on the 0-255 scale and are
//! rounded and clamped after every transform.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::rgb::RgbImage;

pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const SQUEEZE_RANGE: (f64, f64) = (0.8, 1.2);
pub const ROTATION_RANGE_DEG: (f64, f64) = (-30.0, 30.0);
pub const SMALL_NOISE_SIGMA: f64 = 5.0;
pub const LARGE_NOISE_SIGMA: f64 = 30.0;
pub const ALTER_RGB_MAGNITUDE: f64 = 25.0;

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Horizontal flip.
pub fn reflect(img: &RgbImage) -> RgbImage {
    let w = img.width();
    RgbImage::from_fn(img.height(), w, |y, x| img.get(y, w - 1 - x)).expect("same dimensions")
}

fn sample_bilinear(img: &RgbImage, sy: f64, sx: f64) -> [f64; 3] {
    let (h, w) = (img.height(), img.width());
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let (p00, p01, p10, p11) = (img.get(y0, x0), img.get(y0, x1), img.get(y1, x0), img.get(y1, x1));
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
        let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Bilinear resize with pixel-centre alignment; a same-size resize is exact.
pub fn resize(img: &RgbImage, new_h: usize, new_w: usize) -> Result<RgbImage> {
    if new_h == 0 || new_w == 0 {
        return Err(invalid("resize target must be non-empty"));
    }
    let (h, w) = (img.height(), img.width());
    if (new_h, new_w) == (h, w) {
        return Ok(img.clone());
    }
    let ry = h as f64 / new_h as f64;
    let rx = w as f64 / new_w as f64;
    RgbImage::from_fn(new_h, new_w, |y, x| {
        let sy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (w - 1) as f64);
        sample_bilinear(img, sy, sx).map(to_u8)
    })
}

fn scaled_extent(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

/// Proportional rescale to `(round(s*h), round(s*w))`.
pub fn scale(img: &RgbImage, s: f64) -> Result<RgbImage> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(invalid(format!("scale factor {} must be positive", s)));
    }
    resize(img, scaled_extent(img.height(), s), scaled_extent(img.width(), s))
}

pub fn random_scale(img: &RgbImage, seed: u64) -> RgbImage {
    AugmentOp::RandomScaling.apply(img, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Aspect-ratio change: width becomes `round(s*w)`, height is kept.
pub fn squeeze(img: &RgbImage, s: f64) -> Result<RgbImage> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(invalid(format!("squeeze factor {} must be positive", s)));
    }
    resize(img, img.height(), scaled_extent(img.width(), s))
}

pub fn random_squeeze(img: &RgbImage, seed: u64) -> RgbImage {
    AugmentOp::Squeezing.apply(img, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn add_noise_with(img: &RgbImage, sigma: f64, rng: &mut impl Rng) -> RgbImage {
    if sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let pixels = img
        .pixels()
        .iter()
        .map(|&p| to_u8(p as f64 + normal.sample(rng)))
        .collect();
    RgbImage::new(img.height(), img.width(), pixels).expect("same dimensions")
}

/// I.i.d. Gaussian noise with standard deviation `sigma` in 0-255 units.
pub fn add_noise(img: &RgbImage, sigma: f64, seed: u64) -> Result<RgbImage> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("noise sigma {} must be non-negative", sigma)));
    }
    Ok(add_noise_with(img, sigma, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Per-channel offsets drawn from N(0, magnitude).
pub fn draw_rgb_offsets(magnitude: f64, rng: &mut impl Rng) -> [f64; 3] {
    if magnitude == 0.0 {
        return [0.0; 3];
    }
    let normal = Normal::new(0.0, magnitude).expect("finite magnitude");
    [normal.sample(rng), normal.sample(rng), normal.sample(rng)]
}

/// Adds a spatially constant offset to each channel.
pub fn shift_channels(img: &RgbImage, offsets: [f64; 3]) -> RgbImage {
    let pixels = img
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &p)| to_u8(p as f64 + offsets[i % 3]))
        .collect();
    RgbImage::new(img.height(), img.width(), pixels).expect("same dimensions")
}

pub fn alter_rgb(img: &RgbImage, magnitude: f64, seed: u64) -> Result<RgbImage> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(invalid(format!("alter-rgb magnitude {} must be non-negative", magnitude)));
    }
    let offsets = draw_rgb_offsets(magnitude, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(shift_channels(img, offsets))
}

/// Rotation about the image centre by `angle_deg`, black outside the source.
pub fn rotate(img: &RgbImage, angle_deg: f64) -> RgbImage {
    if angle_deg == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    RgbImage::from_fn(h, w, |y, x| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        // inverse map: rotate destination coordinates by -angle
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
            [0, 0, 0]
        } else {
            sample_bilinear(img, sy, sx).map(to_u8)
        }
    })
    .expect("same dimensions")
}

pub fn rotate_affine(img: &RgbImage, seed: u64) -> RgbImage {
    AugmentOp::Rotation.apply(img, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The candidate transformations, each with fixed parameter ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentOp {
    Reflection,
    RandomScaling,
    SmallNoise,
    LargeNoise,
    AlterRgb,
    Rotation,
    Squeezing,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 7] = [
        AugmentOp::Reflection,
        AugmentOp::RandomScaling,
        AugmentOp::SmallNoise,
        AugmentOp::LargeNoise,
        AugmentOp::AlterRgb,
        AugmentOp::Rotation,
        AugmentOp::Squeezing,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AugmentOp::Reflection => "reflection",
            AugmentOp::RandomScaling => "scaling",
            AugmentOp::SmallNoise => "small-noise",
            AugmentOp::LargeNoise => "large-noise",
            AugmentOp::AlterRgb => "alter-rgb",
            AugmentOp::Rotation => "rotation",
            AugmentOp::Squeezing => "squeezing",
        }
    }

    /// Range of the randomly drawn parameter, if the op draws one.
    /// Noise ops have a fixed sigma and report it as a degenerate range.
    pub fn parameter_range(&self) -> Option<(f64, f64)> {
        match self {
            AugmentOp::Reflection | AugmentOp::AlterRgb => None,
            AugmentOp::RandomScaling => Some(SCALE_RANGE),
            AugmentOp::SmallNoise => Some((SMALL_NOISE_SIGMA, SMALL_NOISE_SIGMA)),
            AugmentOp::LargeNoise => Some((LARGE_NOISE_SIGMA, LARGE_NOISE_SIGMA)),
            AugmentOp::Rotation => Some(ROTATION_RANGE_DEG),
            AugmentOp::Squeezing => Some(SQUEEZE_RANGE),
        }
    }

    pub fn draw_parameter(&self, rng: &mut impl Rng) -> Option<f64> {
        match self.parameter_range()? {
            (lo, hi) if lo == hi => Some(lo),
            (lo, hi) => Some(rng.random_range(lo..hi)),
        }
    }

    pub fn apply(&self, img: &RgbImage, rng: &mut impl Rng) -> RgbImage {
        let param = self.draw_parameter(rng);
        match self {
            AugmentOp::Reflection => reflect(img),
            AugmentOp::RandomScaling => scale(img, param.unwrap()).expect("in-range factor"),
            AugmentOp::SmallNoise | AugmentOp::LargeNoise => add_noise_with(img, param.unwrap(), rng),
            AugmentOp::AlterRgb => shift_channels(img, draw_rgb_offsets(ALTER_RGB_MAGNITUDE, rng)),
            AugmentOp::Rotation => rotate(img, param.unwrap()),
            AugmentOp::Squeezing => squeeze(img, param.unwrap()).expect("in-range factor"),
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| invalid(format!("unknown augmentation '{}'", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineStep {
    pub op: AugmentOp,
    /// Chance the step is applied at all.
    pub probability: f64,
}

/// Ordered list of augmentation steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pipeline {
    pub steps: Vec<PipelineStep>,
}

impl Pipeline {
    pub fn none() -> Self {
        Pipeline { steps: Vec::new() }
    }

    /// Reflection with probability 0.5, then random scaling and small noise.
    pub fn default_training() -> Self {
        Pipeline {
            steps: vec![
                PipelineStep {
                    op: AugmentOp::Reflection,
                    probability: 0.5,
                },
                PipelineStep {
                    op: AugmentOp::RandomScaling,
                    probability: 1.0,
                },
                PipelineStep {
                    op: AugmentOp::SmallNoise,
                    probability: 1.0,
                },
            ],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn apply(&self, img: &RgbImage, seed: u64) -> RgbImage {
        augment_pipeline(img, &self.steps, seed)
    }
}

/// Parses `default`, `none`, or a comma list such as
/// `reflection:0.5,scaling,small-noise` (`op[:probability]`).
impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "default" => return Ok(Pipeline::default_training()),
            "none" | "" => return Ok(Pipeline::none()),
            _ => {}
        }
        let steps = s
            .split(',')
            .map(|part| {
                let (name, prob) = match part.trim().split_once(':') {
                    Some((n, p)) => (
                        n,
                        p.parse::<f64>()
                            .map_err(|_| invalid(format!("bad probability in '{}'", part)))?,
                    ),
                    None => (part.trim(), 1.0),
                };
                if !(0.0..=1.0).contains(&prob) {
                    return Err(invalid(format!("probability {} outside [0, 1]", prob)));
                }
                Ok(PipelineStep {
                    op: name.parse()?,
                    probability: prob,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Pipeline { steps })
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.steps.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self
            .steps
            .iter()
            .map(|s| {
                if s.probability == 1.0 {
                    s.op.name().to_string()
                } else {
                    format!("{}:{}", s.op.name(), s.probability)
                }
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Applies `steps` in order with a generator seeded from `seed`.
pub fn augment_pipeline(img: &RgbImage, steps: &[PipelineStep], seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = img.clone();
    for step in steps {
        let fire = step.probability >= 1.0 || rng.random::<f64>() < step.probability;
        if fire {
            cur = step.op.apply(&cur, &mut rng);
        }
    }
    cur
}
