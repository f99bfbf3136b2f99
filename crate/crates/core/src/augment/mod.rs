//! Augmentation family: individual ops, named policies and independent
//! transform sampling.
//!
//! Sampling resolves every random choice up front into a [`Transform`], a
//! plain list of [`Step`]s that can be applied repeatedly and serialized.
//! Geometric parameters are stored relative to the image size, so a transform
//! does not depend on the shape it is later applied to.

pub mod image;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Sub-operations of the AutoAugment policy table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoAugOp {
    Invert,
    Contrast,
    Rotate,
    TranslateX,
    TranslateY,
    Sharpness,
    ShearX,
    ShearY,
    AutoContrast,
    Equalize,
    Posterize,
    Color,
    Brightness,
    Solarize,
}

const AUTOAUG_NAMES: [(&str, AutoAugOp); 14] = [
    ("invert", AutoAugOp::Invert),
    ("contrast", AutoAugOp::Contrast),
    ("rotate", AutoAugOp::Rotate),
    ("translate_x", AutoAugOp::TranslateX),
    ("translate_y", AutoAugOp::TranslateY),
    ("sharpness", AutoAugOp::Sharpness),
    ("shear_x", AutoAugOp::ShearX),
    ("shear_y", AutoAugOp::ShearY),
    ("autocontrast", AutoAugOp::AutoContrast),
    ("equalize", AutoAugOp::Equalize),
    ("posterize", AutoAugOp::Posterize),
    ("color", AutoAugOp::Color),
    ("brightness", AutoAugOp::Brightness),
    ("solarize", AutoAugOp::Solarize),
];

impl AutoAugOp {
    pub fn name(self) -> &'static str {
        AUTOAUG_NAMES.iter().find(|(_, op)| *op == self).expect("all listed").0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    CropPad,
    Hflip,
    Cutout,
    ColorJitter,
    Grayscale,
    Rotate90,
    GaussianBlur,
    Identity,
    AutoAug(AutoAugOp),
}

const SIMPLE_KINDS: [(&str, OpKind); 8] = [
    ("crop_pad", OpKind::CropPad),
    ("hflip", OpKind::Hflip),
    ("cutout", OpKind::Cutout),
    ("color_jitter", OpKind::ColorJitter),
    ("grayscale", OpKind::Grayscale),
    ("rotate90", OpKind::Rotate90),
    ("gaussian_blur", OpKind::GaussianBlur),
    ("identity", OpKind::Identity),
];

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::AutoAug(op) => write!(f, "autoaug.{}", op.name()),
            k => f.write_str(SIMPLE_KINDS.iter().find(|(_, s)| s == k).expect("all listed").0),
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(sub) = s.strip_prefix("autoaug.") {
            if let Some((_, op)) = AUTOAUG_NAMES.iter().find(|(n, _)| *n == sub) {
                return Ok(OpKind::AutoAug(*op));
            }
        } else if let Some((_, k)) = SIMPLE_KINDS.iter().find(|(n, _)| *n == s) {
            return Ok(*k);
        }
        let mut known: Vec<String> = SIMPLE_KINDS.iter().map(|(n, _)| n.to_string()).collect();
        known.extend(AUTOAUG_NAMES.iter().map(|(n, _)| format!("autoaug.{n}")));
        Err(Error::UnknownName {
            kind: "augmentation op",
            name: s.to_string(),
            known: known.join(", "),
        })
    }
}

impl OpKind {
    /// Inclusive magnitude range and whether the magnitude must be an integer.
    ///
    /// | kind            | magnitude                          |
    /// |-----------------|------------------------------------|
    /// | `crop_pad`      | padding in pixels, 0..=16          |
    /// | `cutout`        | side as a fraction of width, (0, 1]|
    /// | `color_jitter`  | jitter strength, 0..=1             |
    /// | `gaussian_blur` | largest sigma, 0.1..=5             |
    /// | `autoaug.*`     | magnitude bin, 0..=9               |
    /// | others          | unused, must be 0                  |
    pub fn magnitude_range(self) -> (f64, f64, bool) {
        match self {
            OpKind::CropPad => (0.0, 16.0, true),
            OpKind::Cutout => (f64::MIN_POSITIVE, 1.0, false),
            OpKind::ColorJitter => (0.0, 1.0, false),
            OpKind::GaussianBlur => (0.1, 5.0, false),
            OpKind::AutoAug(_) => (0.0, 9.0, false),
            _ => (0.0, 0.0, true),
        }
    }
}

/// One op of a policy together with its application probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOp {
    pub kind: OpKind,
    pub magnitude: f64,
    pub probability: f64,
}

impl AugmentOp {
    pub fn new(kind: OpKind, magnitude: f64, probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::invalid(format!("{kind}: probability {probability} outside [0, 1]")));
        }
        let (lo, hi, integer) = kind.magnitude_range();
        if !magnitude.is_finite() || magnitude < lo || magnitude > hi || (integer && magnitude.fract() != 0.0) {
            return Err(Error::invalid(format!(
                "{kind}: magnitude {magnitude} outside [{lo}, {hi}]{}",
                if integer { " or not an integer" } else { "" }
            )));
        }
        Ok(Self {
            kind,
            magnitude,
            probability,
        })
    }

    pub fn crop_pad(pad: usize) -> Self {
        Self::new(OpKind::CropPad, pad as f64, 1.0).expect("valid padding")
    }

    pub fn hflip(probability: f64) -> Self {
        Self::new(OpKind::Hflip, 0.0, probability).expect("valid probability")
    }

    pub fn cutout(fraction: f64) -> Self {
        Self::new(OpKind::Cutout, fraction, 1.0).expect("valid fraction")
    }

    pub fn identity() -> Self {
        Self::new(OpKind::Identity, 0.0, 1.0).expect("valid")
    }

    fn autoaug(op: AutoAugOp, probability: f64, bin: f64) -> Self {
        Self::new(OpKind::AutoAug(op), bin, probability).expect("table entries are valid")
    }

    /// Resolves the op's randomness; `None` when the probability gate fails.
    /// `hflip` always yields a step recording whether it flipped.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Option<Step> {
        let m = self.magnitude;
        let fire = rng.gen::<f64>() < self.probability;
        if self.kind == OpKind::Hflip {
            return Some(Step::Hflip { flip: fire });
        }
        if !fire {
            return None;
        }
        let sign = |rng: &mut ChaCha8Rng| if rng.gen::<bool>() { 1.0f32 } else { -1.0 };
        let bin = |lo: f64, hi: f64| (lo + (hi - lo) * m / 9.0) as f32;
        Some(match self.kind {
            OpKind::Identity => Step::Identity,
            OpKind::Hflip => unreachable!("handled above"),
            OpKind::CropPad => {
                let pad = m as usize;
                Step::CropPad {
                    pad,
                    dy: rng.gen_range(0..=2 * pad),
                    dx: rng.gen_range(0..=2 * pad),
                }
            }
            OpKind::Cutout => Step::Cutout {
                cy: rng.gen::<f32>(),
                cx: rng.gen::<f32>(),
                size: m as f32,
            },
            OpKind::ColorJitter => {
                let mut f = || rng.gen_range((1.0 - m).max(0.0)..=1.0 + m) as f32;
                Step::ColorJitter {
                    brightness: f(),
                    contrast: f(),
                    saturation: f(),
                }
            }
            OpKind::Grayscale => Step::Grayscale,
            OpKind::Rotate90 => Step::Rotate90 {
                quarter_turns: rng.gen_range(1..=3),
            },
            OpKind::GaussianBlur => Step::GaussianBlur {
                sigma: rng.gen_range(0.1..=m) as f32,
            },
            OpKind::AutoAug(op) => match op {
                AutoAugOp::Invert => Step::Invert,
                AutoAugOp::AutoContrast => Step::AutoContrast,
                AutoAugOp::Equalize => Step::Equalize,
                AutoAugOp::Contrast => Step::Contrast {
                    factor: 1.0 + bin(0.0, 0.9) * sign(rng),
                },
                AutoAugOp::Color => Step::Color {
                    factor: 1.0 + bin(0.0, 0.9) * sign(rng),
                },
                AutoAugOp::Brightness => Step::Brightness {
                    factor: 1.0 + bin(0.0, 0.9) * sign(rng),
                },
                AutoAugOp::Sharpness => Step::Sharpness {
                    factor: 1.0 + bin(0.0, 0.9) * sign(rng),
                },
                AutoAugOp::Rotate => Step::Rotate {
                    degrees: bin(0.0, 30.0) * sign(rng),
                },
                AutoAugOp::ShearX => Step::ShearX {
                    shear: bin(0.0, 0.3) * sign(rng),
                },
                AutoAugOp::ShearY => Step::ShearY {
                    shear: bin(0.0, 0.3) * sign(rng),
                },
                AutoAugOp::TranslateX => Step::TranslateX {
                    fraction: bin(0.0, 150.0 / 331.0) * sign(rng),
                },
                AutoAugOp::TranslateY => Step::TranslateY {
                    fraction: bin(0.0, 150.0 / 331.0) * sign(rng),
                },
                AutoAugOp::Posterize => Step::Posterize {
                    bits: bin(8.0, 4.0).round() as u8,
                },
                AutoAugOp::Solarize => Step::Solarize {
                    threshold: bin(256.0, 0.0),
                },
            },
        })
    }
}

/// A fully resolved augmentation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    Identity,
    /// Crop offset `(dy, dx)` in the padded image, each in `0..=2 * pad`.
    CropPad { pad: usize, dy: usize, dx: usize },
    Hflip { flip: bool },
    /// Centre as fractions of height/width in `[0, 1)`; side as a fraction of width.
    Cutout { cy: f32, cx: f32, size: f32 },
    ColorJitter { brightness: f32, contrast: f32, saturation: f32 },
    Grayscale,
    Rotate90 { quarter_turns: u8 },
    GaussianBlur { sigma: f32 },
    Invert,
    AutoContrast,
    Equalize,
    Contrast { factor: f32 },
    Color { factor: f32 },
    Brightness { factor: f32 },
    Sharpness { factor: f32 },
    Rotate { degrees: f32 },
    ShearX { shear: f32 },
    ShearY { shear: f32 },
    TranslateX { fraction: f32 },
    TranslateY { fraction: f32 },
    Posterize { bits: u8 },
    Solarize { threshold: f32 },
}

impl Step {
    pub fn apply(&self, img: ArrayView3<f32>) -> Array3<f32> {
        let (_, h, w) = img.dim();
        match *self {
            Step::Identity | Step::Hflip { flip: false } => img.to_owned(),
            Step::CropPad { pad, dy, dx } => image::crop_pad(img, pad, dy, dx),
            Step::Hflip { flip: true } => image::hflip(img),
            Step::Cutout { cy, cx, size } => {
                let side = ((size * w as f32).round() as usize).max(1);
                let cy = ((cy * h as f32) as usize).min(h - 1);
                let cx = ((cx * w as f32) as usize).min(w - 1);
                image::cutout(img, cy, cx, side)
            }
            Step::ColorJitter {
                brightness,
                contrast,
                saturation,
            } => {
                let x = image::brightness(img, brightness);
                let x = image::contrast(x.view(), contrast);
                image::color(x.view(), saturation)
            }
            Step::Grayscale => image::grayscale(img),
            Step::Rotate90 { quarter_turns } => image::rotate90(img, quarter_turns),
            Step::GaussianBlur { sigma } => image::gaussian_blur(img, sigma),
            Step::Invert => image::invert(img),
            Step::AutoContrast => image::autocontrast(img),
            Step::Equalize => image::equalize(img),
            Step::Contrast { factor } => image::contrast(img, factor),
            Step::Color { factor } => image::color(img, factor),
            Step::Brightness { factor } => image::brightness(img, factor),
            Step::Sharpness { factor } => image::sharpness(img, factor),
            Step::Rotate { degrees } => image::rotate(img, degrees),
            Step::ShearX { shear } => image::affine(img, [1.0, shear, 0.0, 0.0, 1.0, 0.0]),
            Step::ShearY { shear } => image::affine(img, [1.0, 0.0, 0.0, shear, 1.0, 0.0]),
            Step::TranslateX { fraction } => image::affine(img, [1.0, 0.0, fraction * w as f32, 0.0, 1.0, 0.0]),
            Step::TranslateY { fraction } => image::affine(img, [1.0, 0.0, 0.0, 0.0, 1.0, fraction * h as f32]),
            Step::Posterize { bits } => image::posterize(img, bits),
            Step::Solarize { threshold } => image::solarize(img, threshold),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Step::Identity => "identity",
            Step::CropPad { .. } => "crop_pad",
            Step::Hflip { .. } => "hflip",
            Step::Cutout { .. } => "cutout",
            Step::ColorJitter { .. } => "color_jitter",
            Step::Grayscale => "grayscale",
            Step::Rotate90 { .. } => "rotate90",
            Step::GaussianBlur { .. } => "gaussian_blur",
            Step::Invert => "invert",
            Step::AutoContrast => "autocontrast",
            Step::Equalize => "equalize",
            Step::Contrast { .. } => "contrast",
            Step::Color { .. } => "color",
            Step::Brightness { .. } => "brightness",
            Step::Sharpness { .. } => "sharpness",
            Step::Rotate { .. } => "rotate",
            Step::ShearX { .. } => "shear_x",
            Step::ShearY { .. } => "shear_y",
            Step::TranslateX { .. } => "translate_x",
            Step::TranslateY { .. } => "translate_y",
            Step::Posterize { .. } => "posterize",
            Step::Solarize { .. } => "solarize",
        }
    }
}

/// A deterministic per-image transform.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub steps: Vec<Step>,
}

impl Transform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.steps
            .iter()
            .all(|s| matches!(s, Step::Identity | Step::Hflip { flip: false }))
    }

    pub fn apply_image(&self, img: ArrayView3<f32>) -> Array3<f32> {
        let mut x = img.to_owned();
        for step in &self.steps {
            x = step.apply(x.view());
        }
        x
    }

    /// Applies the same transform to every image of the batch.
    pub fn apply(&self, batch: &ImageBatch) -> ImageBatch {
        map_images(batch, |_, img| self.apply_image(img))
    }
}

/// One independently sampled transform per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTransform {
    pub per_sample: Vec<Transform>,
}

impl BatchTransform {
    pub fn apply(&self, batch: &ImageBatch) -> Result<ImageBatch> {
        if batch.len() != self.per_sample.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} images", self.per_sample.len()),
                actual: format!("{} images", batch.len()),
            });
        }
        Ok(map_images(batch, |i, img| self.per_sample[i].apply_image(img)))
    }
}

fn map_images(batch: &ImageBatch, f: impl Fn(usize, ArrayView3<f32>) -> Array3<f32>) -> ImageBatch {
    let mut out = Array4::<f32>::zeros(batch.data().raw_dim());
    for (i, (src, mut dst)) in batch
        .data()
        .axis_iter(Axis(0))
        .zip(out.axis_iter_mut(Axis(0)))
        .enumerate()
    {
        dst.assign(&f(i, src));
    }
    ImageBatch::clipped(out)
}

/// Applies one op to every image, with independent draws per image.
pub fn apply(op: &AugmentOp, batch: &ImageBatch, rng: &RngState) -> ImageBatch {
    map_images(batch, |i, img| {
        let mut g = rng.derive("sample", i as u64).generator();
        match op.sample(&mut g) {
            Some(step) => step.apply(img),
            None => img.to_owned(),
        }
    })
}

pub const POLICY_NAMES: [&str; 6] = ["none", "base", "base+cutout", "base+color", "autoaugment", "custom"];

/// A distribution over transforms: an optional uniformly chosen sub-policy
/// followed by `ops` in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub name: String,
    pub ops: Vec<AugmentOp>,
    pub sub_policies: Option<Vec<(AugmentOp, AugmentOp)>>,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self {
            name: "none".into(),
            ops: Vec::new(),
            sub_policies: None,
        }
    }

    /// Random crop with 4-pixel zero padding, then horizontal flip with p = 0.5.
    pub fn base() -> Self {
        Self {
            name: "base".into(),
            ops: vec![AugmentOp::crop_pad(4), AugmentOp::hflip(0.5)],
            sub_policies: None,
        }
    }

    /// Base plus Cutout with half the input width.
    pub fn base_cutout() -> Self {
        let mut p = Self::base();
        p.name = "base+cutout".into();
        p.ops.push(AugmentOp::cutout(0.5));
        p
    }

    /// Base plus color jitter (p = 0.8) and grayscale (p = 0.2).
    pub fn base_color() -> Self {
        let mut p = Self::base();
        p.name = "base+color".into();
        p.ops.push(AugmentOp::new(OpKind::ColorJitter, 0.4, 0.8).expect("valid"));
        p.ops.push(AugmentOp::new(OpKind::Grayscale, 0.0, 0.2).expect("valid"));
        p
    }

    /// Fixed CIFAR-10 AutoAugment table followed by base and Cutout.
    pub fn autoaugment() -> Self {
        let mut p = Self::base_cutout();
        p.name = "autoaugment".into();
        p.sub_policies = Some(cifar10_autoaugment_table());
        p
    }

    pub fn custom(ops: Vec<AugmentOp>) -> Self {
        Self {
            name: "custom".into(),
            ops,
            sub_policies: None,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::none()),
            "base" => Ok(Self::base()),
            "base+cutout" => Ok(Self::base_cutout()),
            "base+color" => Ok(Self::base_color()),
            "autoaugment" => Ok(Self::autoaugment()),
            "custom" => Err(Error::invalid("a custom policy needs an op list")),
            other => Err(Error::UnknownName {
                kind: "augmentation policy",
                name: other.to_string(),
                known: POLICY_NAMES.join(", "),
            }),
        }
    }

    /// Parses `kind:probability:magnitude` entries separated by commas, e.g.
    /// `crop_pad:1:4, hflip:0.5:0, autoaug.rotate:0.7:2`.
    pub fn parse_custom(text: &str) -> Result<Self> {
        let mut ops = Vec::new();
        for entry in text.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let parts: Vec<&str> = entry.split(':').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::invalid(format!(
                    "custom op `{entry}` must be kind:probability:magnitude"
                )));
            }
            let number = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("custom op `{entry}`: `{s}` is not a number")))
            };
            ops.push(AugmentOp::new(parts[0].parse()?, number(parts[2])?, number(parts[1])?)?);
        }
        Ok(Self::custom(ops))
    }

    /// Inverse of [`AugmentPolicy::parse_custom`] for the plain op list.
    pub fn to_custom_string(&self) -> String {
        self.ops
            .iter()
            .map(|o| format!("{}:{}:{}", o.kind, o.probability, o.magnitude))
            .collect::<Vec<_>>()
            .join(", ")
    }

    fn sample(&self, rng: &RngState) -> Transform {
        let mut g = rng.generator();
        let mut steps = Vec::new();
        if let Some(subs) = self.sub_policies.as_ref().filter(|s| !s.is_empty()) {
            let (a, b) = &subs[g.gen_range(0..subs.len())];
            steps.extend(a.sample(&mut g));
            steps.extend(b.sample(&mut g));
        }
        for op in &self.ops {
            steps.extend(op.sample(&mut g));
        }
        Transform { steps }
    }
}

/// Draws one concrete transform from the policy.
pub fn sample_transform(policy: &AugmentPolicy, rng: &RngState) -> Transform {
    policy.sample(rng)
}

/// Two transforms drawn from distinct sub-streams.
pub fn sample_pair(policy: &AugmentPolicy, rng: &RngState) -> (Transform, Transform) {
    (policy.sample(&rng.derive("branch", 0)), policy.sample(&rng.derive("branch", 1)))
}

/// One transform per image, each from its own sub-stream.
pub fn sample_batch(policy: &AugmentPolicy, rng: &RngState, n: usize) -> BatchTransform {
    BatchTransform {
        per_sample: (0..n).map(|i| policy.sample(&rng.derive("sample", i as u64))).collect(),
    }
}

/// The CIFAR-10 AutoAugment policy: 25 sub-policies of two
/// `(op, probability, magnitude bin)` entries.
pub fn cifar10_autoaugment_table() -> Vec<(AugmentOp, AugmentOp)> {
    use AutoAugOp::*;
    let t: [(AutoAugOp, f64, f64, AutoAugOp, f64, f64); 25] = [
        (Invert, 0.1, 7.0, Contrast, 0.2, 6.0),
        (Rotate, 0.7, 2.0, TranslateX, 0.3, 9.0),
        (Sharpness, 0.8, 1.0, Sharpness, 0.9, 3.0),
        (ShearY, 0.5, 8.0, TranslateY, 0.7, 9.0),
        (AutoContrast, 0.5, 8.0, Equalize, 0.9, 2.0),
        (ShearY, 0.2, 7.0, Posterize, 0.3, 7.0),
        (Color, 0.4, 3.0, Brightness, 0.6, 7.0),
        (Sharpness, 0.3, 9.0, Brightness, 0.7, 9.0),
        (Equalize, 0.6, 5.0, Equalize, 0.5, 1.0),
        (Contrast, 0.6, 7.0, Sharpness, 0.6, 5.0),
        (Color, 0.7, 7.0, TranslateX, 0.5, 8.0),
        (Equalize, 0.3, 7.0, AutoContrast, 0.4, 8.0),
        (TranslateY, 0.4, 3.0, Sharpness, 0.2, 6.0),
        (Brightness, 0.9, 6.0, Color, 0.2, 8.0),
        (Solarize, 0.5, 2.0, Invert, 0.0, 3.0),
        (Equalize, 0.2, 0.0, AutoContrast, 0.6, 0.0),
        (Equalize, 0.2, 8.0, Equalize, 0.6, 4.0),
        (Color, 0.9, 9.0, Equalize, 0.6, 6.0),
        (AutoContrast, 0.8, 4.0, Solarize, 0.2, 8.0),
        (Brightness, 0.1, 3.0, Color, 0.7, 0.0),
        (Solarize, 0.4, 5.0, AutoContrast, 0.9, 3.0),
        (TranslateY, 0.9, 9.0, TranslateY, 0.7, 9.0),
        (AutoContrast, 0.9, 2.0, Solarize, 0.8, 3.0),
        (Equalize, 0.8, 8.0, Invert, 0.1, 3.0),
        (TranslateY, 0.7, 9.0, AutoContrast, 0.9, 1.0),
    ];
    t.iter()
        .map(|&(a, pa, ma, b, pb, mb)| (AugmentOp::autoaug(a, pa, ma), AugmentOp::autoaug(b, pb, mb)))
        .collect()
}

#[cfg(test)]
mod tests;
