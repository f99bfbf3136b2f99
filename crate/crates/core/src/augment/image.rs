//! Single-image pixel operations on `[C, H, W]` arrays in `[0, 1]`.
//!
//! Photometric ops quantize to 8 bits where the reference definitions work on
//! byte images (posterize, solarize, autocontrast, equalize, contrast mean).

use ndarray::{Array3, ArrayView3, Axis};

/// Fill value for pixels uncovered by affine warps.
pub const AFFINE_FILL: f32 = 128.0 / 255.0;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn clamp(mut img: Array3<f32>) -> Array3<f32> {
    img.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
    img
}

/// Zero-pads `pad` pixels on every side and crops back at offset `(dy, dx)`.
pub fn crop_pad(img: ArrayView3<f32>, pad: usize, dy: usize, dx: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        let (si, sj) = (i + dy, j + dx);
        if si < pad || sj < pad || si - pad >= h || sj - pad >= w {
            0.0
        } else {
            img[[ch, si - pad, sj - pad]]
        }
    })
}

pub fn hflip(img: ArrayView3<f32>) -> Array3<f32> {
    let mut out = img.to_owned();
    out.invert_axis(Axis(2));
    out.as_standard_layout().into_owned()
}

/// Square of side `size` centred at `(cy, cx)`, clipped at the border, set to 0.
pub fn cutout(img: ArrayView3<f32>, cy: usize, cx: usize, size: usize) -> Array3<f32> {
    let (_, h, w) = img.dim();
    let half = size / 2;
    let (y0, y1) = (cy.saturating_sub(half), (cy + size - half).min(h));
    let (x0, x1) = (cx.saturating_sub(half), (cx + size - half).min(w));
    let mut out = img.to_owned();
    out.slice_mut(ndarray::s![.., y0..y1, x0..x1]).fill(0.0);
    out
}

/// Counter-clockwise rotation by `k` quarter turns. Non-square images only
/// support half turns; odd `k` is then rounded to a half turn.
pub fn rotate90(img: ArrayView3<f32>, k: u8) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let k = if h != w && k % 2 == 1 { 2 } else { k % 4 };
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| match k {
        0 => img[[ch, i, j]],
        1 => img[[ch, j, w - 1 - i]],
        2 => img[[ch, h - 1 - i, w - 1 - j]],
        _ => img[[ch, h - 1 - j, i]],
    })
}

/// ITU-R 601 luma, replicated into every channel for 3-channel input.
pub fn luma(img: ArrayView3<f32>) -> ndarray::Array2<f32> {
    let (c, h, w) = img.dim();
    if c == 3 {
        ndarray::Array2::from_shape_fn((h, w), |(i, j)| {
            0.299 * img[[0, i, j]] + 0.587 * img[[1, i, j]] + 0.114 * img[[2, i, j]]
        })
    } else {
        img.mean_axis(Axis(0)).expect("at least one channel")
    }
}

pub fn grayscale(img: ArrayView3<f32>) -> Array3<f32> {
    let l = luma(img);
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(_, i, j)| l[[i, j]])
}

/// `degenerate + factor * (img - degenerate)`, clipped.
fn blend(img: ArrayView3<f32>, degenerate: &Array3<f32>, factor: f32) -> Array3<f32> {
    let mut out = degenerate.clone();
    out.zip_mut_with(&img, |d, &x| *d += factor * (x - *d));
    clamp(out)
}

pub fn brightness(img: ArrayView3<f32>, factor: f32) -> Array3<f32> {
    clamp(img.mapv(|v| v * factor))
}

pub fn contrast(img: ArrayView3<f32>, factor: f32) -> Array3<f32> {
    let mean = luma(img).iter().map(|&v| to_byte(v) as f32).sum::<f32>() / (img.dim().1 * img.dim().2) as f32;
    let mean = (mean + 0.5).floor() / 255.0;
    blend(img, &Array3::from_elem(img.dim(), mean), factor)
}

/// Saturation: blend toward the grayscale image.
pub fn color(img: ArrayView3<f32>, factor: f32) -> Array3<f32> {
    blend(img, &grayscale(img), factor)
}

pub fn sharpness(img: ArrayView3<f32>, factor: f32) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let mut smooth = img.to_owned();
    if h >= 3 && w >= 3 {
        for ch in 0..c {
            for i in 1..h - 1 {
                for j in 1..w - 1 {
                    let mut acc = 4.0 * img[[ch, i, j]];
                    for di in 0..3 {
                        for dj in 0..3 {
                            acc += img[[ch, i + di - 1, j + dj - 1]];
                        }
                    }
                    smooth[[ch, i, j]] = acc / 13.0;
                }
            }
        }
    }
    blend(img, &smooth, factor)
}

pub fn invert(img: ArrayView3<f32>) -> Array3<f32> {
    img.mapv(|v| 1.0 - v)
}

pub fn posterize(img: ArrayView3<f32>, bits: u8) -> Array3<f32> {
    let mask: u8 = if bits >= 8 { 0xFF } else { !(0xFFu8 >> bits) };
    img.mapv(|v| (to_byte(v) & mask) as f32 / 255.0)
}

/// Inverts every byte value at or above `threshold` (0..=256).
pub fn solarize(img: ArrayView3<f32>, threshold: f32) -> Array3<f32> {
    img.mapv(|v| {
        let b = to_byte(v);
        if b as f32 >= threshold {
            (255 - b) as f32 / 255.0
        } else {
            v
        }
    })
}

/// Per-channel stretch of the byte range to `[0, 255]`.
pub fn autocontrast(img: ArrayView3<f32>) -> Array3<f32> {
    let mut out = img.to_owned();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        let lo = ch.iter().map(|&v| to_byte(v)).min().unwrap_or(0) as f32;
        let hi = ch.iter().map(|&v| to_byte(v)).max().unwrap_or(0) as f32;
        if hi > lo {
            ch.mapv_inplace(|v| ((to_byte(v) as f32 - lo) * 255.0 / (hi - lo)).round().clamp(0.0, 255.0) / 255.0);
        }
    }
    out
}

/// Per-channel histogram equalization with the cumulative-histogram lookup
/// table used by PIL.
pub fn equalize(img: ArrayView3<f32>) -> Array3<f32> {
    let mut out = img.to_owned();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        let mut hist = [0usize; 256];
        for &v in ch.iter() {
            hist[to_byte(v) as usize] += 1;
        }
        let last = hist.iter().rev().find(|&&n| n > 0).copied().unwrap_or(0);
        let step = (hist.iter().sum::<usize>() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255) as u8;
            n += hist[i];
        }
        ch.mapv_inplace(|v| lut[to_byte(v) as usize] as f32 / 255.0);
    }
    out
}

/// Nearest-neighbour inverse warp: output pixel `(x, y)` samples the input at
/// `(a x + b y + c, d x + e y + f)`; out-of-range pixels take [`AFFINE_FILL`].
pub fn affine(img: ArrayView3<f32>, m: [f32; 6]) -> Array3<f32> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        let (x, y) = (j as f32 + 0.5, i as f32 + 0.5);
        let sx = (m[0] * x + m[1] * y + m[2]).floor();
        let sy = (m[3] * x + m[4] * y + m[5]).floor();
        if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
            img[[ch, sy as usize, sx as usize]]
        } else {
            AFFINE_FILL
        }
    })
}

pub fn rotate(img: ArrayView3<f32>, degrees: f32) -> Array3<f32> {
    let (_, h, w) = img.dim();
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    // Inverse map of a counter-clockwise rotation about the centre (y down).
    affine(img, [c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy])
}

/// 3x3 Gaussian blur with edge replication.
pub fn gaussian_blur(img: ArrayView3<f32>, sigma: f32) -> Array3<f32> {
    let k1: [f32; 3] = {
        let e = (-1.0 / (2.0 * sigma * sigma)).exp();
        [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)]
    };
    let (c, h, w) = img.dim();
    let at = |ch: usize, i: isize, j: isize| {
        img[[ch, i.clamp(0, h as isize - 1) as usize, j.clamp(0, w as isize - 1) as usize]]
    };
    clamp(Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        let mut acc = 0.0;
        for (di, ki) in k1.iter().enumerate() {
            for (dj, kj) in k1.iter().enumerate() {
                acc += ki * kj * at(ch, i as isize + di as isize - 1, j as isize + dj as isize - 1);
            }
        }
        acc
    }))
}
